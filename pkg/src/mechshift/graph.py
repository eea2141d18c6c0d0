"""Causal DAG representation, validation, traversal and the edge-list file format.

Graph file format (UTF-8)::

    # comment
    node education categorical HS,Bachelors,Masters
    node income continuous
    education -> income

Nodes are identified by name; their integer index is the declaration order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from mechshift.errors import CycleDetected, DanglingEdge, DuplicateNode, ParseError, UnknownNode, ValidationError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, CATEGORICAL)


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str = CONTINUOUS
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValidationError(f"invalid node name {self.name!r}")
        if self.kind not in KINDS:
            raise ValidationError(f"node {self.name}: unknown kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind == CATEGORICAL:
            if len(self.categories) < 2:
                raise ValidationError(f"node {self.name}: categorical nodes need at least 2 categories")
            if len(set(self.categories)) != len(self.categories):
                raise ValidationError(f"node {self.name}: duplicate category labels")
        elif self.categories:
            raise ValidationError(f"node {self.name}: continuous nodes take no categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def n_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class Dag:
    """Immutable DAG. Construct through :func:`validate_dag` or :func:`parse_graph_file`."""

    nodes: tuple[NodeSpec, ...]
    edges: frozenset[tuple[int, int]]
    _parents: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)
    _order: tuple[int, ...] = field(repr=False, compare=False)
    _index: dict = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [spec.name for spec in self.nodes]

    def index(self, node: int | str) -> int:
        if isinstance(node, str):
            try:
                return self._index[node]
            except KeyError:
                raise UnknownNode(f"unknown node {node!r}") from None
        if not 0 <= int(node) < self.n:
            raise UnknownNode(f"node index {node} out of range")
        return int(node)

    def spec(self, node: int | str) -> NodeSpec:
        return self.nodes[self.index(node)]

    def parents(self, node: int | str) -> tuple[int, ...]:
        """Parent indices of ``node`` in ascending index order."""
        return self._parents[self.index(node)]

    def children(self, node: int | str) -> tuple[int, ...]:
        j = self.index(node)
        return tuple(c for c in range(self.n) if j in self._parents[c])

    def ancestors(self, node: int | str) -> frozenset[int]:
        """Strict ancestors of ``node``."""
        seen: set[int] = set()
        stack = list(self.parents(node))
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self._parents[p])
        return frozenset(seen)

    def is_root(self, node: int | str) -> bool:
        return not self.parents(node)

    @property
    def topological_order(self) -> tuple[int, ...]:
        return self._order


def _find_cycle(n: int, edges: Iterable[tuple[int, int]]) -> list[int]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for p, c in sorted(edges):
        adj[p].append(c)
    color = [0] * n
    for start in range(n):
        if color[start]:
            continue
        path = [start]
        iters = [iter(adj[start])]
        color[start] = 1
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                color[path.pop()] = 2
                iters.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):]
            elif color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                iters.append(iter(adj[nxt]))
    return []


def _kahn(n: int, parents: Sequence[Sequence[int]]) -> list[int] | None:
    indegree = [len(ps) for ps in parents]
    children: list[list[int]] = [[] for _ in range(n)]
    for c, ps in enumerate(parents):
        for p in ps:
            children[p].append(c)
    # min-heap on index gives the declaration-order tie break
    ready = [j for j in range(n) if indegree[j] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        j = heapq.heappop(ready)
        order.append(j)
        for c in children[j]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, c)
    return order if len(order) == n else None


def validate_dag(nodes: Sequence[NodeSpec | str], edges: Iterable[tuple[int | str, int | str]]) -> Dag:
    """Build a :class:`Dag`, checking names, edge endpoints, duplicates and acyclicity.

    ``nodes`` may mix :class:`NodeSpec` and bare names (continuous). Edge endpoints
    may be names or indices.
    """
    specs = tuple(nd if isinstance(nd, NodeSpec) else NodeSpec(nd) for nd in nodes)
    index: dict[str, int] = {}
    for i, spec in enumerate(specs):
        if spec.name in index:
            raise DuplicateNode(f"duplicate node {spec.name!r}")
        index[spec.name] = i

    def resolve(endpoint) -> int:
        if isinstance(endpoint, str):
            if endpoint not in index:
                raise DanglingEdge(f"edge endpoint {endpoint!r} is not a declared node")
            return index[endpoint]
        if not 0 <= int(endpoint) < len(specs):
            raise DanglingEdge(f"edge endpoint {endpoint} out of range")
        return int(endpoint)

    edge_list = []
    for p, c in edges:
        pi, ci = resolve(p), resolve(c)
        if pi == ci:
            raise CycleDetected([specs[pi].name])
        if (pi, ci) in edge_list:
            raise ValidationError(f"duplicate edge {specs[pi].name} -> {specs[ci].name}")
        edge_list.append((pi, ci))

    parents = tuple(tuple(sorted(p for p, c in edge_list if c == j)) for j in range(len(specs)))
    order = _kahn(len(specs), parents)
    if order is None:
        raise CycleDetected([specs[i].name for i in _find_cycle(len(specs), edge_list)])
    return Dag(specs, frozenset(edge_list), parents, tuple(order), index)


def topological_order(dag: Dag) -> list[int]:
    return list(dag.topological_order)


def parents(dag: Dag, node: int | str) -> set[int]:
    return set(dag.parents(node))


def parse_graph_file(text: str) -> Dag:
    """Parse the edge-list format into a validated :class:`Dag`."""
    specs: list[NodeSpec] = []
    declared: set[str] = set()
    edges: list[tuple[str, str]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" in line:
            lhs, _, rhs = line.partition("->")
            parent, child = lhs.strip(), rhs.strip()
            if not parent or not child or "->" in rhs:
                raise ParseError(line_no, f"malformed edge statement {raw.strip()!r}")
            for name in (parent, child):
                if name not in declared:
                    raise ParseError(line_no, f"node {name!r} used before declaration")
            edges.append((parent, child))
            continue
        tokens = line.split(None, 3)
        if tokens[0] != "node" or len(tokens) < 3:
            raise ParseError(line_no, f"expected 'node <name> <kind>' or '<parent> -> <child>', got {raw.strip()!r}")
        name, kind = tokens[1], tokens[2]
        if kind == CONTINUOUS:
            if len(tokens) > 3:
                raise ParseError(line_no, "continuous nodes take no category list")
            categories: tuple[str, ...] = ()
        elif kind == CATEGORICAL:
            if len(tokens) < 4:
                raise ParseError(line_no, f"categorical node {name!r} needs a category list")
            categories = tuple(c.strip() for c in tokens[3].split(","))
            if any(not c for c in categories):
                raise ParseError(line_no, "empty category label")
        else:
            raise ParseError(line_no, f"unknown kind {kind!r}")
        if name in declared:
            raise DuplicateNode(f"line {line_no}: duplicate node {name!r}")
        try:
            specs.append(NodeSpec(name, kind, categories))
        except ValidationError as exc:
            raise ParseError(line_no, str(exc)) from None
        declared.add(name)
    return validate_dag(specs, edges)


def render_graph(dag: Dag) -> str:
    """Inverse of :func:`parse_graph_file`."""
    lines = []
    for spec in dag.nodes:
        if spec.is_categorical:
            lines.append(f"node {spec.name} {spec.kind} {','.join(spec.categories)}")
        else:
            lines.append(f"node {spec.name} {spec.kind}")
    for p, c in sorted(dag.edges):
        lines.append(f"{dag.nodes[p].name} -> {dag.nodes[c].name}")
    return "\n".join(lines) + "\n"


def star_dag(n: int) -> Dag:
    """Independent inputs X1..X{n-1} all pointing at the target Xn."""
    names = [f"X{i}" for i in range(1, n + 1)]
    return validate_dag(names, [(names[i], names[-1]) for i in range(n - 1)])
