"""Structural causal models, hybrid composition and marginal computation.

Three routes to the marginal of a node under a hybrid model:

* closed form when every mechanism on the ancestral closure is Gaussian/affine,
* exhaustive enumeration when the model is fully discrete and small,
* ancestral Monte-Carlo sampling with common random numbers otherwise.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from mechshift._rng import derive_rng, open_uniform
from mechshift.errors import GraphMismatch, IncompatibleFamily, NonLinearGaussianModel, ValidationError
from mechshift.graph import Dag
from mechshift.mechanisms import (
    DiscreteCpt,
    UnseenParentWarning,
    EmpiricalCategoricalMarginal,
    GaussianMarginal,
    LinearGaussianConditional,
    Mechanism,
)
from mechshift.tabular import Table

DEFAULT_N_DRAWS = 100_000
MAX_ENUMERATION_CELLS = 2**12


@dataclass(frozen=True, eq=False)
class Scm:
    dag: Dag
    mechanisms: tuple[Mechanism, ...]

    def __post_init__(self):
        mechs = tuple(self.mechanisms)
        object.__setattr__(self, "mechanisms", mechs)
        if len(mechs) != self.dag.n:
            raise ValidationError(f"need {self.dag.n} mechanisms, got {len(mechs)}")
        for j, mech in enumerate(mechs):
            spec = self.dag.nodes[j]
            expected = tuple(self.dag.nodes[p] for p in self.dag.parents(j))
            if mech.child != spec or mech.parent_specs != expected:
                raise IncompatibleFamily(f"mechanism for {spec.name} does not match its node/parents")

    def __getitem__(self, node) -> Mechanism:
        return self.mechanisms[self.dag.index(node)]

    @property
    def families(self) -> list[str]:
        return [m.family for m in self.mechanisms]


@dataclass(frozen=True)
class ChangeSet:
    members: frozenset[int]

    @classmethod
    def of(cls, members: Iterable[int], n: int | None = None) -> "ChangeSet":
        members = frozenset(int(j) for j in members)
        if n is not None and any(not 0 <= j < n for j in members):
            raise ValidationError(f"change set {sorted(members)} outside 0..{n - 1}")
        return cls(members)

    def __contains__(self, j) -> bool:
        return j in self.members


def fit_scm(table: Table, dag: Dag, families=None, **fit_kwargs) -> Scm:
    from mechshift.mechanisms import fit_mechanism

    families = families or [None] * dag.n
    return Scm(dag, tuple(fit_mechanism(table, dag, j, families[j], **fit_kwargs) for j in range(dag.n)))


def compose_hybrid(old: Scm, new: Scm, t) -> Scm:
    """New mechanisms on the change set, old ones everywhere else."""
    if old.dag != new.dag:
        raise GraphMismatch("old and new models have different graphs")
    members = t.members if isinstance(t, ChangeSet) else frozenset(t)
    ChangeSet.of(members, old.dag.n)
    mechs = tuple(new.mechanisms[j] if j in members else old.mechanisms[j] for j in range(old.dag.n))
    return Scm(old.dag, mechs)


def _noise(seed: int, j: int, n_draws: int) -> np.ndarray:
    # keyed on node index only, so every change set sees the same stream
    return open_uniform(derive_rng(seed, "node-noise", j), n_draws)


def ancestral_sample(scm: Scm, n_draws: int, seed: int) -> Table:
    """Draw ``n_draws`` joint rows in topological order; deterministic in ``seed``."""
    if n_draws < 1:
        raise ValidationError("n_draws must be >= 1")
    dag = scm.dag
    cols: dict[int, np.ndarray] = {}
    for j in dag.topological_order:
        parents = dag.parents(j)
        pv = np.column_stack([cols[p] for p in parents]) if parents else np.empty((n_draws, 0))
        cols[j] = scm.mechanisms[j].draw(pv, _noise(seed, j, n_draws))
    return Table(dag.nodes, {dag.nodes[j].name: cols[j] for j in range(dag.n)})


class HybridSampler:
    """Monte-Carlo marginals of hybrid models with common random numbers.

    A node's column under change set T depends only on T restricted to the node and
    its ancestors, so columns are cached on that key and shared across change sets.
    """

    def __init__(self, old: Scm, new: Scm, n_draws: int = DEFAULT_N_DRAWS, seed: int = 0):
        if old.dag != new.dag:
            raise GraphMismatch("old and new models have different graphs")
        self.old, self.new, self.dag = old, new, old.dag
        self.n_draws, self.seed = int(n_draws), int(seed)
        self._closure = [self.dag.ancestors(j) | {j} for j in range(self.dag.n)]
        self._noise: dict[int, np.ndarray] = {}
        self._cache: dict[tuple[int, frozenset], np.ndarray] = {}
        self._lock = threading.Lock()

    def noise(self, j: int) -> np.ndarray:
        with self._lock:
            if j not in self._noise:
                self._noise[j] = _noise(self.seed, j, self.n_draws)
            return self._noise[j]

    def column(self, t, node) -> np.ndarray:
        j = self.dag.index(node)
        members = frozenset(t.members if isinstance(t, ChangeSet) else t)
        key = (j, members & self._closure[j])
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        parents = self.dag.parents(j)
        pv = np.column_stack([self.column(members, p) for p in parents]) if parents else np.empty((self.n_draws, 0))
        mech = self.new.mechanisms[j] if j in members else self.old.mechanisms[j]
        values = mech.draw(pv, self.noise(j))
        values.setflags(write=False)
        with self._lock:
            self._cache.setdefault(key, values)
        return values

    def sample(self, t) -> Table:
        return Table(self.dag.nodes, {s.name: self.column(t, i) for i, s in enumerate(self.dag.nodes)})


def is_linear_gaussian(scm: Scm, target=None) -> bool:
    nodes = range(scm.dag.n) if target is None else scm.dag.ancestors(target) | {scm.dag.index(target)}
    for j in nodes:
        mech = scm.mechanisms[j]
        if isinstance(mech, GaussianMarginal):
            continue
        if isinstance(mech, LinearGaussianConditional) and mech.is_affine:
            continue
        return False
    return True


def analytic_marginal_gaussian(scm: Scm, target) -> tuple[float, float]:
    """Exact (mean, variance) of ``target`` by propagating affine-Gaussian moments."""
    dag = scm.dag
    k = dag.index(target)
    if not is_linear_gaussian(scm, k):
        raise NonLinearGaussianModel(f"ancestral closure of {dag.nodes[k].name} is not linear-Gaussian")
    nodes = [j for j in dag.topological_order if j in dag.ancestors(k) | {k}]
    pos = {j: i for i, j in enumerate(nodes)}
    mean = np.zeros(len(nodes))
    cov = np.zeros((len(nodes), len(nodes)))
    for j in nodes:
        i = pos[j]
        mech = scm.mechanisms[j]
        if isinstance(mech, GaussianMarginal):
            mean[i] = mech.mean
            cov[i, i] = mech.var
            continue
        idx = [pos[p] for p in dag.parents(j)]
        w = mech.weights
        mean[i] = mech.intercept + w @ mean[idx]
        cross = cov[:, idx] @ w
        cov[i, :] = cross
        cov[:, i] = cross
        cov[i, i] = w @ cov[np.ix_(idx, idx)] @ w + mech.noise_var
    i = pos[k]
    return float(mean[i]), float(cov[i, i])


def is_discrete(scm: Scm) -> bool:
    return all(isinstance(m, (EmpiricalCategoricalMarginal, DiscreteCpt)) for m in scm.mechanisms)


def enumeration_size(dag: Dag) -> int:
    return int(np.prod([s.n_categories for s in dag.nodes]))


def enumerate_joint(scm: Scm) -> tuple[np.ndarray, np.ndarray]:
    """All joint configurations (rows of category codes) and their probabilities."""
    if not is_discrete(scm):
        raise IncompatibleFamily("exhaustive enumeration needs fully categorical mechanisms")
    dag = scm.dag
    cards = [s.n_categories for s in dag.nodes]
    configs = np.array(list(itertools.product(*[range(c) for c in cards])), dtype=np.int64)
    logp = np.zeros(len(configs))
    for j in range(dag.n):
        probs = _quiet_pmf(scm.mechanisms[j], configs[:, list(dag.parents(j))])
        with np.errstate(divide="ignore"):
            logp += np.log(probs[np.arange(len(configs)), configs[:, j]])
    return configs, np.exp(logp)


def _quiet_pmf(mech, parent_codes: np.ndarray) -> np.ndarray:
    # enumeration visits every configuration, seen or not; their weight handles the rest
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnseenParentWarning)
        return mech.pmf(parent_codes.astype(np.float64))


def discrete_marginal(scm: Scm, nodes) -> np.ndarray:
    """Exact joint pmf of ``nodes`` (a node or list of nodes) as an array indexed by codes."""
    single = isinstance(nodes, (int, str))
    idx = [scm.dag.index(nodes)] if single else [scm.dag.index(v) for v in nodes]
    configs, probs = enumerate_joint(scm)
    shape = [scm.dag.nodes[i].n_categories for i in idx]
    out = np.zeros(shape)
    np.add.at(out, tuple(configs[:, i] for i in idx), probs)
    return out


def discrete_target_pmf(scm: Scm, target) -> np.ndarray:
    """Marginal pmf of a categorical target by summing out its ancestors only."""
    dag = scm.dag
    k = dag.index(target)
    closure = sorted(dag.ancestors(k) | {k})
    for j in closure:
        if not isinstance(scm.mechanisms[j], (EmpiricalCategoricalMarginal, DiscreteCpt)):
            raise IncompatibleFamily("enumeration needs categorical mechanisms on the ancestral closure")
    cards = [dag.nodes[j].n_categories for j in closure]
    pos = {j: i for i, j in enumerate(closure)}
    configs = np.array(list(itertools.product(*[range(c) for c in cards])), dtype=np.int64)
    logp = np.zeros(len(configs))
    for j in closure:
        probs = _quiet_pmf(scm.mechanisms[j], configs[:, [pos[p] for p in dag.parents(j)]])
        with np.errstate(divide="ignore"):
            logp += np.log(probs[np.arange(len(configs)), configs[:, pos[j]]])
    out = np.zeros(dag.nodes[k].n_categories)
    np.add.at(out, configs[:, pos[k]], np.exp(logp))
    return out


def can_enumerate(scm: Scm, target=None) -> bool:
    dag = scm.dag
    nodes = range(dag.n) if target is None else sorted(dag.ancestors(target) | {dag.index(target)})
    if not all(isinstance(scm.mechanisms[j], (EmpiricalCategoricalMarginal, DiscreteCpt)) for j in nodes):
        return False
    return int(np.prod([dag.nodes[j].n_categories for j in nodes])) <= MAX_ENUMERATION_CELLS
