"""Tabular samples: CSV ingestion, schema checks, pooling and the +1/-1 index column."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from mechshift.errors import EmptyTable, MissingColumn, SchemaMismatch, TypeMismatch, UnknownNode
from mechshift.graph import Dag, NodeSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Table:
    """Column store keyed by node name.

    Continuous columns are ``float64``; categorical columns hold integer codes into
    ``spec.categories`` (use :meth:`labels` to get the strings back).
    """

    specs: tuple[NodeSpec, ...]
    columns: Mapping[str, np.ndarray]
    dropped: int = 0
    _by_name: dict = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        by_name = {s.name: s for s in self.specs}
        if set(by_name) != set(self.columns):
            raise SchemaMismatch("columns do not match schema")
        lengths = {len(self.columns[s.name]) for s in self.specs}
        if len(lengths) > 1:
            raise SchemaMismatch(f"unequal column lengths {sorted(lengths)}")
        cols = {}
        for s in self.specs:
            col = np.asarray(self.columns[s.name])
            if s.is_categorical:
                col = col.astype(np.int64)
                if col.size and (col.min() < 0 or col.max() >= s.n_categories):
                    raise TypeMismatch(f"column {s.name}: category code out of range")
            else:
                col = col.astype(np.float64)
            col.setflags(write=False)
            cols[s.name] = col
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "_by_name", by_name)

    @property
    def m(self) -> int:
        return len(self.columns[self.specs[0].name]) if self.specs else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def schema(self) -> list[tuple[str, str]]:
        return [(s.name, s.kind) for s in self.specs]

    def spec(self, name: str) -> NodeSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownNode(f"no column {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        self.spec(name)
        return self.columns[name]

    def labels(self, name: str) -> np.ndarray:
        spec = self.spec(name)
        if not spec.is_categorical:
            return self.columns[name]
        return np.asarray(spec.categories, dtype=object)[self.columns[name]]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack the named columns into an ``(m, len(names))`` float array."""
        if not names:
            return np.empty((self.m, 0))
        return np.column_stack([self.columns[nm].astype(np.float64) for nm in names])

    def take(self, rows) -> "Table":
        rows = np.asarray(rows)
        return Table(self.specs, {nm: col[rows] for nm, col in self.columns.items()})

    def equals(self, other: "Table") -> bool:
        return (
            self.specs == other.specs
            and self.m == other.m
            and all(np.array_equal(self.columns[n], other.columns[n]) for n in self.names)
        )

    @classmethod
    def from_dict(cls, dag_or_specs, data: Mapping[str, Sequence]) -> "Table":
        """Build from raw values; categorical entries may be labels or integer codes."""
        specs = dag_or_specs.nodes if isinstance(dag_or_specs, Dag) else tuple(dag_or_specs)
        cols = {}
        for s in specs:
            if s.name not in data:
                raise MissingColumn(f"missing column {s.name!r}")
            raw = np.asarray(data[s.name])
            if s.is_categorical and raw.dtype.kind in "OUS":
                lookup = {c: i for i, c in enumerate(s.categories)}
                try:
                    raw = np.array([lookup[str(v)] for v in raw], dtype=np.int64)
                except KeyError as exc:
                    raise TypeMismatch(f"column {s.name}: undeclared category {exc.args[0]!r}") from None
            cols[s.name] = raw
        return cls(specs, cols)


@dataclass(frozen=True, eq=False)
class IndexedTable:
    table: Table
    index: np.ndarray

    @property
    def m(self) -> int:
        return self.table.m


def load_csv(path: str | Path, dag: Dag) -> Table:
    """Read a header-first CSV and match its columns to the DAG nodes by name.

    Extra columns are ignored, rows with any empty cell in a node column are dropped
    (count kept in ``Table.dropped``).
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding="utf-8")
    frame.columns = [c.strip() for c in frame.columns]
    missing = [nm for nm in dag.names if nm not in frame.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
    extra = [c for c in frame.columns if c not in dag.names]
    if extra:
        logger.warning("%s: ignoring extra column(s) %s", path, ", ".join(extra))
    frame = frame[dag.names].apply(lambda col: col.str.strip())
    complete = (frame != "").all(axis=1).to_numpy()
    dropped = int((~complete).sum())
    if dropped:
        logger.warning("%s: dropped %d row(s) with missing values", path, dropped)
    frame = frame[complete]
    if len(frame) == 0:
        raise EmptyTable(f"{path}: no usable rows")

    cols = {}
    for spec in dag.nodes:
        raw = frame[spec.name].to_numpy()
        if spec.is_categorical:
            lookup = {c: i for i, c in enumerate(spec.categories)}
            unknown = sorted(set(raw) - set(lookup))
            if unknown:
                raise TypeMismatch(f"{path}: column {spec.name} has undeclared categories {unknown[:5]}")
            cols[spec.name] = np.fromiter((lookup[v] for v in raw), dtype=np.int64, count=len(raw))
        else:
            cols[spec.name] = _parse_floats(raw, f"{path}: continuous column {spec.name}")
    return Table(dag.nodes, cols, dropped=dropped)


def _parse_floats(raw: np.ndarray, where: str) -> np.ndarray:
    # numpy's conversion is correctly rounded, so written floats read back bit-exact
    try:
        values = raw.astype(np.float64)
    except ValueError:
        for v in raw:
            try:
                float(v)
            except ValueError:
                raise TypeMismatch(f"{where}: non-numeric value {v!r}") from None
        raise
    if not np.isfinite(values).all():
        raise TypeMismatch(f"{where}: non-finite value {raw[~np.isfinite(values)][0]!r}")
    return values


def write_csv(table: Table, path: str | Path) -> None:
    frame = pd.DataFrame({nm: table.labels(nm) for nm in table.names})
    frame.to_csv(path, index=False, float_format="%.17g")


def _check_schema(old: Table, new: Table) -> None:
    if old.specs != new.specs:
        raise SchemaMismatch(f"schemas differ: {old.schema} vs {new.schema}")


def pool(old: Table, new: Table) -> Table:
    """Vertical concatenation, old rows first."""
    _check_schema(old, new)
    return Table(old.specs, {nm: np.concatenate([old.columns[nm], new.columns[nm]]) for nm in old.names})


def concat_with_index(old: Table, new: Table) -> IndexedTable:
    """Pool both tables and attach the sample index: +1 for old rows, -1 for new rows."""
    pooled = pool(old, new)
    index = np.concatenate([np.ones(old.m, dtype=np.int64), -np.ones(new.m, dtype=np.int64)])
    index.setflags(write=False)
    return IndexedTable(pooled, index)
