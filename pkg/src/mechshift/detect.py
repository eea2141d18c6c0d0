"""Per-node mechanism-change detection with the sample index as an extra variable.

For node X with parents PA the question is whether X is independent of the index A
given PA.  The statistic is the squared norm of the empirical cross-covariance
between kernel features of X and the index, both residualised on kernel features
of PA by ridge regression.  Its null distribution comes from permuting the index
residuals.  Roots reduce to a kernel two-sample (MMD-type) test.

Gaussian kernels are approximated with random Fourier features, bandwidth set by
the median heuristic on the pooled sample; categorical variables use the delta
kernel, whose feature map is an exact one-hot encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from mechshift._rng import derive_rng
from mechshift.errors import BandwidthDegenerate, EmptyTable
from mechshift.graph import Dag, NodeSpec
from mechshift.tabular import Table, concat_with_index

KERNEL_CI = "kernel_ci"
KERNEL_TWO_SAMPLE = "kernel_two_sample"
DEFAULT_ALPHA = 0.05
DEFAULT_N_PERMUTATIONS = 500
RIDGE_FACTOR = 1e-3
N_FEATURES_TARGET = 100
N_FEATURES_CONDITION = 200
_MEDIAN_SUBSAMPLE = 1000
_PERM_BATCH = 64


@dataclass(frozen=True)
class NodeTest:
    name: str
    p_value: float
    statistic: float
    test: str
    changed: bool


@dataclass(frozen=True)
class DetectionResult:
    alpha: float
    nodes: tuple[NodeTest, ...]
    n_permutations: int
    seed: int

    def __getitem__(self, name: str) -> NodeTest:
        for entry in self.nodes:
            if entry.name == name:
                return entry
        raise KeyError(name)

    @property
    def p_values(self) -> dict[str, float]:
        return {e.name: e.p_value for e in self.nodes}

    @property
    def flagged(self) -> list[str]:
        return [e.name for e in self.nodes if e.changed]


def median_bandwidth(x: np.ndarray) -> float:
    """Median pairwise Euclidean distance (on an evenly spaced subsample of rows)."""
    if len(x) > _MEDIAN_SUBSAMPLE:
        x = x[np.linspace(0, len(x) - 1, _MEDIAN_SUBSAMPLE).astype(np.int64)]
    dist = pdist(x)
    positive = dist[dist > 0]
    if positive.size == 0:
        raise BandwidthDegenerate("all pairwise distances are zero")
    median = float(np.median(dist))
    return median if median > 0 else float(np.median(positive))


def _fourier_features(x: np.ndarray, n_features: int, rng: np.random.Generator) -> np.ndarray:
    bandwidth = median_bandwidth(x)
    w = rng.standard_normal((x.shape[1], n_features)) / bandwidth
    b = rng.uniform(0.0, 2.0 * np.pi, n_features)
    return np.sqrt(2.0 / n_features) * np.cos(x @ w + b)


def _one_hot_joint(codes: np.ndarray, specs: list[NodeSpec]) -> np.ndarray:
    config = np.zeros(len(codes), dtype=np.int64)
    for i, spec in enumerate(specs):
        config = config * spec.n_categories + codes[:, i].astype(np.int64)
    levels, inverse = np.unique(config, return_inverse=True)
    out = np.zeros((len(codes), len(levels)))
    out[np.arange(len(codes)), inverse] = 1.0
    return out


def kernel_features(table: Table, names: list[str], n_features: int, rng: np.random.Generator) -> np.ndarray:
    """Feature map of the product delta kernel (categorical) plus a Gaussian kernel (continuous)."""
    specs = [table.spec(nm) for nm in names]
    cat = [s for s in specs if s.is_categorical]
    con = [s for s in specs if not s.is_categorical]
    blocks = []
    if cat:
        blocks.append(_one_hot_joint(table.matrix([s.name for s in cat]), cat))
    if con:
        blocks.append(_fourier_features(table.matrix([s.name for s in con]), n_features, rng))
    return np.hstack(blocks)


def _ridge_residual(features: np.ndarray, targets: np.ndarray, penalty: float) -> np.ndarray:
    gram = features.T @ features + penalty * np.eye(features.shape[1])
    return targets - features @ np.linalg.solve(gram, features.T @ targets)


def index_dependence_test(
    target: np.ndarray,
    index: np.ndarray,
    condition: np.ndarray | None,
    n_permutations: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Statistic and permutation p-value for ``target`` independent of ``index`` given ``condition``.

    ``target`` and ``condition`` are feature matrices; ``condition=None`` gives the
    unconditional two-sample version.
    """
    m = len(index)
    fx = target - target.mean(axis=0)
    a = index.astype(np.float64) - index.mean()
    if condition is not None and condition.shape[1]:
        fz = condition - condition.mean(axis=0)
        penalty = RIDGE_FACTOR * m
        fx = _ridge_residual(fz, fx, penalty)
        a = _ridge_residual(fz, a[:, None], penalty)[:, 0]
    observed = float(np.sum((fx.T @ a) ** 2)) / m**2
    exceed = 0
    done = 0
    while done < n_permutations:
        batch = min(_PERM_BATCH, n_permutations - done)
        perm = np.stack([a[rng.permutation(m)] for _ in range(batch)], axis=1)
        stats = np.sum((fx.T @ perm) ** 2, axis=0) / m**2
        exceed += int(np.sum(stats >= observed))
        done += batch
    return observed, (1 + exceed) / (n_permutations + 1)


def _canonical(table: Table) -> Table:
    # row order within a sample carries no information; sort it away
    if table.m == 0:
        return table
    keys = [table.columns[nm] for nm in reversed(table.names)]
    return table.take(np.lexsort(keys))


def detect_changes(
    old: Table,
    new: Table,
    dag: Dag,
    alpha: float = DEFAULT_ALPHA,
    n_permutations: int = DEFAULT_N_PERMUTATIONS,
    seed: int = 0,
) -> DetectionResult:
    """Test every node's mechanism for a change between ``old`` and ``new``.

    A node is flagged when its p-value is below ``alpha``.
    """
    if old.m == 0 or new.m == 0:
        raise EmptyTable("both samples must be nonempty")
    indexed = concat_with_index(_canonical(old), _canonical(new))
    pooled = indexed.table
    results = []
    for j, spec in enumerate(dag.nodes):
        rng = derive_rng(seed, "detect", j)
        fx = kernel_features(pooled, [spec.name], N_FEATURES_TARGET, rng)
        parent_names = [dag.nodes[p].name for p in dag.parents(j)]
        fz = kernel_features(pooled, parent_names, N_FEATURES_CONDITION, rng) if parent_names else None
        stat, p_value = index_dependence_test(fx, indexed.index, fz, n_permutations, rng)
        results.append(
            NodeTest(spec.name, p_value, stat, KERNEL_CI if parent_names else KERNEL_TWO_SAMPLE, p_value < alpha)
        )
    return DetectionResult(alpha, tuple(results), n_permutations, seed)
