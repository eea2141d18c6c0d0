"""Per-node causal mechanisms: fitting, sampling and conditional densities.

Every mechanism turns parent values plus one uniform draw per row into a child
value (inverse-CDF style).  Feeding the same uniforms to two different mechanisms
of the same node is what gives the engine its common random numbers.

Parent values are passed as an ``(m, p)`` float array with columns in the DAG's
parent order; categorical parents are integer codes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtri

from mechshift._rng import open_uniform
from mechshift.errors import IncompatibleFamily, InsufficientData, UnsupportedFamily
from mechshift.graph import Dag, NodeSpec
from mechshift.tabular import Table

VARIANCE_FLOOR = 1e-9
RIDGE_PENALTY = 1e-8
DEFAULT_K_REG = 10
DEFAULT_CPT_ALPHA = 1.0
_LOG_2PI = float(np.log(2.0 * np.pi))

GAUSSIAN = "gaussian"
CATEGORICAL = "categorical"
LINEAR_GAUSSIAN = "linear_gaussian"
CPT = "cpt"
NEAREST_NEIGHBOR = "nearest_neighbor"
FAMILIES = (GAUSSIAN, CATEGORICAL, LINEAR_GAUSSIAN, CPT, NEAREST_NEIGHBOR)


class UnseenParentWarning(UserWarning):
    """A CPT was queried at a parent configuration absent from its training data."""


class SingularDesignWarning(UserWarning):
    """Collinear parents; the least-squares fit fell back to a tiny ridge penalty."""


def _as_parent_matrix(parent_values, p: int) -> np.ndarray:
    arr = np.asarray(parent_values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, p) if p else arr.reshape(-1, 0)
    if arr.shape[1] != p:
        raise ValueError(f"expected {p} parent column(s), got {arr.shape[1]}")
    return arr


def design_matrix(parent_values: np.ndarray, parent_specs: tuple[NodeSpec, ...]) -> np.ndarray:
    """Continuous parents pass through; categorical parents are one-hot encoded (first level dropped)."""
    blocks = []
    for i, spec in enumerate(parent_specs):
        col = parent_values[:, i]
        if spec.is_categorical:
            codes = col.astype(np.int64)
            blocks.append((codes[:, None] == np.arange(1, spec.n_categories)[None, :]).astype(np.float64))
        else:
            blocks.append(col[:, None])
    if not blocks:
        return np.empty((parent_values.shape[0], 0))
    return np.hstack(blocks)


def _categorical_draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    if cum.ndim == 1:
        cum = np.broadcast_to(cum, (len(u), len(cum)))
    codes = (u[:, None] > cum).sum(axis=1)
    return np.minimum(codes, cum.shape[1] - 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Mechanism:
    family: ClassVar[str] = ""
    child: NodeSpec
    parent_specs: tuple[NodeSpec, ...]

    @property
    def n_parents(self) -> int:
        return len(self.parent_specs)

    def draw(self, parent_values: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Map parent rows and uniforms in (0, 1) to child values."""
        raise NotImplementedError

    def log_density(self, values, parent_values) -> np.ndarray:
        raise UnsupportedFamily(f"{self.family} has no closed-form density")

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"family": self.family, "parents": [s.name for s in self.parent_specs], **self.params()}


@dataclass(frozen=True, eq=False)
class GaussianMarginal(Mechanism):
    family: ClassVar[str] = GAUSSIAN
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("variance must be positive")

    def draw(self, parent_values, u):
        return self.mean + np.sqrt(self.var) * ndtri(u)

    def log_density(self, values, parent_values=None):
        values = np.asarray(values, dtype=np.float64)
        return -0.5 * (_LOG_2PI + np.log(self.var) + (values - self.mean) ** 2 / self.var)

    def params(self):
        return {"mean": float(self.mean), "var": float(self.var)}


@dataclass(frozen=True, eq=False)
class EmpiricalCategoricalMarginal(Mechanism):
    family: ClassVar[str] = CATEGORICAL
    probs: np.ndarray = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (self.child.n_categories,) or probs.min() < 0 or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("invalid probability vector")
        object.__setattr__(self, "probs", probs)

    def pmf(self, parent_values) -> np.ndarray:
        m = np.asarray(parent_values).shape[0] if parent_values is not None else 1
        return np.broadcast_to(self.probs, (m, len(self.probs)))

    def draw(self, parent_values, u):
        return _categorical_draw(self.probs, u)

    def log_density(self, values, parent_values=None):
        with np.errstate(divide="ignore"):
            return np.log(self.probs[np.asarray(values, dtype=np.int64)])

    def params(self):
        return {"probs": self.probs.tolist()}


@dataclass(frozen=True, eq=False)
class LinearGaussianConditional(Mechanism):
    family: ClassVar[str] = LINEAR_GAUSSIAN
    weights: np.ndarray = None
    intercept: float = 0.0
    noise_var: float = 1.0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        width = sum(s.n_categories - 1 if s.is_categorical else 1 for s in self.parent_specs)
        if w.shape != (width,):
            raise ValueError(f"expected {width} weight(s), got {w.shape}")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def is_affine(self) -> bool:
        return not any(s.is_categorical for s in self.parent_specs)

    def conditional_mean(self, parent_values) -> np.ndarray:
        x = design_matrix(_as_parent_matrix(parent_values, self.n_parents), self.parent_specs)
        return self.intercept + x @ self.weights

    def draw(self, parent_values, u):
        return self.conditional_mean(parent_values) + np.sqrt(self.noise_var) * ndtri(u)

    def log_density(self, values, parent_values):
        resid = np.asarray(values, dtype=np.float64) - self.conditional_mean(parent_values)
        return -0.5 * (_LOG_2PI + np.log(self.noise_var) + resid**2 / self.noise_var)

    def params(self):
        return {"weights": self.weights.tolist(), "intercept": float(self.intercept), "noise_var": float(self.noise_var)}


@dataclass(frozen=True, eq=False)
class DiscreteCpt(Mechanism):
    """Conditional probability table over the joint configuration of categorical parents.

    Rows for parent configurations never seen during fitting hold the child's
    marginal distribution; hitting one raises :class:`UnseenParentWarning`.
    """

    family: ClassVar[str] = CPT
    table: np.ndarray = None
    seen: np.ndarray = None
    alpha: float = DEFAULT_CPT_ALPHA

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        n_configs = int(np.prod([s.n_categories for s in self.parent_specs]))
        if table.shape != (n_configs, self.child.n_categories):
            raise ValueError(f"CPT shape {table.shape} does not match parents/child")
        if table.min() < 0 or np.abs(table.sum(axis=1) - 1).max() > 1e-12:
            raise ValueError("CPT rows must be probability vectors")
        seen = np.ones(n_configs, bool) if self.seen is None else np.asarray(self.seen, bool)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "seen", seen)

    def config_index(self, parent_values) -> np.ndarray:
        codes = _as_parent_matrix(parent_values, self.n_parents).astype(np.int64)
        idx = np.zeros(codes.shape[0], dtype=np.int64)
        for i, spec in enumerate(self.parent_specs):
            idx = idx * spec.n_categories + codes[:, i]
        return idx

    def pmf(self, parent_values) -> np.ndarray:
        idx = self.config_index(parent_values)
        if not self.seen[idx].all():
            warnings.warn(
                f"{self.child.name}: parent configuration unseen during fitting; using the marginal",
                UnseenParentWarning,
                stacklevel=3,
            )
        return self.table[idx]

    def draw(self, parent_values, u):
        return _categorical_draw(self.pmf(parent_values), u)

    def log_density(self, values, parent_values):
        probs = self.pmf(parent_values)
        with np.errstate(divide="ignore"):
            return np.log(probs[np.arange(len(probs)), np.asarray(values, dtype=np.int64)])

    def params(self):
        return {"alpha": float(self.alpha), "table": self.table.tolist(), "seen": self.seen.astype(int).tolist()}


@dataclass(frozen=True, eq=False)
class NearestNeighborConditional(Mechanism):
    """k-NN regression for a continuous child plus resampled training residuals as noise."""

    family: ClassVar[str] = NEAREST_NEIGHBOR
    train_x: np.ndarray = None
    train_y: np.ndarray = None
    k: int = DEFAULT_K_REG
    _scale: np.ndarray = field(default=None, repr=False)
    _tree: cKDTree = field(default=None, repr=False)
    _residuals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.train_x, dtype=np.float64)
        y = np.asarray(self.train_y, dtype=np.float64)
        scale = x.std(axis=0)
        scale[scale <= 0] = 1.0
        object.__setattr__(self, "train_x", x)
        object.__setattr__(self, "train_y", y)
        object.__setattr__(self, "_scale", scale)
        object.__setattr__(self, "_tree", cKDTree(x / scale))
        object.__setattr__(self, "_residuals", y - self._predict_design(x))

    def _predict_design(self, x: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(x / self._scale, k=self.k)
        idx = idx.reshape(len(x), -1)
        return self.train_y[idx].mean(axis=1)

    def conditional_mean(self, parent_values) -> np.ndarray:
        x = design_matrix(_as_parent_matrix(parent_values, self.n_parents), self.parent_specs)
        return self._predict_design(x)

    @property
    def residuals(self) -> np.ndarray:
        return self._residuals

    def draw(self, parent_values, u):
        picks = np.minimum((u * len(self._residuals)).astype(np.int64), len(self._residuals) - 1)
        return self.conditional_mean(parent_values) + self._residuals[picks]

    def params(self):
        return {"k": int(self.k), "n_train": int(len(self.train_y)), "residual_var": float(self._residuals.var())}


def sample(model: Mechanism, parent_values, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Vectorised draw: one child value per parent row (or ``size`` draws for roots)."""
    if model.n_parents:
        parent_values = _as_parent_matrix(parent_values, model.n_parents)
        size = parent_values.shape[0]
    else:
        size = 1 if size is None else size
        parent_values = np.empty((size, 0))
    return model.draw(parent_values, open_uniform(rng, size))


def sample_one(model: Mechanism, parent_values, rng: np.random.Generator):
    parents = np.asarray(parent_values, dtype=np.float64).reshape(1, model.n_parents)
    value = model.draw(parents, open_uniform(rng, 1))[0]
    return int(value) if model.child.is_categorical else float(value)


def log_density(model: Mechanism, value, parent_values=()) -> float:
    parents = np.asarray(parent_values, dtype=np.float64).reshape(1, model.n_parents)
    return float(model.log_density(np.atleast_1d(value), parents)[0])


def _fit_ols(x: np.ndarray, y: np.ndarray, var_floor: float) -> tuple[np.ndarray, float, float]:
    m, p = x.shape
    if m - p - 1 <= 0:
        raise InsufficientData(f"need more than {p + 1} rows for {p} regressor(s), got {m}")
    x_mean, y_mean = x.mean(axis=0), y.mean()
    xc, yc = x - x_mean, y - y_mean
    if p:
        if np.linalg.matrix_rank(xc) < p:
            warnings.warn("collinear parents; using ridge fallback", SingularDesignWarning, stacklevel=3)
            w = np.linalg.solve(xc.T @ xc + RIDGE_PENALTY * np.eye(p), xc.T @ yc)
        else:
            w = np.linalg.lstsq(xc, yc, rcond=None)[0]
    else:
        w = np.zeros(0)
    resid = yc - xc @ w
    noise_var = max(float(resid @ resid) / (m - p - 1), var_floor)
    return w, float(y_mean - x_mean @ w), noise_var


def default_family(dag: Dag, node: int | str, regressor: str = "linear") -> str:
    spec = dag.spec(node)
    root = dag.is_root(node)
    if spec.is_categorical:
        return CATEGORICAL if root else CPT
    if root:
        return GAUSSIAN
    return NEAREST_NEIGHBOR if regressor == NEAREST_NEIGHBOR else LINEAR_GAUSSIAN


def fit_mechanism(
    table: Table,
    dag: Dag,
    node: int | str,
    family: str | None = None,
    *,
    alpha: float = DEFAULT_CPT_ALPHA,
    k_reg: int = DEFAULT_K_REG,
    var_floor: float = VARIANCE_FLOOR,
) -> Mechanism:
    """Fit the mechanism of ``node`` from ``table``.

    :param family: one of ``gaussian``, ``categorical``, ``linear_gaussian``, ``cpt``,
        ``nearest_neighbor``; ``None`` picks the default for the node's kind and parents.
    :param alpha: Laplace pseudo-count for categorical families.
    :param k_reg: neighbour count of the nearest-neighbour regressor.
    """
    j = dag.index(node)
    spec = dag.nodes[j]
    parent_specs = tuple(dag.nodes[p] for p in dag.parents(j))
    family = family or default_family(dag, j)
    if family not in FAMILIES:
        raise IncompatibleFamily(f"unknown family {family!r}")
    y = table[spec.name]
    m = len(y)
    x_raw = table.matrix([s.name for s in parent_specs])

    if spec.is_categorical:
        if family not in (CATEGORICAL, CPT):
            raise IncompatibleFamily(f"{spec.name} is categorical; {family} needs a continuous child")
        if m < 1:
            raise InsufficientData(f"{spec.name}: no rows")
        k = spec.n_categories
        counts = np.bincount(y, minlength=k).astype(np.float64)
        marginal = (counts + alpha) / (counts.sum() + alpha * k)
        if family == CATEGORICAL:
            if parent_specs:
                raise IncompatibleFamily(f"{spec.name} has parents; use {CPT}")
            return EmpiricalCategoricalMarginal(spec, (), marginal)
        if any(not s.is_categorical for s in parent_specs):
            raise IncompatibleFamily(f"{spec.name}: continuous parents of a categorical child are not supported")
        cards = [s.n_categories for s in parent_specs]
        config = np.zeros(m, dtype=np.int64)
        for i, card in enumerate(cards):
            config = config * card + x_raw[:, i].astype(np.int64)
        n_configs = int(np.prod(cards))
        cell = np.zeros((n_configs, k))
        np.add.at(cell, (config, y), 1.0)
        totals = cell.sum(axis=1)
        seen = totals > 0
        cpt = np.tile(marginal, (n_configs, 1))
        cpt[seen] = (cell[seen] + alpha) / (totals[seen, None] + alpha * k)
        return DiscreteCpt(spec, parent_specs, cpt, seen, alpha)

    if family in (CATEGORICAL, CPT):
        raise IncompatibleFamily(f"{spec.name} is continuous; {family} needs a categorical child")
    if family == GAUSSIAN:
        if parent_specs:
            raise IncompatibleFamily(f"{spec.name} has parents; {GAUSSIAN} is for roots")
        if m < 2:
            raise InsufficientData(f"{spec.name}: need at least 2 rows")
        return GaussianMarginal(spec, (), float(y.mean()), max(float(y.var(ddof=1)), var_floor))
    if not parent_specs:
        raise IncompatibleFamily(f"{spec.name} is a root; use {GAUSSIAN}")
    x = design_matrix(x_raw, parent_specs)
    if family == LINEAR_GAUSSIAN:
        w, b, noise_var = _fit_ols(x, y, var_floor)
        return LinearGaussianConditional(spec, parent_specs, w, b, noise_var)
    if m <= k_reg:
        raise InsufficientData(f"{spec.name}: nearest-neighbour fit needs more than {k_reg} rows")
    return NearestNeighborConditional(spec, parent_specs, x, y, k_reg)
