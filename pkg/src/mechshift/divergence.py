"""Kullback-Leibler divergences: Gaussian closed form, exact discrete, k-NN estimate,
and the parent-averaged conditional KL used for per-node joint-change contributions.

All divergences are in nats and read ``D(p || q)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from mechshift._rng import derive_rng, open_uniform
from mechshift.errors import (
    AbsoluteContinuityViolation,
    IncompatibleMechanisms,
    LengthMismatch,
    NonPositiveVariance,
    TooFewPoints,
    ZeroDistance,
)
from mechshift.mechanisms import (
    DiscreteCpt,
    EmpiricalCategoricalMarginal,
    GaussianMarginal,
    LinearGaussianConditional,
    Mechanism,
)
from mechshift.tabular import Table

GAUSSIAN_CLOSED_FORM = "gaussian_closed_form"
DISCRETE_EXACT = "discrete_exact"
KNN = "knn"
DEFAULT_KNN_K = 5
_JITTER = 1e-10


class DuplicatePointsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KlEstimate:
    value: float
    method: str
    k: int | None = None

    @property
    def reported(self) -> float:
        """Value clipped at zero; only k-NN estimates can go negative."""
        return max(self.value, 0.0)

    def __float__(self) -> float:
        return float(self.value)


def _fsum_mean(values: np.ndarray, weights: np.ndarray | None = None) -> float:
    values = np.asarray(values, dtype=np.float64)
    if weights is None:
        return math.fsum(values.tolist()) / len(values)
    weights = np.asarray(weights, dtype=np.float64)
    return math.fsum((values * weights).tolist()) / math.fsum(weights.tolist())


def _gaussian_pointwise(mu1, var1, mu0, var0) -> np.ndarray:
    return 0.5 * np.log(var0 / var1) + (var1 + (mu1 - mu0) ** 2) / (2.0 * var0) - 0.5


def kl_gaussian(mu1: float, var1: float, mu0: float, var0: float) -> KlEstimate:
    """``D(N(mu1, var1) || N(mu0, var0))``."""
    if not (var1 > 0 and var0 > 0):
        raise NonPositiveVariance("variances must be positive")
    value = float(_gaussian_pointwise(mu1, var1, mu0, var0))
    # exact zero for identical parameters, no rounding residue
    return KlEstimate(max(value, 0.0), GAUSSIAN_CLOSED_FORM)


def _discrete_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if p.shape != q.shape:
        raise LengthMismatch(f"length mismatch {p.shape} vs {q.shape}")
    if np.any((p > 0) & (q <= 0)):
        raise AbsoluteContinuityViolation("p puts mass where q has none")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return np.maximum(np.array([math.fsum(row) for row in np.atleast_2d(terms).tolist()]), 0.0)


def kl_discrete(p, q) -> KlEstimate:
    """``sum_i p_i log(p_i / q_i)`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"length mismatch {p.shape} vs {q.shape}")
    for name, vec in (("p", p), ("q", q)):
        if vec.min() < 0 or abs(vec.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    return KlEstimate(float(_discrete_rows(p.ravel(), q.ravel())[0]), DISCRETE_EXACT)


def _as_points(sample) -> np.ndarray:
    arr = np.asarray(sample, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr


def _knn_terms(p: np.ndarray, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    rho = cKDTree(p).query(p, k=k + 1)[0][:, -1]
    nu = cKDTree(q).query(p, k=k)[0]
    nu = nu[:, -1] if nu.ndim == 2 else nu
    return rho, nu


def kl_knn(sample_p, sample_q, k: int = DEFAULT_KNN_K, seed: int = 0) -> KlEstimate:
    """k-nearest-neighbour estimate of ``D(P || Q)`` from i.i.d. samples (Euclidean metric).

    Within- or cross-sample duplicate points are broken by a tiny uniform jitter
    (with a warning); passing the very same sample twice raises :class:`ZeroDistance`.
    """
    p, q = _as_points(sample_p), _as_points(sample_q)
    if p.shape[1] != q.shape[1]:
        raise LengthMismatch(f"dimension mismatch {p.shape[1]} vs {q.shape[1]}")
    n, m = len(p), len(q)
    if k < 1 or n <= k or m <= k:
        raise TooFewPoints(f"need more than k={k} points in each sample (got {n}, {m})")
    if p.shape == q.shape and np.array_equal(p, q):
        raise ZeroDistance("identical samples: every point has a zero-distance twin")
    rho, nu = _knn_terms(p, q, k)
    if np.any(rho <= 0) or np.any(nu <= 0):
        warnings.warn("duplicate points in k-NN KL estimate; jittering", DuplicatePointsWarning, stacklevel=2)
        rng = derive_rng(seed, "knn-jitter")
        scale = np.maximum(np.abs(np.vstack([p, q])).max(axis=0), 1.0) * _JITTER
        p = p + rng.uniform(-1, 1, p.shape) * scale
        q = q + rng.uniform(-1, 1, q.shape) * scale
        rho, nu = _knn_terms(p, q, k)
        if np.any(rho <= 0) or np.any(nu <= 0):
            raise ZeroDistance("zero nearest-neighbour distance persists after jitter")
    d = p.shape[1]
    value = d * _fsum_mean(np.log(nu / rho)) + math.log(m / (n - 1))
    return KlEstimate(float(value), KNN, k)


def _parent_matrix(mech: Mechanism, parent_table) -> np.ndarray:
    if isinstance(parent_table, Table):
        return parent_table.matrix([s.name for s in mech.parent_specs])
    arr = np.asarray(parent_table, dtype=np.float64)
    return arr.reshape(len(arr), -1) if arr.ndim == 1 else arr


def conditional_kl(
    new_mech: Mechanism,
    old_mech: Mechanism,
    parent_table=None,
    *,
    weights=None,
    k: int = DEFAULT_KNN_K,
    seed: int = 0,
    reverse: bool = False,
) -> KlEstimate:
    """Average over parent rows of ``D(new(.|pa) || old(.|pa))``.

    ``parent_table`` holds parent values drawn from the new joint distribution (a
    :class:`Table` or an ``(m, p)`` array); ``weights`` turns the average into a
    weighted one, e.g. exact parent probabilities from enumeration.  Root nodes
    ignore it and compare marginals.  ``reverse=True`` computes ``D(old || new)``
    under the same parent weighting.
    """
    if new_mech.child != old_mech.child or new_mech.parent_specs != old_mech.parent_specs:
        raise IncompatibleMechanisms("mechanisms belong to different nodes or parent sets")
    if reverse:
        new_mech, old_mech = old_mech, new_mech

    if isinstance(new_mech, GaussianMarginal) and isinstance(old_mech, GaussianMarginal):
        return kl_gaussian(new_mech.mean, new_mech.var, old_mech.mean, old_mech.var)
    if isinstance(new_mech, EmpiricalCategoricalMarginal) and isinstance(old_mech, EmpiricalCategoricalMarginal):
        return kl_discrete(new_mech.probs, old_mech.probs)

    if parent_table is None:
        raise IncompatibleMechanisms("non-root conditional KL needs parent rows")
    pa = _parent_matrix(new_mech, parent_table)
    if len(pa) == 0:
        raise TooFewPoints("empty parent table")

    if isinstance(new_mech, LinearGaussianConditional) and isinstance(old_mech, LinearGaussianConditional):
        pointwise = _gaussian_pointwise(
            new_mech.conditional_mean(pa), new_mech.noise_var, old_mech.conditional_mean(pa), old_mech.noise_var
        )
        return KlEstimate(max(_fsum_mean(pointwise, weights), 0.0), GAUSSIAN_CLOSED_FORM)
    if isinstance(new_mech, DiscreteCpt) and isinstance(old_mech, DiscreteCpt):
        rows = _discrete_rows(new_mech.pmf(pa), old_mech.pmf(pa))
        return KlEstimate(max(_fsum_mean(rows, weights), 0.0), DISCRETE_EXACT)
    if new_mech.child.is_categorical:
        raise IncompatibleMechanisms(f"no KL route for {new_mech.family} vs {old_mech.family}")

    # sample-based: D(P~pa P~x|pa || P~pa Px|pa) equals the parent-averaged conditional KL
    if weights is not None:
        raise IncompatibleMechanisms("weighted parents are not supported by the sample-based route")
    # disjoint parent halves keep the two samples independent
    half = len(pa) // 2
    pa_new, pa_old = pa[:half], pa[half:]
    x_new = new_mech.draw(pa_new, open_uniform(derive_rng(seed, "ckl-new"), len(pa_new)))
    x_old = old_mech.draw(pa_old, open_uniform(derive_rng(seed, "ckl-old"), len(pa_old)))
    joint_new = np.column_stack([pa_new, x_new])
    joint_old = np.column_stack([pa_old, x_old])
    scale = np.vstack([joint_new, joint_old]).std(axis=0)
    scale[scale <= 0] = 1.0
    return kl_knn(joint_new / scale, joint_old / scale, k=k, seed=seed)
