"""Shapley values of set functions: exact subset enumeration and permutation sampling.

Coalitions are bitmasks over players ``0..n-1``.  Evaluators receive a
``frozenset`` of player indices.
"""

from __future__ import annotations

import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np

from mechshift._rng import derive_rng
from mechshift.errors import TooManyPlayers

EXACT = "exact"
PERMUTATION_SAMPLED = "permutation_sampled"
DEFAULT_EXACT_CAP = 12


def _members(mask: int) -> frozenset[int]:
    out = []
    j = 0
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return frozenset(out)


class SetFunction:
    """Memoised payoff ``nu(T) - nu(empty)`` over coalitions of ``n`` players.

    The evaluator is assumed pure; every coalition is evaluated at most once, which
    keeps Monte-Carlo payoffs coherent across the marginal contributions that share it.
    """

    def __init__(self, evaluator: Callable[[frozenset], float], n: int, workers: int = 1):
        self.evaluator = evaluator
        self.n = int(n)
        self.workers = max(1, int(workers))
        self._memo: dict[int, float] = {}
        self._lock = threading.Lock()
        self._offset = float(evaluator(frozenset()))
        self._memo[0] = 0.0

    @property
    def evaluations(self) -> int:
        return len(self._memo)

    def __call__(self, coalition) -> float:
        if isinstance(coalition, (int, np.integer)):
            mask = int(coalition)
        else:
            mask = 0
            for j in coalition:
                mask |= 1 << int(j)
        with self._lock:
            if mask in self._memo:
                return self._memo[mask]
        value = float(self.evaluator(_members(mask))) - self._offset
        with self._lock:
            return self._memo.setdefault(mask, value)

    def evaluate_many(self, masks) -> np.ndarray:
        masks = list(masks)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return np.array(list(pool.map(self, masks)))
        return np.array([self(mk) for mk in masks])


def _as_set_function(nu, n: int) -> SetFunction:
    if isinstance(nu, SetFunction):
        if nu.n != n:
            raise ValueError(f"set function has {nu.n} players, expected {n}")
        return nu
    return SetFunction(nu, n)


@dataclass
class ShapleyResult:
    values: np.ndarray
    method: str
    evaluations: int
    grand_payoff: float
    n_permutations: int | None = None
    std_errors: np.ndarray | None = None
    raw_values: np.ndarray | None = None
    residual: float = 0.0
    extras: dict = field(default_factory=dict)


def exact_shapley(nu, n: int, exact_cap: int = DEFAULT_EXACT_CAP) -> ShapleyResult:
    """``phi_j = sum_{T not containing j} (nu(T + j) - nu(T)) / (n * C(n-1, |T|))``.

    All ``2**n`` coalitions are evaluated once, then reduced in a fixed order.
    """
    if n > exact_cap:
        raise TooManyPlayers(f"{n} players exceeds the exact cap of {exact_cap}; use sampled_shapley")
    if n == 0:
        return ShapleyResult(np.zeros(0), EXACT, 1, 0.0)
    sf = _as_set_function(nu, n)
    masks = np.arange(2**n, dtype=np.int64)
    payoff = sf.evaluate_many(masks.tolist())
    sizes = np.array([bin(mk).count("1") for mk in range(2**n)])
    weight_by_size = np.array([1.0 / (n * comb(n - 1, s)) for s in range(n)])
    phi = np.zeros(n)
    for j in range(n):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[j] = np.sum(weight_by_size[sizes[without]] * (payoff[without | bit] - payoff[without]))
    return ShapleyResult(phi, EXACT, sf.evaluations, float(payoff[-1]))


def sampled_shapley(nu, n: int, n_permutations: int, seed: int = 0) -> ShapleyResult:
    """Average marginal contributions over uniformly drawn player orderings.

    Returns efficiency-normalised values; the raw averages and the residual
    ``nu(N) - sum(raw)`` are kept on the result.  Standard errors are the
    across-permutation standard deviation over ``sqrt(n_permutations)``.
    """
    if n_permutations < 2:
        raise ValueError("n_permutations must be at least 2")
    sf = _as_set_function(nu, n)
    rng = derive_rng(seed, "shapley-permutations")
    perms = np.array([rng.permutation(n) for _ in range(n_permutations)])
    prefix_masks = np.zeros((n_permutations, n + 1), dtype=np.int64)
    for pos in range(n):
        prefix_masks[:, pos + 1] = prefix_masks[:, pos] | (np.int64(1) << perms[:, pos])
    unique = np.unique(prefix_masks)
    payoff = dict(zip(unique.tolist(), sf.evaluate_many(unique.tolist()).tolist()))
    contrib = np.zeros((n_permutations, n))
    for r in range(n_permutations):
        vals = [payoff[mk] for mk in prefix_masks[r].tolist()]
        contrib[r, perms[r]] = np.diff(vals)
    raw = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations)
    grand = sf((1 << n) - 1)
    residual = grand - float(raw.sum())
    share = se / se.sum() if se.sum() > 0 else np.full(n, 1.0 / n)
    values = raw + residual * share
    return ShapleyResult(
        values, PERMUTATION_SAMPLED, sf.evaluations, grand, n_permutations, se, raw, residual
    )


def shapley(nu, n: int, method: str = EXACT, n_permutations: int = 1000, seed: int = 0,
            exact_cap: int = DEFAULT_EXACT_CAP) -> ShapleyResult:
    """Dispatch helper; falls back to sampling (with a warning) above the exact cap."""
    if method == EXACT and n > exact_cap:
        warnings.warn(f"{n} players exceeds exact cap {exact_cap}; using permutation sampling", stacklevel=2)
        method = PERMUTATION_SAMPLED
    if method == EXACT:
        return exact_shapley(nu, n, exact_cap)
    return sampled_shapley(nu, n, n_permutations, seed)
