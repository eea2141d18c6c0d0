"""Simulation harness on the star graph with known mean-shift ground truth.

Roots ``X_w ~ N(mu_w, 1)`` feed a sink ``X_n = X_1 + ... + X_{n-1} + N(mu_n, 1)``.
The new model adds ``lambda_w = lambda * S_w`` to node ``w`` with ``S_w ~ Bernoulli(p)``,
so the Shapley value of each node for the target mean is exactly ``lambda_w``.
Each cell reports the mean l1 distance between estimated and true attributions.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from mechshift._rng import derive_rng, derive_seed
from mechshift.attribution import AttributionConfig, attribute_marginal
from mechshift.errors import ValidationError
from mechshift.graph import Dag, star_dag
from mechshift.tabular import Table

LINEAR = "linear"
NEAREST_NEIGHBOR = "nearest_neighbor"
SIM_DEFAULT_N_DRAWS = 10_000


@dataclass(frozen=True)
class SimConfig:
    lambdas: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    # when set, every SCM pair draws its own lambda ~ U(lo, hi) and ``lambdas`` is ignored
    lambda_range: tuple[float, float] | None = None
    n_range: tuple[int, int] = (2, 5)
    mu_range: tuple[float, float] = (-5.0, 5.0)
    p_change: float = 0.5
    sample_sizes: tuple[int, ...] = (1000,)
    n_pairs: int = 20
    n_samples: int = 5
    regressors: tuple[str, ...] = (LINEAR,)
    n_draws: int = SIM_DEFAULT_N_DRAWS
    k_reg: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_change <= 1.0:
            raise ValidationError("p_change must lie in [0, 1]")
        if self.p_change == 0.0:
            raise ValidationError("p_change = 0: no mechanism can ever change")
        if self.lambda_range is None:
            if not self.lambdas:
                raise ValidationError("no lambda values given")
            if any(lam < 0 for lam in self.lambdas):
                raise ValidationError("lambda must be >= 0")
            if any(lam == 0 for lam in self.lambdas):
                raise ValidationError("lambda = 0 leaves every mechanism unchanged; at least one must change")
        else:
            lo, hi = self.lambda_range
            if not 0 < lo <= hi:
                raise ValidationError("lambda_range must satisfy 0 < lo <= hi")
        lo_n, hi_n = self.n_range
        if not 2 <= lo_n <= hi_n:
            raise ValidationError("n_range must satisfy 2 <= lo <= hi")
        if self.mu_range[0] > self.mu_range[1]:
            raise ValidationError("mu_range lower bound exceeds upper bound")
        if not self.sample_sizes or any(m < 1 for m in self.sample_sizes):
            raise ValidationError("sample sizes must be >= 1")
        if self.n_pairs < 1 or self.n_samples < 1 or self.n_draws < 1 or self.workers < 1:
            raise ValidationError("counts must be >= 1")
        for reg in self.regressors:
            if reg not in (LINEAR, NEAREST_NEIGHBOR):
                raise ValidationError(f"unknown regressor {reg!r}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "SimConfig":
        """Build from string values, e.g. parsed ``key=value`` lines; tuples are comma separated."""
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValidationError(f"unknown simulation setting {key!r}")
            kind = str(kinds[key])
            raw = raw.strip()
            try:
                if kind.startswith("tuple[str"):
                    parsed[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif kind.startswith("tuple[int"):
                    parsed[key] = tuple(int(s) for s in raw.split(","))
                elif "tuple[float" in kind:
                    parsed[key] = None if raw.lower() in ("", "none") else tuple(float(s) for s in raw.split(","))
                elif kind == "int":
                    parsed[key] = int(raw)
                else:
                    parsed[key] = float(raw)
            except ValueError:
                raise ValidationError(f"bad value for {key}: {raw!r}") from None
        return cls(**parsed)


def parse_sim_config(text: str) -> SimConfig:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {line_no}: expected key=value")
        key, raw = line.split("=", 1)
        values[key.strip()] = raw
    return SimConfig.from_mapping(values)


@dataclass(frozen=True)
class PairSpec:
    """One SCM pair: node count, noise means and per-node shifts."""

    n: int
    mu: np.ndarray
    shifts: np.ndarray

    @property
    def dag(self) -> Dag:
        return star_dag(self.n)


def draw_pair(config: SimConfig, pair: int, lam: float | None) -> PairSpec:
    """Draw ``n``, ``mu_w`` and ``S_w``, rejecting until at least one node changes.

    ``lam=None`` draws the magnitude from ``config.lambda_range``.  The draws for a
    given ``(seed, pair)`` do not depend on the cell, so cells are paired.
    """
    rng = derive_rng(config.seed, "pair", pair)
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    mu = rng.uniform(*config.mu_range, size=n)
    drawn_lam = rng.uniform(*config.lambda_range) if config.lambda_range is not None else None
    lam = drawn_lam if lam is None else lam
    while True:
        s = rng.random(n) < config.p_change
        if s.any():
            break
    return PairSpec(n, mu, lam * s.astype(np.float64))


def generate(spec: PairSpec, m: int, rng: np.random.Generator, shifted: bool) -> Table:
    noise = rng.standard_normal((m, spec.n)) + spec.mu
    if shifted:
        noise = noise + spec.shifts
    x = noise.copy()
    x[:, -1] = noise[:, :-1].sum(axis=1) + noise[:, -1]
    dag = spec.dag
    return Table.from_dict(dag, {name: x[:, j] for j, name in enumerate(dag.names)})


@dataclass(frozen=True)
class SimCell:
    regressor: str
    lam: float | None
    sample_size: int
    mean_l1: float
    std_error: float
    std: float
    n_trials: int


@dataclass
class SimResult:
    config: SimConfig
    cells: list[SimCell] = field(default_factory=list)

    def cell(self, regressor: str, lam: float | None = None, sample_size: int | None = None) -> SimCell:
        for c in self.cells:
            if c.regressor == regressor and (lam is None or c.lam == lam) and (
                sample_size is None or c.sample_size == sample_size
            ):
                return c
        raise KeyError((regressor, lam, sample_size))

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg.pop("workers")
        return {"config": cfg, "cells": [asdict(c) for c in self.cells]}


def run_trial(config: SimConfig, regressor: str, lam: float | None, m: int, pair: int, sample: int) -> float:
    """l1 distance between estimated and true attributions for one dataset pair."""
    spec = draw_pair(config, pair, lam)
    label = "U" if lam is None else repr(float(lam))
    rng = derive_rng(config.seed, "data", pair, sample, m, label)
    old = generate(spec, m, rng, shifted=False)
    new = generate(spec, m, rng, shifted=True)
    att = AttributionConfig(
        regressor=regressor,
        k_reg=config.k_reg,
        gating=False,
        n_draws=config.n_draws,
        seed=derive_seed(config.seed, "attr", pair, sample, m, label),
    )
    report = attribute_marginal(old, new, spec.dag, spec.dag.names[-1], "mean", att)
    phi = np.array([node.phi for node in report.nodes])
    return float(np.abs(phi - spec.shifts).sum())


def run_simulation(config: SimConfig) -> SimResult:
    """Every (regressor, lambda, sample size) cell over ``n_pairs * n_samples`` trials."""
    lams = [None] if config.lambda_range is not None else list(config.lambdas)
    cells = list(itertools.product(config.regressors, lams, config.sample_sizes))
    jobs = [
        (reg, lam, m, pair, sample)
        for reg, lam, m in cells
        for pair in range(config.n_pairs)
        for sample in range(config.n_samples)
    ]

    def one(job):
        return run_trial(config, *job)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            distances = list(ex.map(one, jobs))
    else:
        distances = [one(job) for job in jobs]

    per_cell = config.n_pairs * config.n_samples
    result = SimResult(config)
    for c, (reg, lam, m) in enumerate(cells):
        d = np.array(distances[c * per_cell: (c + 1) * per_cell])
        std = float(d.std(ddof=1)) if d.size > 1 else 0.0
        result.cells.append(
            SimCell(reg, lam, m, math.fsum(d.tolist()) / d.size, std / math.sqrt(d.size), std, int(d.size))
        )
    return result
