"""End-to-end attribution of a distribution change to per-node mechanism changes.

Two modes:

* ``joint_kl``: each node's contribution is the conditional KL divergence of its new
  mechanism from its old one, averaged over the new parents' distribution.  The
  contributions add up to the KL divergence between the joint distributions.
* ``marginal_functional``: Shapley values of the game
  ``nu(T) = psi(P^T_target) - psi(P^{}_target)`` over mechanism replacements, for a
  scalar functional ``psi`` of the target's marginal.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from mechshift import __version__
from mechshift._rng import derive_rng, derive_seed
from mechshift.detect import DetectionResult, detect_changes
from mechshift.divergence import DEFAULT_KNN_K, conditional_kl, kl_discrete, kl_gaussian, kl_knn
from mechshift.engine import (
    DEFAULT_N_DRAWS,
    HybridSampler,
    Scm,
    analytic_marginal_gaussian,
    ancestral_sample,
    can_enumerate,
    compose_hybrid,
    discrete_marginal,
    discrete_target_pmf,
    is_linear_gaussian,
)
from mechshift.errors import EmptySample, ValidationError
from mechshift.graph import Dag, NodeSpec
from mechshift.mechanisms import (
    DEFAULT_CPT_ALPHA,
    DEFAULT_K_REG,
    NEAREST_NEIGHBOR,
    default_family,
    fit_mechanism,
)
from mechshift.shapley import DEFAULT_EXACT_CAP, EXACT, PERMUTATION_SAMPLED, SetFunction, shapley
from mechshift.tabular import Table, pool

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
JOINT_KL = "joint_kl"
MARGINAL_FUNCTIONAL = "marginal_functional"
ROUTES = ("auto", "analytic", "enumeration", "monte_carlo")
FUNCTIONAL_KINDS = ("mean", "variance", "median", "quantile", "kl_to_old")


@dataclass(frozen=True)
class Functional:
    kind: str = "mean"
    q: float | None = None
    k: int = DEFAULT_KNN_K

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValidationError(f"unknown functional {self.kind!r}")
        if self.kind == "quantile" and not (self.q is not None and 0.0 < self.q < 1.0):
            raise ValidationError("quantile level must lie strictly inside (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "Functional":
        """``mean``, ``variance``, ``median``, ``quantile:Q`` or ``kl``."""
        text = text.strip()
        if text.startswith("quantile:"):
            try:
                q = float(text.split(":", 1)[1])
            except ValueError:
                raise ValidationError(f"bad quantile level in {text!r}") from None
            return cls("quantile", q)
        if text in ("kl", "kl_to_old"):
            return cls("kl_to_old")
        return cls(text)

    def label(self) -> str:
        if self.kind == "quantile":
            return f"quantile:{self.q:g}"
        return "kl" if self.kind == "kl_to_old" else self.kind


def category_values(spec: NodeSpec) -> np.ndarray:
    """Numeric value of each category: the label itself if all labels are numbers, else its position."""
    try:
        return np.array([float(c) for c in spec.categories])
    except ValueError:
        return np.arange(spec.n_categories, dtype=np.float64)


def estimate_functional(sample_column, psi: Functional | str) -> float:
    """Plug-in estimate of ``psi`` from a sample.

    Mean is the sample average, variance the unbiased sample variance, median and
    quantiles use linear interpolation between order statistics.
    """
    psi = Functional.parse(psi) if isinstance(psi, str) else psi
    x = np.asarray(sample_column, dtype=np.float64)
    if x.size == 0:
        raise EmptySample("cannot estimate a functional from an empty sample")
    if psi.kind == "mean":
        return math.fsum(x.tolist()) / x.size
    if psi.kind == "variance":
        if x.size < 2:
            raise EmptySample("variance needs at least two values")
        return float(np.var(x, ddof=1))
    if psi.kind == "median":
        return float(np.quantile(x, 0.5))
    if psi.kind == "quantile":
        return float(np.quantile(x, psi.q))
    raise ValidationError("kl_to_old compares two distributions; use attribute_marginal")


@dataclass(frozen=True)
class AttributionConfig:
    regressor: str = "linear"
    k_reg: int = DEFAULT_K_REG
    cpt_alpha: float = DEFAULT_CPT_ALPHA
    gating: bool = True
    alpha: float = 0.05
    n_permutations: int = 500
    shapley: str = EXACT
    shapley_permutations: int = 1000
    exact_cap: int = DEFAULT_EXACT_CAP
    n_draws: int = DEFAULT_N_DRAWS
    # "auto" picks closed form, then enumeration, then Monte Carlo
    marginal_route: str = "auto"
    knn_k: int = DEFAULT_KNN_K
    kl_reverse: bool = False
    parent_weighting: str = "data"
    bootstrap: int = 0
    level: float = 0.95
    bootstrap_method: str = "bca"
    jackknife_blocks: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.regressor not in ("linear", NEAREST_NEIGHBOR):
            raise ValidationError(f"unknown regressor {self.regressor!r}")
        if self.shapley not in (EXACT, PERMUTATION_SAMPLED):
            raise ValidationError(f"unknown Shapley method {self.shapley!r}")
        if self.marginal_route not in ROUTES:
            raise ValidationError(f"marginal_route must be one of {ROUTES}")
        if self.parent_weighting not in ("data", "model"):
            raise ValidationError("parent_weighting must be 'data' or 'model'")
        if self.bootstrap and self.bootstrap < 50:
            raise ValidationError("bootstrap needs at least 50 resamples")
        if not 0 < self.level < 1:
            raise ValidationError("confidence level must lie in (0, 1)")


@dataclass
class NodeAttribution:
    name: str
    phi: float
    ci: tuple[float, float, float] | None = None
    p_value: float | None = None
    gated: bool = False
    mechanism_family: str = ""


@dataclass
class AttributionReport:
    mode: str
    target: str | None
    total: float
    nodes: list[NodeAttribution]
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> NodeAttribution:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    @property
    def phi(self) -> dict[str, float]:
        return {n.name: n.phi for n in self.nodes}

    @property
    def efficiency_gap(self) -> float:
        return self.total - math.fsum(n.phi for n in self.nodes)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "target": self.target,
            "total": self.total,
            "nodes": [
                {
                    "name": n.name,
                    "phi": n.phi,
                    "ci": None if n.ci is None else list(n.ci),
                    "p_value": n.p_value,
                    "gated": n.gated,
                    "mechanism_family": n.mechanism_family,
                }
                for n in self.nodes
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttributionReport":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema version {data.get('schema_version')!r}")
        nodes = [
            NodeAttribution(
                d["name"], d["phi"], None if d["ci"] is None else tuple(d["ci"]), d["p_value"], d["gated"],
                d["mechanism_family"],
            )
            for d in data["nodes"]
        ]
        return cls(data["mode"], data["target"], data["total"], nodes, data["provenance"])


# --------------------------------------------------------------------------- fitting


def fit_models(
    old: Table, new: Table, dag: Dag, config: AttributionConfig, gated: Sequence[int] = ()
) -> tuple[Scm, Scm]:
    """Fit old and new models; gated nodes get one shared fit on the pooled sample."""
    gated = set(gated)
    pooled = pool(old, new) if gated else None
    fit_kw = dict(alpha=config.cpt_alpha, k_reg=config.k_reg)
    old_mechs, new_mechs = [], []
    for j in range(dag.n):
        family = default_family(dag, j, config.regressor)
        if j in gated:
            shared = fit_mechanism(pooled, dag, j, family, **fit_kw)
            old_mechs.append(shared)
            new_mechs.append(shared)
        else:
            old_mechs.append(fit_mechanism(old, dag, j, family, **fit_kw))
            new_mechs.append(fit_mechanism(new, dag, j, family, **fit_kw))
    return Scm(dag, tuple(old_mechs)), Scm(dag, tuple(new_mechs))


def _gate(old: Table, new: Table, dag: Dag, config: AttributionConfig, detection: DetectionResult | None):
    if not config.gating:
        return detection, []
    if detection is None:
        detection = detect_changes(old, new, dag, config.alpha, config.n_permutations, derive_seed(config.seed, "detect"))
    gated = [j for j, entry in enumerate(detection.nodes) if not entry.changed]
    return detection, gated


def _mechanism_audit(old_scm: Scm, new_scm: Scm) -> dict:
    return {
        s.name: {"old": old_scm.mechanisms[j].to_dict(), "new": new_scm.mechanisms[j].to_dict()}
        for j, s in enumerate(old_scm.dag.nodes)
    }


def _base_provenance(config: AttributionConfig) -> dict:
    cfg = asdict(config)
    cfg.pop("workers")  # parallelism never changes results
    return {"library_version": __version__, "config": cfg}


# --------------------------------------------------------------------------- joint mode


def joint_contributions(
    old_scm: Scm,
    new_scm: Scm,
    parent_rows: Table | None,
    config: AttributionConfig,
    gated: Sequence[int] = (),
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-node conditional KL (raw value, reported value, method)."""
    dag = old_scm.dag
    gated = set(gated)
    raw = np.zeros(dag.n)
    methods = []
    enumerate_parents = config.parent_weighting == "model" and can_enumerate(new_scm)
    if config.parent_weighting == "model" and not enumerate_parents:
        parent_rows = ancestral_sample(new_scm, config.n_draws, derive_seed(config.seed, "parent-rows"))
    for j in range(dag.n):
        if j in gated:
            methods.append("gated")
            continue
        parents = dag.parents(j)
        kw = dict(k=config.knn_k, seed=derive_seed(config.seed, "ckl", j), reverse=config.kl_reverse)
        if parents and enumerate_parents:
            pmf = discrete_marginal(new_scm, list(parents))
            configs = np.argwhere(np.ones(pmf.shape, bool))
            est = conditional_kl(new_scm.mechanisms[j], old_scm.mechanisms[j], configs, weights=pmf.ravel(), **kw)
        else:
            est = conditional_kl(new_scm.mechanisms[j], old_scm.mechanisms[j], parent_rows, **kw)
        raw[j] = est.value
        methods.append(est.method)
    return raw, np.maximum(raw, 0.0), methods


def attribute_joint_models(
    old_scm: Scm, new_scm: Scm, parent_rows: Table | None, config: AttributionConfig = AttributionConfig(),
    gated: Sequence[int] = (),
) -> AttributionReport:
    raw, reported, methods = joint_contributions(old_scm, new_scm, parent_rows, config, gated)
    dag = old_scm.dag
    nodes = [
        NodeAttribution(s.name, float(reported[j]), None, None, j in set(gated), new_scm.mechanisms[j].family)
        for j, s in enumerate(dag.nodes)
    ]
    prov = _base_provenance(config)
    prov.update(
        {
            "kl_direction": "old||new" if config.kl_reverse else "new||old",
            "kl_methods": dict(zip(dag.names, methods)),
            "kl_raw": dict(zip(dag.names, raw.tolist())),
            "clipped": [dag.names[j] for j in range(dag.n) if raw[j] < 0],
            "mechanisms": _mechanism_audit(old_scm, new_scm),
        }
    )
    return AttributionReport(JOINT_KL, None, math.fsum(reported.tolist()), nodes, prov)


def attribute_joint(
    old: Table, new: Table, dag: Dag, config: AttributionConfig = AttributionConfig(),
    detection: DetectionResult | None = None,
) -> AttributionReport:
    """Per-node conditional-KL contributions to the change in the joint distribution."""
    detection, gated = _gate(old, new, dag, config, detection)
    old_scm, new_scm = fit_models(old, new, dag, config, gated)
    report = attribute_joint_models(old_scm, new_scm, new, config, gated)
    _attach_detection(report, detection)
    if config.bootstrap:

        def statistic(o: Table, n: Table) -> np.ndarray:
            o_scm, n_scm = fit_models(o, n, dag, config, gated)
            return joint_contributions(o_scm, n_scm, n, config, gated)[1]

        _attach_intervals(report, statistic, old, new, config)
    return report


# --------------------------------------------------------------------------- marginal mode


def _psi_gaussian(mean: float, var: float, psi: Functional) -> float:
    if psi.kind == "mean" or psi.kind == "median":
        return mean
    if psi.kind == "variance":
        return var
    if psi.kind == "quantile":
        return mean + math.sqrt(var) * float(ndtri(psi.q))
    raise AssertionError(psi.kind)


def _psi_pmf(pmf: np.ndarray, values: np.ndarray, psi: Functional) -> float:
    if psi.kind == "mean":
        return math.fsum((pmf * values).tolist())
    raise ValidationError(f"functional {psi.kind} needs a continuous target")


class MarginalGame:
    """``T -> psi(P^T_target)`` for change sets ``T`` of node indices.

    The route is picked once: closed form for linear-Gaussian closures, exhaustive
    enumeration for small categorical closures, else Monte Carlo with common random
    numbers (``n_draws`` rows per change set).
    """

    def __init__(self, old_scm: Scm, new_scm: Scm, target, psi: Functional, n_draws: int = DEFAULT_N_DRAWS,
                 seed: int = 0, cpt_alpha: float = DEFAULT_CPT_ALPHA, route: str = "auto"):
        self.old, self.new, self.dag = old_scm, new_scm, old_scm.dag
        self.target = self.dag.index(target)
        self.spec = self.dag.nodes[self.target]
        self.psi = psi
        self.cpt_alpha = cpt_alpha
        if self.spec.is_categorical and psi.kind not in ("mean", "kl_to_old"):
            raise ValidationError(f"functional {psi.kind} needs a continuous target")
        analytic = is_linear_gaussian(old_scm, self.target) and is_linear_gaussian(new_scm, self.target)
        enumerable = can_enumerate(old_scm, self.target) and can_enumerate(new_scm, self.target)
        if route == "auto":
            route = "analytic" if analytic else "enumeration" if enumerable else "monte_carlo"
        elif (route == "analytic" and not analytic) or (route == "enumeration" and not enumerable):
            raise ValidationError(f"the {route} route does not apply to these models")
        self.route = route
        if route == "monte_carlo":
            self.sampler = HybridSampler(old_scm, new_scm, n_draws, seed)
            if psi.kind == "kl_to_old":
                # independent noise for the reference sample avoids cross-sample ties
                ref = HybridSampler(old_scm, old_scm, n_draws, derive_seed(seed, "kl-reference"))
                self.reference = ref.column(frozenset(), self.target)
        self.n_draws = n_draws
        self.seed = seed

    def _marginal(self, t: frozenset):
        if self.route == "analytic":
            return analytic_marginal_gaussian(compose_hybrid(self.old, self.new, t), self.target)
        if self.route == "enumeration":
            return discrete_target_pmf(compose_hybrid(self.old, self.new, t), self.target)
        return self.sampler.column(t, self.target)

    def psi_of(self, t) -> float:
        t = frozenset(t)
        marginal = self._marginal(t)
        if self.psi.kind == "kl_to_old":
            return self._kl_to_old(marginal)
        if self.route == "analytic":
            return _psi_gaussian(*marginal, self.psi)
        if self.route == "enumeration":
            return _psi_pmf(marginal, category_values(self.spec), self.psi)
        if self.spec.is_categorical:
            return estimate_functional(category_values(self.spec)[marginal], self.psi)
        return estimate_functional(marginal, self.psi)

    def _kl_to_old(self, marginal) -> float:
        if self.route == "analytic":
            return kl_gaussian(*marginal, *analytic_marginal_gaussian(self.old, self.target)).value
        if self.route == "enumeration":
            return kl_discrete(marginal, discrete_target_pmf(self.old, self.target)).value
        if self.spec.is_categorical:
            k = self.spec.n_categories
            a = self.cpt_alpha
            p = (np.bincount(marginal, minlength=k) + a) / (len(marginal) + a * k)
            q = (np.bincount(self.reference, minlength=k) + a) / (len(self.reference) + a * k)
            return kl_discrete(p, q).value
        return kl_knn(marginal, self.reference, k=self.psi.k, seed=self.seed).value


def attribute_marginal_models(
    old_scm: Scm,
    new_scm: Scm,
    target,
    psi: Functional | str = "mean",
    config: AttributionConfig = AttributionConfig(),
    players: Sequence[int] | None = None,
) -> AttributionReport:
    """Shapley attribution of ``psi(new target marginal) - psi(old target marginal)``.

    ``players`` restricts the game to those node indices (default all nodes); the
    rest keep their old mechanism in every coalition and get ``phi = 0``.
    """
    psi = Functional.parse(psi) if isinstance(psi, str) else psi
    dag = old_scm.dag
    players = list(range(dag.n)) if players is None else sorted(players)
    game = MarginalGame(old_scm, new_scm, target, psi, config.n_draws, derive_seed(config.seed, "mc"),
                        config.cpt_alpha, config.marginal_route)

    def evaluator(coalition: frozenset) -> float:
        return game.psi_of(frozenset(players[i] for i in coalition))

    sf = SetFunction(evaluator, len(players), config.workers)
    result = shapley(sf, len(players), config.shapley, config.shapley_permutations,
                     derive_seed(config.seed, "shapley"), config.exact_cap)
    phi = np.zeros(dag.n)
    phi[players] = result.values
    gated = set(range(dag.n)) - set(players)
    nodes = [
        NodeAttribution(s.name, float(phi[j]), None, None, j in gated, new_scm.mechanisms[j].family)
        for j, s in enumerate(dag.nodes)
    ]
    prov = _base_provenance(config)
    prov.update(
        {
            "functional": psi.label(),
            "marginal_route": game.route,
            "shapley_method": result.method,
            "shapley_evaluations": result.evaluations,
            "players": [dag.names[j] for j in players],
            "psi_old_model": game.psi_of(frozenset()),
            "mechanisms": _mechanism_audit(old_scm, new_scm),
        }
    )
    if result.method == PERMUTATION_SAMPLED:
        prov["shapley_permutations"] = result.n_permutations
        prov["shapley_std_errors"] = dict(zip([dag.names[j] for j in players], result.std_errors.tolist()))
        prov["shapley_raw_values"] = dict(zip([dag.names[j] for j in players], result.raw_values.tolist()))
        prov["efficiency_residual_raw"] = result.residual
    if game.route == "monte_carlo":
        prov["n_draws"] = config.n_draws
    return AttributionReport(MARGINAL_FUNCTIONAL, dag.names[dag.index(target)], result.grand_payoff, nodes, prov)


def data_delta(old: Table, new: Table, target: str, psi: Functional, k: int = DEFAULT_KNN_K) -> float:
    """The change of ``psi`` measured directly on the raw target columns."""
    spec = old.spec(target)
    if spec.is_categorical:
        values = category_values(spec)
        if psi.kind == "kl_to_old":
            n_cat = spec.n_categories
            p = (np.bincount(new[target], minlength=n_cat) + 1.0) / (new.m + n_cat)
            q = (np.bincount(old[target], minlength=n_cat) + 1.0) / (old.m + n_cat)
            return kl_discrete(p, q).value
        return estimate_functional(values[new[target]], psi) - estimate_functional(values[old[target]], psi)
    if psi.kind == "kl_to_old":
        return kl_knn(new[target], old[target], k=k).value
    return estimate_functional(new[target], psi) - estimate_functional(old[target], psi)


def attribute_marginal(
    old: Table,
    new: Table,
    dag: Dag,
    target: str,
    psi: Functional | str = "mean",
    config: AttributionConfig = AttributionConfig(),
    detection: DetectionResult | None = None,
) -> AttributionReport:
    """Fit, optionally gate on detected changes, and attribute the change of ``psi`` at ``target``."""
    psi = Functional.parse(psi) if isinstance(psi, str) else psi
    dag.index(target)
    detection, gated = _gate(old, new, dag, config, detection)
    players = [j for j in range(dag.n) if j not in set(gated)]
    old_scm, new_scm = fit_models(old, new, dag, config, gated)
    report = attribute_marginal_models(old_scm, new_scm, target, psi, config, players)
    _attach_detection(report, detection)
    try:
        report.provenance["delta_psi_data"] = data_delta(old, new, target, psi, config.knn_k)
    except Exception as exc:  # transparency figure only; never fatal
        logger.warning("could not compute raw-data delta: %s", exc)
        report.provenance["delta_psi_data"] = None
    if config.bootstrap:
        quiet = replace(config, bootstrap=0)

        def statistic(o: Table, n: Table) -> np.ndarray:
            o_scm, n_scm = fit_models(o, n, dag, quiet, gated)
            rep = attribute_marginal_models(o_scm, n_scm, target, psi, quiet, players)
            return np.array([nd.phi for nd in rep.nodes])

        _attach_intervals(report, statistic, old, new, config)
    return report


def _attach_detection(report: AttributionReport, detection: DetectionResult | None) -> None:
    if detection is None:
        report.provenance["detection"] = None
        return
    for node in report.nodes:
        node.p_value = detection[node.name].p_value
    report.provenance["detection"] = {
        "alpha": detection.alpha,
        "n_permutations": detection.n_permutations,
        "seed": detection.seed,
        "tests": {e.name: e.test for e in detection.nodes},
    }


def _attach_intervals(report, statistic, old, new, config: AttributionConfig) -> None:
    estimate = np.array([n.phi for n in report.nodes])
    lo, hi, reps = bootstrap_intervals(
        statistic, old, new, config.bootstrap, config.level, derive_seed(config.seed, "bootstrap"),
        method=config.bootstrap_method, estimate=estimate, jackknife_blocks=config.jackknife_blocks,
        workers=config.workers,
    )
    for j, node in enumerate(report.nodes):
        node.ci = (float(lo[j]), float(hi[j]), config.level)
    report.provenance["bootstrap"] = {
        "n_resamples": config.bootstrap,
        "method": config.bootstrap_method,
        "level": config.level,
        "replicate_mean": dict(zip([n.name for n in report.nodes], reps.mean(axis=0).tolist())),
    }


# --------------------------------------------------------------------------- bootstrap


def _resample(table: Table, rng: np.random.Generator) -> Table:
    return table.take(rng.integers(0, table.m, size=table.m))


def bootstrap_intervals(
    statistic: Callable[[Table, Table], np.ndarray],
    old: Table,
    new: Table,
    n_resamples: int,
    level: float = 0.95,
    seed: int = 0,
    *,
    method: str = "bca",
    estimate: np.ndarray | None = None,
    jackknife_blocks: int = 10,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-component bootstrap intervals for a two-sample statistic.

    Both tables are resampled with replacement, independently.  ``method="bca"``
    applies bias correction and a grouped-jackknife acceleration estimate; where
    either is undefined the interval falls back to plain percentiles.

    :returns: ``(lo, hi, replicates)`` with replicates of shape ``(n_resamples, k)``.
    """
    if n_resamples < 50:
        raise ValidationError("bootstrap needs at least 50 resamples")
    if method not in ("bca", "percentile"):
        raise ValidationError(f"unknown bootstrap method {method!r}")
    theta = np.asarray(statistic(old, new) if estimate is None else estimate, dtype=np.float64)

    def one(b: int) -> np.ndarray:
        rng = derive_rng(seed, "resample", b)
        return np.asarray(statistic(_resample(old, rng), _resample(new, rng)), dtype=np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            reps = np.array(list(ex.map(one, range(n_resamples))))
    else:
        reps = np.array([one(b) for b in range(n_resamples)])

    tail = (1.0 - level) / 2.0
    lo = np.quantile(reps, tail, axis=0)
    hi = np.quantile(reps, 1.0 - tail, axis=0)
    degenerate = np.ptp(reps, axis=0) <= 1e-12 * np.maximum(1.0, np.abs(theta))
    lo[degenerate] = hi[degenerate] = theta[degenerate]
    if method == "percentile" or degenerate.all():
        return lo, hi, reps

    accel = _jackknife_acceleration(statistic, old, new, jackknife_blocks, workers)
    z_lo, z_hi = ndtri(tail), ndtri(1.0 - tail)
    for j in np.flatnonzero(~degenerate):
        below = (np.sum(reps[:, j] < theta[j]) + 0.5 * np.sum(reps[:, j] == theta[j])) / n_resamples
        if not 0.0 < below < 1.0 or not np.isfinite(accel[j]):
            continue
        z0 = ndtri(below)
        q_lo = ndtr(z0 + (z0 + z_lo) / (1.0 - accel[j] * (z0 + z_lo)))
        q_hi = ndtr(z0 + (z0 + z_hi) / (1.0 - accel[j] * (z0 + z_hi)))
        if np.isfinite(q_lo) and np.isfinite(q_hi):
            lo[j], hi[j] = np.quantile(reps[:, j], [q_lo, q_hi])
    return lo, hi, reps


def _jackknife_acceleration(statistic, old: Table, new: Table, blocks: int, workers: int) -> np.ndarray:
    """Acceleration ``sum(d^3) / (6 sum(d^2)^1.5)`` from delete-one-block jackknife values.

    Each table is cut into ``blocks`` contiguous blocks; every block of either table
    is left out once.
    """
    jobs = []
    for which, table in (("old", old), ("new", new)):
        bounds = np.linspace(0, table.m, min(blocks, table.m) + 1).astype(np.int64)
        for g in range(len(bounds) - 1):
            keep = np.r_[0: bounds[g], bounds[g + 1]: table.m]
            jobs.append((which, keep))

    def one(job):
        which, keep = job
        if which == "old":
            return statistic(old.take(keep), new)
        return statistic(old, new.take(keep))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            values = np.array(list(ex.map(one, jobs)), dtype=np.float64)
    else:
        values = np.array([one(job) for job in jobs], dtype=np.float64)
    d = values.mean(axis=0) - values
    num = np.sum(d**3, axis=0)
    den = 6.0 * np.sum(d**2, axis=0) ** 1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, 0.0)
