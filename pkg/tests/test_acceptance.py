"""Acceptance criteria, one test each, printing a PASS/FAIL line with the measured numbers.

Run alone with ``pytest tests/test_acceptance.py -s``.  The optional census check
runs only when ``MECHSHIFT_CENSUS_GRAPH``, ``MECHSHIFT_CENSUS_OLD`` and
``MECHSHIFT_CENSUS_NEW`` point at a graph file and the two CSV samples.
"""

import os
import time

import numpy as np
import pytest
from conftest import random_chain_scm, record_criterion, star_scm

from mechshift.attribution import AttributionConfig, attribute_marginal, attribute_marginal_models
from mechshift.cli import main
from mechshift.detect import detect_changes
from mechshift.divergence import conditional_kl, kl_discrete, kl_knn
from mechshift.engine import ancestral_sample, discrete_marginal, enumerate_joint
from mechshift.graph import parse_graph_file, render_graph, validate_dag
from mechshift.shapley import exact_shapley, sampled_shapley
from mechshift.simulate import SimConfig, draw_pair, run_simulation
from mechshift.tabular import Table, load_csv, write_csv


def _table_game(values):
    return lambda t: float(values[sum(1 << j for j in t)])


def test_criterion_1_shapley_axioms():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = dict(efficiency=0.0, null=0.0, symmetry=0.0, additivity=0.0)
    for _ in range(200):
        n = int(rng.integers(2, 9))
        masks = np.arange(2**n)
        base = rng.normal(size=2**n)
        # player 0 null; players 1 and 2 interchangeable when n >= 3
        values = base[masks & ~1]
        if n >= 3:
            values = values + values[masks ^ (((masks >> 1) & 1) ^ ((masks >> 2) & 1)) * 0b110]
        other = rng.normal(size=2**n)
        phi = exact_shapley(_table_game(values), n).values
        phi_other = exact_shapley(_table_game(other), n).values
        phi_sum = exact_shapley(_table_game(values + other), n).values
        worst["efficiency"] = max(worst["efficiency"], abs(phi.sum() - (values[-1] - values[0])))
        worst["null"] = max(worst["null"], abs(phi[0]))
        if n >= 3:
            worst["symmetry"] = max(worst["symmetry"], abs(phi[1] - phi[2]))
        worst["additivity"] = max(worst["additivity"], np.abs(phi_sum - phi - phi_other).max())
    elapsed = time.perf_counter() - start
    passed = (
        worst["efficiency"] < 1e-9
        and worst["null"] < 1e-12
        and worst["symmetry"] < 1e-9
        and worst["additivity"] < 1e-9
        and elapsed < 10
    )
    detail = ", ".join(f"max {k} err {v:.1e}" for k, v in worst.items())
    assert record_criterion(1, "Shapley axioms on 200 random games", passed, detail, elapsed)


def test_criterion_2_sampled_matches_exact():
    start = time.perf_counter()
    worst_z = 0.0
    misses = 0
    for game in range(20):
        rng = np.random.default_rng(game)
        # supermodular: square of an additive game with positive weights
        w = rng.uniform(0, 1, 10)
        nu = lambda t, w=w: float(sum(w[j] for j in t) ** 2)
        exact = exact_shapley(nu, 10).values
        res = sampled_shapley(nu, 10, 2000, seed=game)
        z = np.abs(res.values - exact) / res.std_errors
        worst_z = max(worst_z, float(z.max()))
        misses += int(np.sum(z > 3))
    elapsed = time.perf_counter() - start
    passed = misses == 0 and elapsed < 30
    detail = f"players outside 3 SE: {misses}/200, max |error|/SE {worst_z:.2f}"
    assert record_criterion(2, "sampled vs exact Shapley, 20 games n=10", passed, detail, elapsed)


def test_criterion_3_kl_decomposition():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        old = random_chain_scm(rng)
        new = random_chain_scm(rng, old.dag)
        total = 0.0
        for j in range(old.dag.n):
            parents = list(old.dag.parents(j))
            if parents:
                pmf = discrete_marginal(new, parents)
                rows = np.argwhere(np.ones(pmf.shape, bool))
                total += conditional_kl(new.mechanisms[j], old.mechanisms[j], rows, weights=pmf.ravel()).value
            else:
                total += conditional_kl(new.mechanisms[j], old.mechanisms[j]).value
        _, p_new = enumerate_joint(new)
        _, p_old = enumerate_joint(old)
        worst = max(worst, abs(total - kl_discrete(p_new, p_old).value))
    elapsed = time.perf_counter() - start
    passed = worst < 1e-10 and elapsed < 5
    assert record_criterion(3, "KL decomposition on 50 discrete chains", passed, f"max error {worst:.1e}", elapsed)


def test_criterion_4_ground_truth_attribution():
    start = time.perf_counter()
    worst = 0.0
    config = SimConfig(seed=99)
    routes = set()
    for trial in range(100):
        lam = float(np.random.default_rng(trial).uniform(0.5, 5.0))
        spec = draw_pair(config, trial, lam)
        old, new = star_scm(spec.mu), star_scm(spec.mu, spec.shifts)
        report = attribute_marginal_models(old, new, spec.dag.names[-1], "mean")
        routes.add(report.provenance["marginal_route"])
        worst = max(worst, np.abs(np.array([n.phi for n in report.nodes]) - spec.shifts).max())
    elapsed = time.perf_counter() - start
    passed = worst < 1e-9 and routes == {"analytic"} and elapsed < 10
    detail = f"max |phi - lambda| {worst:.1e}, route {sorted(routes)}"
    assert record_criterion(4, "exact recovery with true linear-Gaussian mechanisms", passed, detail, elapsed)


def test_criterion_5_strength_sweep():
    start = time.perf_counter()
    linear = run_simulation(SimConfig(lambdas=(1.0, 2.0, 3.0, 4.0, 5.0), sample_sizes=(1000,), seed=5))
    flexible = run_simulation(
        SimConfig(lambdas=(5.0,), sample_sizes=(1000,), regressors=("nearest_neighbor",), seed=5)
    )
    elapsed = time.perf_counter() - start
    means = {c.lam: c.mean_l1 for c in linear.cells}
    nn5 = flexible.cell("nearest_neighbor", 5.0).mean_l1
    passed = all(v < 0.5 for v in means.values()) and nn5 > means[5.0] and elapsed < 600
    detail = "linear mean l1 " + ", ".join(f"lam={k:g}: {v:.3f}" for k, v in means.items())
    detail += f"; nearest-neighbor at lam=5: {nn5:.3f}"
    assert record_criterion(5, "l1 vs change magnitude, 20 pairs x 5 samples", passed, detail, elapsed)


def test_criterion_6_sample_size_sweep():
    start = time.perf_counter()
    result = run_simulation(
        SimConfig(
            lambda_range=(1.0, 5.0),
            sample_sizes=(500, 4000),
            regressors=("linear", "nearest_neighbor"),
            seed=6,
        )
    )
    elapsed = time.perf_counter() - start
    lin500 = result.cell("linear", sample_size=500)
    nn500 = result.cell("nearest_neighbor", sample_size=500).mean_l1
    nn4000 = result.cell("nearest_neighbor", sample_size=4000).mean_l1
    passed = 0.05 <= lin500.mean_l1 <= 0.60 and nn4000 < nn500 and elapsed < 600
    detail = (
        f"linear@500 mean l1 {lin500.mean_l1:.3f} (sd {lin500.std:.3f}, se {lin500.std_error:.3f}); "
        f"linear@4000 {result.cell('linear', sample_size=4000).mean_l1:.3f}; "
        f"nearest-neighbor@500 {nn500:.3f} -> @4000 {nn4000:.3f}"
    )
    assert record_criterion(6, "l1 vs sample size, lambda ~ U(1,5)", passed, detail, elapsed)


def test_criterion_7_knn_kl():
    start = time.perf_counter()
    estimates = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        estimates.append(kl_knn(rng.normal(1, 1, 5000), rng.normal(0, 1, 5000), k=5).value)
    elapsed = time.perf_counter() - start
    mean = float(np.mean(estimates))
    passed = abs(mean - 0.5) <= 0.15 and elapsed < 30
    detail = f"mean estimate {mean:.4f} (oracle 0.5), range [{min(estimates):.3f}, {max(estimates):.3f}]"
    assert record_criterion(7, "k-NN KL on N(1,1) vs N(0,1), 20 seeds", passed, detail, elapsed)


def _example_sample(m, rng, cubic):
    dag = validate_dag(["X1", "X2"], [("X1", "X2")])
    x1 = rng.normal(size=m)
    x2 = (x1**3 if cubic else 2 * x1) + rng.normal(size=m)
    return dag, Table.from_dict(dag, {"X1": x1, "X2": x2})


def test_criterion_8_detection_calibration_and_power():
    start = time.perf_counter()
    null_flags = np.zeros(2)
    for run in range(200):
        rng = np.random.default_rng(10_000 + run)
        dag, old = _example_sample(1000, rng, False)
        _, new = _example_sample(1000, rng, False)
        res = detect_changes(old, new, dag, alpha=0.05, seed=run)
        null_flags += [e.changed for e in res.nodes]
    power = 0
    for run in range(50):
        rng = np.random.default_rng(20_000 + run)
        dag, old = _example_sample(1000, rng, False)
        _, new = _example_sample(1000, rng, True)
        power += detect_changes(old, new, dag, alpha=0.05, seed=run)["X2"].changed
    elapsed = time.perf_counter() - start
    rates = null_flags / 200
    passed = rates.max() <= 0.10 and power / 50 >= 0.90 and elapsed < 900
    detail = f"null flag rates X1 {rates[0]:.3f}, X2 {rates[1]:.3f}; power on X2 {power}/50"
    assert record_criterion(8, "detection calibration and power", passed, detail, elapsed)


def test_criterion_9_determinism(tmp_path):
    start = time.perf_counter()
    old_scm = star_scm([0.5, -1.0, 1.0])
    new_scm = star_scm([0.5, -1.0, 1.0], [1.5, 0.0, 0.5])
    graph = tmp_path / "g.txt"
    graph.write_text(render_graph(old_scm.dag))
    old, new = tmp_path / "old.csv", tmp_path / "new.csv"
    write_csv(ancestral_sample(old_scm, 1000, 1), old)
    write_csv(ancestral_sample(new_scm, 1000, 2), new)
    common = ["attribute", "--graph", str(graph), "--old", str(old), "--new", str(new), "--seed", "11"]
    variants = {
        "marginal": ["--mode", "marginal", "--target", "X3", "--functional", "median", "--regressor",
                     "nearest_neighbor", "--draws", "5000", "--bootstrap", "50"],
        "joint": ["--mode", "joint"],
    }
    identical = []
    for name, extra in variants.items():
        bodies = []
        for i, workers in enumerate(("1", "1", "4")):
            out = tmp_path / f"{name}{i}.json"
            assert main([*common, *extra, "--workers", workers, "--output", str(out)]) == 0
            bodies.append(out.read_bytes())
        identical.append(bodies[0] == bodies[1] == bodies[2])
    elapsed = time.perf_counter() - start
    passed = all(identical)
    detail = f"marginal identical: {identical[0]}, joint identical: {identical[1]} (workers 1, 1, 4)"
    assert record_criterion(9, "byte-identical reports", passed, detail, elapsed)


CENSUS_ENV = ("MECHSHIFT_CENSUS_GRAPH", "MECHSHIFT_CENSUS_OLD", "MECHSHIFT_CENSUS_NEW")


@pytest.mark.skipif(not all(os.environ.get(k) for k in CENSUS_ENV), reason="optional: census files not provided")
def test_criterion_10_census_optional():
    start = time.perf_counter()
    with open(os.environ["MECHSHIFT_CENSUS_GRAPH"]) as fh:
        dag = parse_graph_file(fh.read())
    old = load_csv(os.environ["MECHSHIFT_CENSUS_OLD"], dag)
    new = load_csv(os.environ["MECHSHIFT_CENSUS_NEW"], dag)
    report = attribute_marginal(old, new, dag, "income", "mean", AttributionConfig(bootstrap=100, seed=0))
    means = report.provenance["bootstrap"]["replicate_mean"]
    data_delta = report.provenance["delta_psi_data"]
    elapsed = time.perf_counter() - start
    passed = (
        means["occupation"] > means["education"]
        and means["occupation"] > means["income"]
        and np.sign(report.total) == np.sign(data_delta)
    )
    detail = ", ".join(f"{k} {v:.4f}" for k, v in means.items()) + f"; total {report.total:.4f} vs data {data_delta:.4f}"
    assert record_criterion(10, "census occupation is the main driver", passed, detail, elapsed)
