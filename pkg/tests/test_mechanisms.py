import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from mechshift.errors import IncompatibleFamily, InsufficientData, UnsupportedFamily
from mechshift.graph import NodeSpec, validate_dag
from mechshift.mechanisms import (
    VARIANCE_FLOOR,
    DiscreteCpt,
    GaussianMarginal,
    LinearGaussianConditional,
    SingularDesignWarning,
    UnseenParentWarning,
    fit_mechanism,
    log_density,
    sample,
    sample_one,
)
from mechshift.tabular import Table

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
X1, X2 = NodeSpec("X1"), NodeSpec("X2")
BIN = NodeSpec("B", "categorical", ("A", "B"))


def _chain(m, seed=0, weight=2.0):
    rng = np.random.default_rng(seed)
    dag = validate_dag([X1, X2], [("X1", "X2")])
    x1 = rng.normal(size=m)
    return dag, Table.from_dict(dag, {"X1": x1, "X2": weight * x1 + rng.normal(size=m)})


def test_linear_fit_recovers_weight_and_noise():
    dag, table = _chain(100_000)
    mech = fit_mechanism(table, dag, "X2")
    assert isinstance(mech, LinearGaussianConditional)
    assert abs(mech.weights[0] - 2.0) < 0.02
    assert abs(mech.noise_var - 1.0) < 0.05


def test_linear_fit_matches_normal_equations():
    rng = np.random.default_rng(3)
    dag = validate_dag(["a", "b", "y"], [("a", "y"), ("b", "y")])
    a, b = rng.normal(size=40), rng.normal(size=40)
    y = 1 + 0.5 * a - b + rng.normal(size=40)
    mech = fit_mechanism(Table.from_dict(dag, {"a": a, "b": b, "y": y}), dag, "y")
    x = np.column_stack([np.ones(40), a, b])
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    resid = y - x @ beta
    assert np.allclose([mech.intercept, *mech.weights], beta, atol=1e-10)
    assert mech.noise_var == pytest.approx(resid @ resid / (40 - 2 - 1), rel=1e-10)


def test_constant_child_hits_variance_floor():
    rng = np.random.default_rng(0)
    dag = validate_dag([X1, X2], [("X1", "X2")])
    table = Table.from_dict(dag, {"X1": rng.normal(size=50), "X2": np.full(50, 3.0)})
    mech = fit_mechanism(table, dag, "X2")
    assert mech.noise_var == VARIANCE_FLOOR
    assert abs(mech.weights[0]) < 1e-12


def test_collinear_parents_use_ridge_with_warning():
    rng = np.random.default_rng(0)
    dag = validate_dag(["a", "b", "y"], [("a", "y"), ("b", "y")])
    a = rng.normal(size=30)
    table = Table.from_dict(dag, {"a": a, "b": a, "y": a + rng.normal(size=30)})
    with pytest.warns(SingularDesignWarning):
        mech = fit_mechanism(table, dag, "y")
    assert np.all(np.isfinite(mech.weights))


def test_cpt_laplace_smoothing_counts():
    dag = validate_dag([BIN], [])
    table = Table.from_dict(dag, {"B": ["A"] * 8 + ["B"] * 2})
    mech = fit_mechanism(table, dag, "B")
    assert np.allclose(mech.probs, [9 / 12, 3 / 12], atol=1e-15)


def test_cpt_conditional_counts_and_unseen_rows():
    parent = NodeSpec("P", "categorical", ("p0", "p1", "p2"))
    dag = validate_dag([parent, BIN], [("P", "B")])
    table = Table.from_dict(dag, {"P": ["p0"] * 4 + ["p1"] * 2, "B": ["A", "A", "A", "B", "B", "B"]})
    mech = fit_mechanism(table, dag, "B", alpha=1.0)
    assert isinstance(mech, DiscreteCpt)
    assert np.allclose(mech.table[0], [4 / 6, 2 / 6])
    assert np.allclose(mech.table[1], [1 / 4, 3 / 4])
    # p2 never seen: falls back to the smoothed marginal of B
    assert np.allclose(mech.table[2], [4 / 8, 4 / 8])
    with pytest.warns(UnseenParentWarning):
        mech.pmf(np.array([[2.0]]))


def test_probability_vectors_sum_to_one():
    rng = np.random.default_rng(1)
    parent = NodeSpec("P", "categorical", tuple("abcd"))
    child = NodeSpec("C", "categorical", tuple("xyz"))
    dag = validate_dag([parent, child], [("P", "C")])
    table = Table.from_dict(dag, {"P": rng.integers(0, 4, 200), "C": rng.integers(0, 3, 200)})
    for node in ("P", "C"):
        mech = fit_mechanism(table, dag, node)
        probs = mech.table if node == "C" else mech.probs[None]
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-12
        assert probs.min() >= 0


def test_family_compatibility():
    dag, table = _chain(20)
    with pytest.raises(IncompatibleFamily):
        fit_mechanism(table, dag, "X2", "cpt")
    with pytest.raises(IncompatibleFamily):
        fit_mechanism(table, dag, "X1", "linear_gaussian")
    with pytest.raises(IncompatibleFamily):
        fit_mechanism(table, dag, "X2", "gaussian")
    cat = NodeSpec("C", "categorical", ("a", "b"))
    dag2 = validate_dag([X1, cat], [("X1", "C")])
    t2 = Table.from_dict(dag2, {"X1": np.arange(5.0), "C": [0, 1, 0, 1, 0]})
    with pytest.raises(IncompatibleFamily):
        fit_mechanism(t2, dag2, "C")


def test_insufficient_data():
    dag, table = _chain(2)
    with pytest.raises(InsufficientData):
        fit_mechanism(table, dag, "X2")
    with pytest.raises(InsufficientData):
        fit_mechanism(table.take([0]), dag, "X1")
    dag, table = _chain(10)
    with pytest.raises(InsufficientData):
        fit_mechanism(table, dag, "X2", "nearest_neighbor", k_reg=10)


def test_gaussian_sample_mean():
    mech = GaussianMarginal(X1, (), 0.0, 1.0)
    draws = sample(mech, None, np.random.default_rng(0), size=1_000_000)
    assert abs(draws.mean()) < 0.005


def test_near_deterministic_linear_draw():
    mech = LinearGaussianConditional(X2, (X1,), [2.0], 0.0, VARIANCE_FLOOR)
    assert sample_one(mech, [3.0], np.random.default_rng(0)) == pytest.approx(6.0, abs=1e-3)


def test_cpt_draw_frequencies():
    mech = DiscreteCpt(BIN, (), np.array([[0.25, 0.75]]))
    draws = sample(mech, None, np.random.default_rng(0), size=100_000)
    assert abs(np.mean(draws == 0) - 0.25) < 0.01


def test_sampling_is_seed_deterministic():
    dag, table = _chain(500)
    for family in ("linear_gaussian", "nearest_neighbor"):
        mech = fit_mechanism(table, dag, "X2", family)
        pa = table.matrix(["X1"])
        a = sample(mech, pa, np.random.default_rng(9))
        b = sample(mech, pa, np.random.default_rng(9))
        assert np.array_equal(a, b)


def test_log_densities():
    assert log_density(GaussianMarginal(X1, (), 0.0, 1.0), 0.0) == pytest.approx(-0.9189385, abs=1e-6)
    assert log_density(GaussianMarginal(X1, (), 0.0, 1.0), 0.0) == pytest.approx(-HALF_LOG_2PI, abs=1e-15)
    cpt = DiscreteCpt(BIN, (), np.array([[0.5, 0.5]]))
    assert log_density(cpt, 0) == pytest.approx(math.log(0.5))
    assert log_density(cpt, 1) == pytest.approx(math.log(0.5))
    lg = LinearGaussianConditional(X2, (X1,), [2.0], 0.0, 1.0)
    assert log_density(lg, 2.0, [1.0]) == pytest.approx(-HALF_LOG_2PI, abs=1e-15)


def test_nearest_neighbor_has_no_density():
    dag, table = _chain(100)
    mech = fit_mechanism(table, dag, "X2", "nearest_neighbor")
    with pytest.raises(UnsupportedFamily):
        log_density(mech, 0.0, [0.0])


def test_gaussian_density_integrates_to_one():
    for mech, pa in ((GaussianMarginal(X1, (), 1.5, 2.0), ()), (LinearGaussianConditional(X2, (X1,), [2.0], 1.0, 0.5), [0.7])):
        total, _ = integrate.quad(lambda v: math.exp(log_density(mech, v, pa)), -40, 40, points=[0, 2.4])
        assert abs(total - 1) < 1e-3


def test_cpt_density_sums_to_one():
    rng = np.random.default_rng(0)
    parent = NodeSpec("P", "categorical", ("a", "b", "c"))
    child = NodeSpec("C", "categorical", ("x", "y", "z", "w"))
    mech = DiscreteCpt(child, (parent,), rng.dirichlet(np.ones(4), size=3))
    for p in range(3):
        total = math.fsum(math.exp(log_density(mech, c, [p])) for c in range(4))
        assert abs(total - 1) < 1e-12


def test_parametric_refit_consistency():
    dag, table = _chain(5000, seed=4)
    fitted = fit_mechanism(table, dag, "X2")
    regen_x1 = np.random.default_rng(5).normal(size=50_000)
    regen = sample(fitted, regen_x1[:, None], np.random.default_rng(6))
    refit = fit_mechanism(Table.from_dict(dag, {"X1": regen_x1, "X2": regen}), dag, "X2")
    assert abs(refit.weights[0] - fitted.weights[0]) < 0.03
    assert abs(refit.intercept - fitted.intercept) < 0.03
    assert abs(refit.noise_var - fitted.noise_var) < 0.05


def test_categorical_parent_enters_by_one_hot():
    rng = np.random.default_rng(0)
    g = NodeSpec("G", "categorical", ("u", "v", "w"))
    dag = validate_dag([g, X2], [("G", "X2")])
    codes = rng.integers(0, 3, 3000)
    y = np.array([0.0, 2.0, -1.0])[codes] + rng.normal(size=3000) * 0.1
    mech = fit_mechanism(Table.from_dict(dag, {"G": codes, "X2": y}), dag, "X2")
    assert mech.weights.shape == (2,)
    assert np.allclose(mech.conditional_mean(np.array([[0.0], [1.0], [2.0]])), [0, 2, -1], atol=0.02)


def test_no_warnings_on_regular_fit():
    dag, table = _chain(100)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_mechanism(table, dag, "X2")
