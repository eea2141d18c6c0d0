import itertools

import numpy as np
import pytest

from mechshift.engine import Scm
from mechshift.graph import NodeSpec, star_dag, validate_dag
from mechshift.mechanisms import (
    DiscreteCpt,
    EmpiricalCategoricalMarginal,
    GaussianMarginal,
    LinearGaussianConditional,
)

CHAIN_SPECS = (
    NodeSpec("A", "categorical", ("a0", "a1")),
    NodeSpec("B", "categorical", ("b0", "b1", "b2")),
    NodeSpec("C", "categorical", ("0", "1")),
)


def chain_dag():
    return validate_dag(list(CHAIN_SPECS), [("A", "B"), ("B", "C")])


def random_chain_scm(rng, dag=None):
    """Random fully discrete A -> B -> C model with strictly positive tables."""
    dag = dag or chain_dag()
    a, b, c = dag.nodes
    return Scm(
        dag,
        (
            EmpiricalCategoricalMarginal(a, (), rng.dirichlet(np.ones(2))),
            DiscreteCpt(b, (a,), rng.dirichlet(np.ones(3), size=2)),
            DiscreteCpt(c, (b,), rng.dirichlet(np.ones(2), size=3)),
        ),
    )


def perturb_one_row(scm, rng):
    """Copy of a chain model with one CPT row of node B redrawn."""
    a, b, c = scm.mechanisms
    table = b.table.copy()
    table[rng.integers(0, len(table))] = rng.dirichlet(np.ones(table.shape[1]))
    return Scm(scm.dag, (a, DiscreteCpt(b.child, b.parent_specs, table), c))


def star_scm(mu, shifts=None):
    """Linear-Gaussian star model: roots N(mu_w + s_w, 1), sink = sum of roots + N(mu_n + s_n, 1)."""
    mu = np.asarray(mu, dtype=np.float64)
    shifts = np.zeros_like(mu) if shifts is None else np.asarray(shifts, dtype=np.float64)
    n = len(mu)
    dag = star_dag(n)
    s = dag.nodes
    mechs = [GaussianMarginal(s[w], (), mu[w] + shifts[w], 1.0) for w in range(n - 1)]
    mechs.append(LinearGaussianConditional(s[-1], tuple(s[:-1]), np.ones(n - 1), mu[-1] + shifts[-1], 1.0))
    return Scm(dag, tuple(mechs))


def brute_force_shapley(nu, n):
    """Average marginal contribution over all n! orderings."""
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        members = set()
        for j in perm:
            before = nu(frozenset(members))
            members.add(j)
            phi[j] += nu(frozenset(members)) - before
    return phi / len(perms)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, passed, detail, seconds):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail} | {seconds:.1f}s"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
