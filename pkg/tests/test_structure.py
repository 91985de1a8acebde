import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cora.structure import (
    PermutationPlan,
    assignment_cost,
    blend_costs,
    cost_sa,
    cost_tc,
    hungarian,
    linear_assignment,
    normalize,
    permute_queries,
    plan_alignment,
)

import oracles


def test_cost_sa_examples():
    Q = np.eye(4)
    C = cost_sa(Q, Q)
    np.testing.assert_allclose(C, 1 - np.eye(4), atol=1e-12)
    q = np.array([[1.0, 2.0]])
    assert cost_sa(q, -q)[0, 0] == pytest.approx(2.0)
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    C = cost_sa(A, B)
    for i in range(3):
        for j in range(3):
            assert C[i, j] == pytest.approx(1 - oracles.cos(A[i], B[j]), abs=1e-12)
    with pytest.raises(ValueError):
        cost_sa(A, B[:2])


def test_cost_tc_examples():
    C = cost_tc(8)
    assert C[2, 5] == pytest.approx(math.sqrt(3))
    assert np.all(np.diag(C) == 0)
    assert C[0, 7] == pytest.approx(math.sqrt(7))
    with pytest.raises(ValueError):
        cost_tc(0)


def test_blend_examples():
    rng = np.random.default_rng(1)
    C_SA = rng.uniform(0, 2, (5, 5))
    C_TC = cost_tc(5)
    assert np.array_equal(blend_costs(C_SA, C_TC, 1.0), normalize(C_TC))
    assert np.array_equal(blend_costs(C_SA, C_TC, 0.0), normalize(C_SA))
    const = np.full((5, 5), 0.7)
    np.testing.assert_allclose(blend_costs(const, C_TC, 0.3), 0.3 * normalize(C_TC))
    n = normalize(C_SA)
    assert n.min() == 0 and n.max() == 1
    with pytest.raises(ValueError):
        blend_costs(C_SA, C_TC, 1.5)


@pytest.mark.parametrize("n", range(2, 9))
def test_hungarian_matches_brute_force(n):
    rng = np.random.default_rng(100 + n)
    trials = 100 if n <= 6 else 10
    for _ in range(trials):
        C = rng.uniform(0, 1, (n, n))
        plan = hungarian(C)
        assert plan.cost_total == oracles.brute_force_assignment(C)


def test_hungarian_integer_costs_with_ties():
    rng = np.random.default_rng(2)
    for _ in range(50):
        C = rng.integers(0, 3, (6, 6)).astype(float)
        plan = hungarian(C)
        assert plan.cost_total == oracles.brute_force_assignment(C)
        assert sorted(plan.pi.tolist()) == list(range(6))


def test_hungarian_deterministic_tie_order():
    plan = hungarian(np.zeros((4, 4)))
    assert plan.pi.tolist() == [0, 1, 2, 3]
    assert np.array_equal(hungarian(np.ones((5, 5))).pi, hungarian(np.ones((5, 5))).pi)


@pytest.mark.parametrize("n", [2, 5, 16, 64])
def test_beta_one_gives_identity(n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        Q_S, Q_T = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
        plan, C = plan_alignment(Q_S, Q_T, 1.0)
        assert plan.is_identity and plan.cost_total == 0.0


def test_unique_zero_permutation_recovered():
    rng = np.random.default_rng(3)
    p = rng.permutation(7)
    C = rng.uniform(0.1, 1.0, (7, 7))
    C[np.arange(7), p] = 0.0
    assert np.array_equal(hungarian(C).pi, p)


def test_affine_invariance():
    rng = np.random.default_rng(4)
    for n in (3, 6, 9):
        C = rng.uniform(0, 1, (n, n))
        base = hungarian(C)
        a, b = 3.5, -2.0
        tr = hungarian(a * C + b)
        assert assignment_cost(a * C + b, tr.pi) == pytest.approx(a * base.cost_total + n * b, abs=1e-9)


def test_agrees_with_scipy():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(5)
    for n in (10, 40, 100):
        C = rng.normal(size=(n, n))
        rows, cols = scipy_opt.linear_sum_assignment(C)
        ref = C[rows, cols].sum()
        assert hungarian(C).cost_total == pytest.approx(ref, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_solution_is_bijection(n, seed):
    C = np.random.default_rng(seed).normal(size=(n, n))
    pi = linear_assignment(C)
    assert sorted(pi.tolist()) == list(range(n))


def test_hungarian_input_checks():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    C = np.zeros((3, 3))
    C[1, 1] = np.inf
    with pytest.raises(ValueError):
        hungarian(C)


def test_default_size_is_fast():
    C = np.random.default_rng(6).uniform(size=(256, 256))
    t0 = time.perf_counter()
    hungarian(C)
    assert time.perf_counter() - t0 < 2.0


def test_plan_validation_and_inverse():
    with pytest.raises(ValueError):
        PermutationPlan(np.array([0, 0, 1]), 0.5, 0.0)
    plan = PermutationPlan(np.array([2, 0, 1]), 0.5, 0.0)
    Q = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(permute_queries(Q, plan), Q[[2, 0, 1]])
    back = permute_queries(permute_queries(Q, plan), plan.inverse())
    assert np.array_equal(back, Q)


def test_permute_queries_examples():
    Q = np.arange(9.0).reshape(3, 3)
    ident = PermutationPlan(np.arange(3), 0.0, 0.0)
    assert np.array_equal(permute_queries(Q, ident), Q)
    rev = PermutationPlan(np.array([2, 1, 0]), 0.0, 0.0)
    assert np.array_equal(permute_queries(Q, rev), Q[::-1])
    with pytest.raises(ValueError):
        permute_queries(Q[:2], rev)
