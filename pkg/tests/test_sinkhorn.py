import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvft.autodiff import check_tape_function, weighted_sum
from cvft.errors import DegenerateColumn, DegenerateRow, DomainError, ShapeMismatch
from cvft.sinkhorn import (SinkhornConfig, col_normalize, exp_kernel, ot_objective, row_normalize,
                           sinkhorn_forward, sinkhorn_iterations, sinkhorn_solve, sinkhorn_vjp)


def brute_force_assignment(C):
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


# -- kernel and normalizations ---------------------------------------------

def test_exp_kernel_examples():
    assert exp_kernel([[0.0]], 10).tolist() == [[1.0]]
    e = math.exp(-1.0)
    np.testing.assert_allclose(exp_kernel([[0, 1], [1, 0]], 1.0), [[1, e], [e, 1]], rtol=1e-15)
    np.testing.assert_allclose(exp_kernel(np.full((3, 3), 0.4), 2.5), np.full((3, 3), math.exp(-1.0)))


def test_exp_kernel_clamps_instead_of_underflowing():
    K = exp_kernel([[1e6, 0.0]], 1.0)
    assert K[0, 0] > 0 and K[0, 0] == math.exp(-700.0)


def test_row_normalize_example():
    np.testing.assert_allclose(row_normalize([[2, 2], [1, 3]]), [[0.5, 0.5], [0.25, 0.75]])


def test_row_normalize_idempotent_on_stochastic():
    M = row_normalize(np.random.default_rng(0).random((5, 5)) + 0.1)
    np.testing.assert_allclose(row_normalize(M), M, atol=1e-15)


def test_col_normalize_already_stochastic():
    M = np.array([[0.7311, 0.2689], [0.2689, 0.7311]])
    np.testing.assert_allclose(col_normalize(M), M, atol=1e-12)


def test_normalized_sums():
    M = np.random.default_rng(1).random((6, 4)) + 1e-3
    np.testing.assert_allclose(row_normalize(M).sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(col_normalize(M).sum(axis=0), 1, atol=1e-12)


def test_degenerate_sums():
    with pytest.raises(DegenerateRow):
        row_normalize([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(DegenerateColumn):
        col_normalize([[0.0, 1.0], [0.0, 1.0]])


# -- solver ----------------------------------------------------------------

@pytest.mark.parametrize("value, lam, m", [(0.0, 1.0, 1), (3.7, 10.0, 4), (-2.0, 0.5, 20)])
def test_constant_cost_gives_uniform_plan(value, lam, m):
    P = sinkhorn_solve(np.full((5, 5), value), SinkhornConfig(lam, m)).data
    np.testing.assert_allclose(P, np.full((5, 5), 0.2), atol=1e-15)


def test_two_by_two_one_iteration():
    sigma = 1.0 / (1.0 + math.exp(-1.0))
    plan = sinkhorn_solve([[0, 1], [1, 0]], SinkhornConfig(1.0, 1))
    np.testing.assert_allclose(plan.data, [[sigma, 1 - sigma], [1 - sigma, sigma]], rtol=1e-14)
    again = sinkhorn_solve([[0, 1], [1, 0]], SinkhornConfig(1.0, 7))
    np.testing.assert_allclose(again.data, plan.data, rtol=1e-14)


def test_low_entropy_matches_assignment_6x6():
    C = np.random.default_rng(7).random((6, 6))
    plan = sinkhorn_solve(C, SinkhornConfig(200.0, 10000, 1e-9, "tolerance"))
    cost = float(np.sum(plan.data * C))
    opt = brute_force_assignment(C)
    # a doubly stochastic plan carries mass n; compare per unit of mass
    assert abs(cost / 6 - opt / 6) <= 0.01 * opt / 6


@pytest.mark.parametrize("lam", [1.0, 10.0, 20.0])
def test_convergence_64(lam):
    C = np.random.default_rng(int(lam)).random((64, 64))
    plan = sinkhorn_solve(C, SinkhornConfig(lam, 20))
    assert max(plan.row_residual, plan.col_residual) <= 1e-6
    assert plan.iterations_run == 20


def test_convergence_lambda_50_needs_more_iterations():
    C = np.random.default_rng(50).random((64, 64))
    plan = sinkhorn_solve(C, SinkhornConfig.standalone(50.0))
    assert plan.converged and plan.iterations_run < 500
    assert max(plan.row_residual, plan.col_residual) <= 1e-6


def test_tolerance_mode_stops_early():
    C = np.random.default_rng(2).random((16, 16))
    plan = sinkhorn_solve(C, SinkhornConfig(1.0, 500, 1e-10, "tolerance"))
    assert plan.converged and plan.iterations_run < 500


def test_plan_positive_and_deterministic():
    C = np.random.default_rng(3).random((10, 10)) * 5
    a = sinkhorn_solve(C, SinkhornConfig(10.0, 10))
    b = sinkhorn_solve(C.copy(), SinkhornConfig(10.0, 10))
    assert np.all(a.data > 0) and np.all(a.data <= 1)
    assert a.data.tobytes() == b.data.tobytes()


def test_shift_invariance():
    C = np.random.default_rng(4).random((12, 12))
    cfg = SinkhornConfig(10.0, 15)
    np.testing.assert_allclose(sinkhorn_solve(C + 0.37, cfg).data, sinkhorn_solve(C, cfg).data,
                               atol=1e-10)


def test_larger_lambda_lowers_cost():
    for seed in range(5):
        C = np.random.default_rng(seed).random((8, 8))
        costs = [np.sum(sinkhorn_solve(C, SinkhornConfig.standalone(lam)).data * C)
                 for lam in (1.0, 10.0, 100.0)]
        assert costs[0] > costs[1] > costs[2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n))
    r, c = rng.permutation(n), rng.permutation(n)
    cfg = SinkhornConfig(5.0, 8)
    P = sinkhorn_solve(C, cfg).data
    Pp = sinkhorn_solve(C[r][:, c], cfg).data
    np.testing.assert_allclose(Pp, P[r][:, c], atol=1e-12)


def test_non_square_rejected():
    with pytest.raises(ShapeMismatch):
        sinkhorn_solve(np.ones((2, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(lam=0)
    with pytest.raises(ValueError):
        SinkhornConfig(max_iterations=0)


# -- objective -------------------------------------------------------------

def test_objective_single_cell():
    assert ot_objective([[1.0]], [[3.0]], 0.0) == 3.0


def test_objective_uniform_zero_cost():
    assert ot_objective(np.full((2, 2), 0.25), np.zeros((2, 2)), 1.0) == pytest.approx(
        -(1 + math.log(4)), abs=1e-14)
    # the doubly stochastic uniform plan on n=2
    assert ot_objective(np.full((2, 2), 0.5), np.zeros((2, 2)), 1.0) == pytest.approx(
        4 * 0.5 * (math.log(0.5) - 1), abs=1e-14)


def test_objective_lambda_zero_is_frobenius():
    rng = np.random.default_rng(5)
    P, C = rng.random((4, 4)) + 0.01, rng.standard_normal((4, 4))
    assert ot_objective(P, C, 0.0) == pytest.approx(float(np.sum(P * C)), abs=1e-14)


def test_objective_domain():
    with pytest.raises(DomainError):
        ot_objective([[0.0, 1.0]], [[1.0, 1.0]], 1.0)


# -- gradients -------------------------------------------------------------

def hand_expanded_one_step(C, lam):
    """Jacobian dS^1_ij / dC_st written out element by element from the normalization formulas."""
    n = C.shape[0]
    K = np.exp(-lam * C)
    S = K.sum(axis=1)
    R = K / S[:, None]
    T = R.sum(axis=0)
    J = np.zeros((n, n, n, n))
    for i, j, s, t in itertools.product(range(n), repeat=4):
        total = 0.0
        for p, q in itertools.product(range(n), repeat=2):
            dcol = (q == j) * ((p == i) / T[j] - R[i, j] / T[j] ** 2)
            drow = (p == s) * ((q == t) / S[s] - K[s, q] / S[s] ** 2)
            total += dcol * drow
        J[i, j, s, t] = total * (-lam * K[s, t])
    return J


def test_vjp_matches_hand_expansion_m1():
    C = np.random.default_rng(8).random((2, 2))
    J = hand_expanded_one_step(C, 1.3)
    _, trace = sinkhorn_forward(C, SinkhornConfig(1.3, 1))
    for i, j in itertools.product(range(2), repeat=2):
        up = np.zeros((2, 2))
        up[i, j] = 1.0
        np.testing.assert_allclose(sinkhorn_vjp(trace, up), J[i, j], atol=1e-14)


def test_vjp_m0_is_kernel_derivative():
    C = np.random.default_rng(9).random((3, 3))
    K = exp_kernel(C, 4.0)
    _, trace = sinkhorn_forward(C, SinkhornConfig(4.0, 1))
    trace.steps.clear()
    np.testing.assert_allclose(sinkhorn_vjp(trace, np.ones((3, 3))), -4.0 * K)


@pytest.mark.parametrize("n, m, tol", [(2, 1, 1e-6), (8, 10, 1e-4)])
def test_vjp_matches_finite_differences(n, m, tol):
    rng = np.random.default_rng(n * 10 + m)
    C = rng.random((n, n))
    W = rng.standard_normal((n, n))
    cfg = SinkhornConfig(2.0, m)
    _, trace = sinkhorn_forward(C, cfg)
    rep = check_tape_function(lambda t, v: weighted_sum(sinkhorn_iterations(v["C"], 2.0, m), W),
                              {"C": C}, "sinkhorn")
    assert rep.max_relative_error < tol
    # the standalone vjp agrees with the tape
    from cvft.autodiff import Tape
    tape = Tape()
    c = tape.param("C", C)
    g_tape = tape.backward(weighted_sum(sinkhorn_iterations(c, 2.0, m), W))["C"]
    np.testing.assert_allclose(sinkhorn_vjp(trace, W), g_tape, rtol=1e-13, atol=1e-15)
