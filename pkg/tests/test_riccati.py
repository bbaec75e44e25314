import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batch_qp_controls, monte_carlo_cost, random_instance, scalar_riccati
from pose_mpc.kinematics import ConfigurationError
from pose_mpc.riccati import (
    MpcProblem,
    cost_to_go,
    default_weights,
    extract_control,
    solve_dare,
)
from pose_mpc.trajectory import INJECTION, drift_covariance, symmetric_sqrt

THETA = np.zeros(8)


def problem_from(Q, R, B, window, sigma=None, kappa=0.0):
    sigma = np.zeros((3, 3)) if sigma is None else sigma
    return MpcProblem(Q, R, kappa, len(window) - 1, 0.1, window, sigma, B_bar=B)


def open_loop(sol, B, e0):
    e, us = e0.copy(), []
    for k in range(sol.H):
        u = extract_control(sol, e, k)
        us.append(u)
        e = e + B @ u + sol.steps[k]
    return np.array(us)


def scalar_problem(q, r, b, H, sigma2, kappa=0.0):
    return MpcProblem(np.array([[q]]), np.array([[r]]), kappa, H, 0.1, np.zeros((H + 1, 1)),
                      np.array([[sigma2]]), B_bar=np.array([[b]]), injection=np.eye(1))


def test_zero_everything_is_zero():
    window = np.tile(np.array([1.0, 2.0, 0.9, 0.0, 0.0, 0.3]), (9, 1))
    B = 0.1 * np.random.default_rng(0).standard_normal((6, 9))
    sol = solve_dare(problem_from(*default_weights(), B, window), THETA, THETA)
    assert not sol.p.any() and not sol.c.any()
    assert not extract_control(sol, np.zeros(6), 0).any()
    assert cost_to_go(sol, np.zeros(6)) == 0.0


def test_scalar_surrogate_matches_hand_recursion():
    q, r, b, H, s2 = 2.0, 0.5, 0.1, 3, 0.04
    sol = solve_dare(scalar_problem(q, r, b, H, s2), np.zeros(1), np.zeros(1))
    P, c, m = scalar_riccati(q, r, b, H, s2)
    assert np.allclose(sol.P[:, 0, 0], P, rtol=1e-14)
    assert np.allclose(sol.c, c, rtol=1e-14)
    assert sol.c[0] == pytest.approx(s2 * sum(P[1:]), rel=1e-14)
    u = extract_control(sol, np.array([1.0]), 0)
    assert u[0] == pytest.approx(-m[0] * P[1], rel=1e-14)


def test_controls_match_batch_qp():
    rng = np.random.default_rng(1)
    for _ in range(100):
        Q, R, B, window, e0, H = random_instance(rng)
        sol = solve_dare(problem_from(Q, R, B, window), THETA, THETA)
        U_ref, cost_ref = batch_qp_controls(Q, R, B, window, e0)
        U = open_loop(sol, B, e0)
        assert np.linalg.norm(U - U_ref) <= 1e-6 * max(1.0, np.linalg.norm(U_ref))
        assert cost_to_go(sol, e0) == pytest.approx(cost_ref, rel=1e-8)


def test_terminal_anchoring():
    rng = np.random.default_rng(2)
    Q, R, B, window, e0, H = random_instance(rng, H=4)
    th_bar = np.linspace(0, 0.7, 8)
    sol = solve_dare(problem_from(Q, R, B, window, drift_covariance(0.4), kappa=3.0), th_bar, THETA)
    assert np.array_equal(sol.P[H], Q)
    assert not sol.p[H].any()
    assert sol.c[H] == 3.0 * np.sum(th_bar ** 2)


def test_symmetric_psd_iterates():
    rng = np.random.default_rng(3)
    for _ in range(120):
        Q, R, B, window, _, H = random_instance(rng, q_scale=rng.uniform(0, 1000))
        sol = solve_dare(problem_from(Q, R, B, window, drift_covariance(0.7)), THETA, THETA)
        for Pk in sol.P:
            assert np.max(np.abs(Pk - Pk.T)) <= 1e-12 * max(1.0, np.abs(Pk).max())
            assert np.linalg.eigvalsh(Pk).min() >= -1e-10 * max(1.0, np.abs(Pk).max())


def test_certainty_equivalence_and_trace_sum():
    rng = np.random.default_rng(4)
    for _ in range(20):
        Q, R, B, window, e0, H = random_instance(rng)
        sigma = drift_covariance(rng.uniform(0.1, 1.0))
        calm = solve_dare(problem_from(Q, R, B, window), THETA, THETA)
        noisy = solve_dare(problem_from(Q, R, B, window, sigma), THETA, THETA)
        assert np.array_equal(open_loop(calm, B, e0), open_loop(noisy, B, e0))
        assert np.array_equal(calm.P, noisy.P) and np.array_equal(calm.p, noisy.p)
        trace = sum(np.trace(sigma @ INJECTION.T @ calm.P[k + 1] @ INJECTION) for k in range(H))
        assert noisy.c[0] - calm.c[0] == pytest.approx(trace, rel=1e-9)


def test_blind_scoring_drops_only_the_trace():
    rng = np.random.default_rng(5)
    Q, R, B, window, e0, H = random_instance(rng)
    prob = problem_from(Q, R, B, window, drift_covariance(0.4))
    blind = solve_dare(prob, THETA, THETA, include_disturbance=False)
    zero = solve_dare(prob.with_sigma(np.zeros((3, 3))), THETA, THETA)
    for a, b in ((blind.P, zero.P), (blind.p, zero.p), (blind.c, zero.c), (blind.M, zero.M)):
        assert np.array_equal(a, b)


def test_constant_reference_cost_is_trace_plus_pose_term():
    window = np.tile(np.array([0.5, 0.0, 0.9, 0.0, 0.0, 0.0]), (6, 1))
    B = 0.1 * np.random.default_rng(6).standard_normal((6, 9))
    sigma = drift_covariance(0.4)
    th_bar = np.full(8, 0.05)
    sol = solve_dare(problem_from(*default_weights(), B, window, sigma, kappa=1.0), th_bar, THETA)
    trace = sum(np.trace(sigma @ INJECTION.T @ sol.P[k + 1] @ INJECTION) for k in range(5))
    assert cost_to_go(sol, np.zeros(6)) == pytest.approx(trace + np.sum(th_bar ** 2), rel=1e-12)


@pytest.mark.slow
def test_expected_cost_matches_monte_carlo():
    rng = np.random.default_rng(7)
    for _ in range(10):
        Q, R, B, window, e0, H = random_instance(rng)
        sigma = drift_covariance(rng.uniform(0.2, 1.0))
        th_bar = 0.1 * rng.standard_normal(8)
        sol = solve_dare(problem_from(Q, R, B, window, sigma, kappa=1.0), th_bar, THETA)
        samples = monte_carlo_cost(lambda e, k: extract_control(sol, e, k), Q, R, B, window, e0,
                                   symmetric_sqrt(sigma), INJECTION, np.sum(th_bar ** 2), 100_000, rng)
        se = samples.std(ddof=1) / np.sqrt(len(samples))
        assert abs(samples.mean() - cost_to_go(sol, e0)) <= 3 * se


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_intercept_monotone_in_q(seed, q1, q2):
    rng = np.random.default_rng(seed)
    Q, R, B, window, _, _ = random_instance(rng)
    lo, hi = sorted((q1, q2))
    c_lo = solve_dare(problem_from(Q, R, B, window, drift_covariance(lo)), THETA, THETA).c[0]
    c_hi = solve_dare(problem_from(Q, R, B, window, drift_covariance(hi)), THETA, THETA).c[0]
    assert c_hi >= c_lo - 1e-9 * max(1.0, abs(c_lo))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_control_affine_in_error(seed):
    rng = np.random.default_rng(seed)
    Q, R, B, window, e, _ = random_instance(rng)
    sol = solve_dare(problem_from(Q, R, B, window), THETA, THETA)
    u0 = extract_control(sol, np.zeros(6), 0)
    u1 = extract_control(sol, e, 0)
    u2 = extract_control(sol, 2 * e, 0)
    assert np.allclose(u2 - u0, 2 * (u1 - u0), atol=1e-9)


def test_stacked_solve_matches_individual():
    rng = np.random.default_rng(8)
    Q, R, _, window, e0, _ = random_instance(rng)
    Bs = 0.3 * rng.standard_normal((5, 6, 9))
    th = 0.1 * rng.standard_normal((5, 8))
    base = problem_from(Q, R, Bs[0], window, drift_covariance(0.4), kappa=1.0)
    stacked = solve_dare(base.with_input_matrix(Bs), th, THETA)
    costs = cost_to_go(stacked, e0)
    for i in range(5):
        single = solve_dare(base.with_input_matrix(Bs[i]), th[i], THETA)
        assert costs[i] == pytest.approx(cost_to_go(single, e0), rel=1e-12)


def test_step_out_of_range():
    rng = np.random.default_rng(9)
    Q, R, B, window, e0, H = random_instance(rng, H=3)
    sol = solve_dare(problem_from(Q, R, B, window), THETA, THETA)
    with pytest.raises(IndexError):
        extract_control(sol, e0, 3)
    with pytest.raises(IndexError):
        extract_control(sol, e0, -1)


@pytest.mark.parametrize("mutate", [
    lambda kw: kw.update(R=np.zeros((9, 9))),
    lambda kw: kw.update(Q=-np.eye(6)),
    lambda kw: kw.update(H=0, window=np.zeros((1, 6))),
    lambda kw: kw.update(window=np.zeros((3, 6))),
    lambda kw: kw.update(kappa=-1.0),
    lambda kw: kw.update(B_bar=np.zeros((6, 8))),
])
def test_problem_validation(mutate):
    kw = dict(Q=np.eye(6), R=np.eye(9), kappa=1.0, H=4, tau=0.1, window=np.zeros((5, 6)),
              sigma=np.zeros((3, 3)), B_bar=np.zeros((6, 9)))
    mutate(kw)
    with pytest.raises(ConfigurationError):
        MpcProblem(**kw)


def test_solution_json_dump():
    import json
    rng = np.random.default_rng(10)
    Q, R, B, window, _, H = random_instance(rng, H=2)
    sol = solve_dare(problem_from(Q, R, B, window), THETA, THETA)
    data = json.loads(sol.to_json())
    assert np.allclose(data["P"], sol.P) and len(data["c"]) == H + 1
