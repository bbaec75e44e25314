import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pose_mpc.harness import initial_state
from pose_mpc.kinematics import (
    BaseState,
    ConfigurationError,
    DhParameters,
    input_matrix_from_jacobian,
    jacobian_and_pose,
    pose_error,
    reference_chain,
    whole_body_pose,
)
from pose_mpc.planner import (
    LANES,
    CandidatePolicy,
    DegenerateCandidateWarning,
    candidate_rng,
    chunk_count,
    clamp_rates,
    fuse_controls,
    plan_fixed_pose,
    plan_step,
    sample_candidates,
    score_candidates,
    select_candidate,
)
from pose_mpc.riccati import MpcProblem, cost_to_go, solve_dare
from pose_mpc.trajectory import drift_covariance, make_nominal


@pytest.fixture(scope="module")
def chain():
    return reference_chain()


@pytest.fixture(scope="module")
def scene(chain):
    nominal = make_nominal("curve-B", 60, 0.1)
    base, theta = initial_state(chain, nominal[0])
    window = nominal[20:29].copy()
    window[:, :3] += nominal[0, :3] - window[0, :3]
    template = MpcProblem(1000 * np.eye(6), np.eye(9), 1.0, 8, 0.1, window, drift_covariance(0.4))
    return base, theta, template


def test_single_candidate_is_current(chain):
    th0 = np.linspace(-0.3, 0.3, 8)
    cands = sample_candidates(CandidatePolicy(count=1), th0, chain.lower, chain.upper)
    assert cands.shape == (1, 8) and np.array_equal(cands[0], th0)


def test_twelve_candidates_within_radius(chain):
    th0 = np.zeros(8)
    cands = sample_candidates(CandidatePolicy(count=12, radius=0.1, seed=3), th0,
                              chain.lower, chain.upper)
    assert cands.shape == (12, 8)
    assert np.array_equal(cands[0], th0)
    assert np.max(np.abs(cands - th0)) <= 0.1
    assert all(np.any(c != th0) for c in cands[1:])


def test_sampling_deterministic(chain):
    pol = CandidatePolicy(count=12, seed=5)
    a = sample_candidates(pol, np.zeros(8), chain.lower, chain.upper)
    b = sample_candidates(pol, np.zeros(8), chain.lower, chain.upper)
    assert np.array_equal(a, b)
    c = sample_candidates(pol, np.zeros(8), chain.lower, chain.upper, rng=candidate_rng(5, 1))
    d = sample_candidates(pol, np.zeros(8), chain.lower, chain.upper, rng=candidate_rng(5, 1))
    assert np.array_equal(c, d)


def test_base_heading_can_be_excluded(chain):
    cands = sample_candidates(CandidatePolicy(count=30, include_base=False, seed=1), np.zeros(8),
                              chain.lower, chain.upper)
    assert not cands[:, 0].any()


def test_candidates_respect_tight_limits():
    lower, upper = np.full(8, -0.02), np.full(8, 0.02)
    cands = sample_candidates(CandidatePolicy(count=12, radius=0.1, max_retries=2, seed=2),
                              np.zeros(8), lower, upper)
    assert np.all((cands >= lower) & (cands <= upper))


def test_zero_width_limits_degenerate():
    th0 = np.zeros(8)
    with pytest.warns(DegenerateCandidateWarning):
        cands = sample_candidates(CandidatePolicy(count=12, seed=2), th0, th0, th0)
    assert cands.shape == (1, 8)


def test_policy_validation(chain):
    with pytest.raises(ConfigurationError):
        CandidatePolicy(count=0)
    with pytest.raises(ConfigurationError):
        CandidatePolicy(radius=0.0)
    with pytest.raises(ConfigurationError):
        sample_candidates(CandidatePolicy(), np.full(8, 5.0), chain.lower, chain.upper)


def test_fuse_identity_and_pure_move():
    u = np.arange(9.0)
    assert np.array_equal(fuse_controls(np.zeros(8), u), u)
    p = np.linspace(-1, 1, 8)
    out = fuse_controls(p, np.zeros(9))
    assert out[0] == 0.0 and np.array_equal(out[1:], p)


@settings(max_examples=100)
@given(st.integers(0, 2**31))
def test_fuse_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    u, p = rng.standard_normal(9), rng.standard_normal(8)
    fused = fuse_controls(p, u)
    assert np.linalg.norm(fused) <= np.linalg.norm(u) + np.linalg.norm(p) + 1e-12
    assert fused[0] == u[0]


def test_rate_clamp_flags():
    u, clipped = clamp_rates(np.array([3.0, -3.0, 0.5]), np.ones(3))
    assert clipped and np.array_equal(u, [1.0, -1.0, 0.5])
    u, clipped = clamp_rates(np.array([0.1]), None)
    assert not clipped


def test_tie_rule():
    assert select_candidate([1.0, 0.5, 0.5]) == 1
    assert select_candidate([0.5, 0.5, 0.2, 0.2]) == 2
    assert select_candidate([0.5, 0.5]) == 0
    assert select_candidate([np.inf, 2.0]) == 1


def test_single_candidate_matches_fixed_pose(chain, scene):
    base, theta, template = scene
    a = plan_step(chain, template, theta, base, CandidatePolicy(count=1), rng=candidate_rng(0, 0))
    b = plan_fixed_pose(chain, template, theta, base)
    assert np.array_equal(a.control, b.control)
    assert np.array_equal(a.u_star, b.u_star)
    assert a.predicted_cost == b.predicted_cost
    assert not a.pose_command.any()


def test_chosen_is_recomputed_argmin(chain, scene):
    base, theta, template = scene
    plan = plan_step(chain, template, theta, base, CandidatePolicy(count=12),
                     rng=candidate_rng(4, 7))
    # independent per-candidate recomputation, one at a time
    costs = []
    for cand in plan.candidates:
        J, pose = jacobian_and_pose(chain, cand)
        B = input_matrix_from_jacobian(J, cand[0], 0.1)
        s = pose + [base.x, base.y, 0, 0, 0, 0]
        sol = solve_dare(template.with_input_matrix(B), cand, theta)
        costs.append(float(cost_to_go(sol, pose_error(s, template.window[0]))))
    costs = np.array(costs)
    assert np.allclose(plan.per_candidate_costs, costs, rtol=1e-10)
    assert plan.chosen_index == int(np.argmin(costs))
    assert plan.predicted_cost == plan.per_candidate_costs.min()
    assert plan.per_candidate_costs.min() <= plan.per_candidate_costs[0]


def test_heavy_pose_penalty_keeps_current(chain, scene):
    base, theta, template = scene
    heavy = dataclasses.replace(template, kappa=1e9)
    plan = plan_step(chain, heavy, theta, base, CandidatePolicy(count=12), rng=candidate_rng(1, 1))
    assert plan.chosen_index == 0
    assert np.array_equal(plan.chosen, theta)
    assert not plan.pose_command.any()


def test_pose_command_consistency(chain, scene):
    base, theta, template = scene
    for step in range(8):
        plan = plan_step(chain, template, theta, base, CandidatePolicy(count=12),
                         rng=candidate_rng(2, step))
        moved = not np.array_equal(plan.chosen, theta)
        assert moved == bool(plan.pose_command.any())
        assert np.allclose(plan.pose_command, (plan.chosen - theta) / 0.1)
        assert np.allclose(plan.control, fuse_controls(plan.pose_command, plan.u_star))


def test_thread_count_does_not_change_costs(chain, scene):
    base, theta, template = scene
    pol = CandidatePolicy(count=3 * LANES + 5)
    a = plan_step(chain, template, theta, base, pol, rng=candidate_rng(9, 0), threads=1)
    b = plan_step(chain, template, theta, base, pol, rng=candidate_rng(9, 0), threads=4)
    assert chunk_count(pol.count) == 4
    assert np.array_equal(a.per_candidate_costs, b.per_candidate_costs)
    assert np.array_equal(a.control, b.control)


def test_fixed_initial_error_mode(chain, scene):
    base, theta, template = scene
    s_now = whole_body_pose(chain, base, theta)
    plan = plan_step(chain, template, theta, base, CandidatePolicy(count=12),
                     rng=candidate_rng(3, 0), e0_mode="fixed", s_current=s_now)
    assert np.allclose(plan.error0, pose_error(s_now, template.window[0]))
    with pytest.raises(ConfigurationError):
        plan_step(chain, template, theta, base, CandidatePolicy(), e0_mode="fixed")
    with pytest.raises(ConfigurationError):
        plan_step(chain, template, theta, base, CandidatePolicy(), e0_mode="other")


def test_failed_candidates_are_dropped(chain, scene):
    base, theta, template = scene
    cands = np.stack([theta, theta + 0.01])
    scores = score_candidates(chain, template, cands, theta, base)
    assert np.all(np.isfinite(scores.costs))
    nan_template = dataclasses.replace(template, window=np.full_like(template.window, np.nan))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bad = score_candidates(chain, nan_template, cands, theta, base)
    assert np.all(np.isinf(bad.costs))


def test_rate_limits_flagged(chain, scene):
    base, theta, template = scene
    plan = plan_step(chain, template, theta, base, CandidatePolicy(count=12),
                     rng=candidate_rng(0, 3), rate_limits=np.full(9, 1e-6))
    assert "rate-clamped" in plan.flags
    assert np.all(np.abs(plan.control) <= 1e-6)


def test_two_link_chain_plans():
    arm = DhParameters(np.array([[0.0, 0.0, 0.5, 0.0], [0.6, 0.0, 0.0, 0.0]]))
    base = BaseState(0.0, 0.0, 0.0)
    window = np.tile([0.7, 0.1, 0.5, 0.0, 0.0, 0.1], (4, 1))
    template = MpcProblem(np.eye(6), np.eye(3), 0.1, 3, 0.1, window, np.zeros((3, 3)))
    plan = plan_step(arm, template, np.zeros(2), base, CandidatePolicy(count=6),
                     rng=candidate_rng(0, 0))
    assert plan.control.shape == (3,)
    assert plan.predicted_cost <= plan.per_candidate_costs[0]
