"""Sampling-based pose optimisation around the disturbance-aware Riccati solver.

Each planning step samples joint configurations around the current one,
scores every candidate by its expected cost-to-go under its own frozen input
matrix, picks the cheapest, and fuses the pose jump with the first optimal
input.

Candidates are scored in lanes: a chunk of up to ``LANES`` candidates goes
through one broadcast pass of the kinematics and the Riccati recursion.
With more candidates than one chunk holds, chunks are fanned out to a
thread pool. The chunking is fixed, so thread count never changes results.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    BaseState,
    ConfigurationError,
    DhParameters,
    OrientationSingularityWarning,
    input_matrix_from_jacobian,
    jacobian_and_pose,
    pose_error,
)
from .riccati import MpcProblem, NumericalFailure, RiccatiSolution, cost_to_go, extract_control, solve_dare

LANES = 16


class DegenerateCandidateWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CandidatePolicy:
    """How the candidate set is drawn.

    ``count`` includes the current configuration. Each extra candidate
    perturbs a random subset of ``eligible`` joints (size uniform in
    ``1..len(eligible)``) by ``uniform(-radius, radius)``.
    """

    count: int = 12
    radius: float = 0.1
    include_base: bool = True
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError("candidate count must be >= 1")
        if not self.radius > 0:
            raise ConfigurationError("perturbation radius must be positive")


def sample_candidates(policy: CandidatePolicy, theta0, lower=None, upper=None, rng=None):
    """Candidate set ``(count, n)`` with ``theta0`` in row 0.

    Out-of-limit draws are retried ``policy.max_retries`` times and then
    clamped; a clamped draw that collapses onto ``theta0`` is dropped. If no
    perturbed candidate survives, ``[theta0]`` is returned with a
    :class:`DegenerateCandidateWarning`.
    """
    theta0 = np.asarray(theta0, dtype=float)
    n = theta0.shape[0]
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if np.any(theta0 < lower) or np.any(theta0 > upper):
        raise ConfigurationError("current configuration violates joint limits")
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    eligible = np.arange(n) if policy.include_base else np.arange(1, n)

    out = [theta0]
    for _ in range(policy.count - 1):
        for _attempt in range(policy.max_retries + 1):
            size = rng.integers(1, len(eligible) + 1)
            joints = rng.choice(eligible, size=size, replace=False)
            cand = theta0.copy()
            cand[joints] += rng.uniform(-policy.radius, policy.radius, size=size)
            if np.all((cand >= lower) & (cand <= upper)):
                break
        else:
            cand = np.clip(cand, lower, upper)
        if not np.array_equal(cand, theta0):
            out.append(cand)
    if len(out) == 1 and policy.count > 1:
        warnings.warn("joint limits leave no room to perturb; candidate set is {theta0}",
                      DegenerateCandidateWarning, stacklevel=2)
    return np.array(out)


def fuse_controls(pose_command, u_star) -> np.ndarray:
    """Add the pose-change rates to the angular channels of ``u_star``; ``v`` is untouched."""
    u = np.array(u_star, dtype=float)
    u[1:] += np.asarray(pose_command, dtype=float)
    return u


def clamp_rates(u, limits):
    """Clip ``u`` to ``+-limits`` componentwise; returns ``(u, clipped)``."""
    if limits is None:
        return u, False
    limits = np.asarray(limits, dtype=float)
    clipped = np.clip(u, -limits, limits)
    return clipped, bool(np.any(clipped != u))


@dataclass
class CandidateScores:
    candidates: np.ndarray
    costs: np.ndarray
    errors: np.ndarray
    solution: RiccatiSolution


@dataclass
class PlanResult:
    chosen: np.ndarray
    chosen_index: int
    pose_command: np.ndarray
    control: np.ndarray
    u_star: np.ndarray
    predicted_cost: float
    per_candidate_costs: np.ndarray
    candidates: np.ndarray
    error0: np.ndarray
    solution: RiccatiSolution = field(repr=False)
    flags: list = field(default_factory=list)


def _score_chunk(chain, template, candidates, theta0, base, s_fixed, include_disturbance):
    J, pose = jacobian_and_pose(chain, candidates)
    B = input_matrix_from_jacobian(J, candidates[..., 0], template.tau)
    r0 = template.window[0]
    if s_fixed is None:
        s = pose.copy()
        s[..., 0] += base.x
        s[..., 1] += base.y
    else:
        s = np.broadcast_to(s_fixed, pose.shape)
    e0 = pose_error(s, r0)
    sol = solve_dare(template.with_input_matrix(B), candidates, theta0,
                     include_disturbance=include_disturbance, check=False)
    return cost_to_go(sol, e0), e0, sol


def _stack_solutions(parts):
    if len(parts) == 1:
        return parts[0]
    return RiccatiSolution(
        np.concatenate([s.P for s in parts], axis=1),
        np.concatenate([s.p for s in parts], axis=1),
        np.concatenate([s.c for s in parts], axis=1),
        np.concatenate([s.M for s in parts], axis=1),
        parts[0].steps,
    )


def score_candidates(chain: DhParameters, template: MpcProblem, candidates, theta0,
                     base: BaseState, *, s_fixed=None, include_disturbance=True,
                     threads=1) -> CandidateScores:
    """Expected cost-to-go of every candidate (``inf`` where the recursion failed).

    With ``s_fixed`` the initial error uses that pose for every candidate
    instead of the candidate's own forward kinematics.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    chunks = [candidates[i:i + LANES] for i in range(0, len(candidates), LANES)]

    def run(chunk):
        with np.errstate(all="ignore"):
            return _score_chunk(chain, template, chunk, theta0, base, s_fixed, include_disturbance)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    costs = np.concatenate([p[0] for p in parts])
    errors = np.concatenate([p[1] for p in parts])
    sol = _stack_solutions([p[2] for p in parts])
    costs = np.where(np.isfinite(costs), costs, np.inf)
    return CandidateScores(candidates, costs, errors, sol)


def select_candidate(costs) -> int:
    """Index of the cheapest candidate; ties go to index 0, then the lowest index."""
    costs = np.asarray(costs)
    best = costs.min()
    if costs[0] == best:
        return 0
    return int(np.flatnonzero(costs == best)[0])


def _member(sol: RiccatiSolution, i: int) -> RiccatiSolution:
    return RiccatiSolution(sol.P[:, i], sol.p[:, i], sol.c[:, i], sol.M[:, i], sol.steps)


def _finish(scores: CandidateScores, theta0, tau, rate_limits, flags) -> PlanResult:
    costs = scores.costs
    if not np.any(np.isfinite(costs)):
        raise NumericalFailure("every candidate failed, including the current pose")
    idx = select_candidate(costs)
    if not np.isfinite(costs[0]):
        flags.append("current-pose-failed")
    if np.any(~np.isfinite(costs)):
        flags.append("candidate-failed")
    chosen = scores.candidates[idx]
    sol = _member(scores.solution, idx)
    e0 = scores.errors[idx]
    u_star = extract_control(sol, e0, 0)
    pose_command = (chosen - theta0) / tau
    control, clipped = clamp_rates(fuse_controls(pose_command, u_star), rate_limits)
    if clipped:
        flags.append("rate-clamped")
    return PlanResult(
        chosen=chosen, chosen_index=idx, pose_command=pose_command, control=control,
        u_star=u_star, predicted_cost=float(costs[idx]), per_candidate_costs=costs,
        candidates=scores.candidates, error0=e0, solution=sol, flags=flags)


def plan_step(chain: DhParameters, template: MpcProblem, theta0, base: BaseState,
              policy: CandidatePolicy, *, rng=None, e0_mode="recompute", s_current=None,
              include_disturbance=True, threads=1, rate_limits=None) -> PlanResult:
    """One planning step: sample, score, select, fuse.

    ``template.window`` holds the ``H + 1`` references with ``window[0]`` the
    current reference. ``e0_mode="fixed"`` scores every candidate from the
    current pose ``s_current`` instead of recomputing it per candidate.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if e0_mode not in ("recompute", "fixed"):
        raise ConfigurationError(f"unknown e0 mode {e0_mode!r}")
    if e0_mode == "fixed" and s_current is None:
        raise ConfigurationError("fixed e0 mode needs the current pose")
    flags = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        candidates = sample_candidates(policy, theta0, chain.lower, chain.upper, rng=rng)
        scores = score_candidates(
            chain, template, candidates, theta0, base,
            s_fixed=s_current if e0_mode == "fixed" else None,
            include_disturbance=include_disturbance, threads=threads)
    for w in caught:
        if issubclass(w.category, DegenerateCandidateWarning):
            flags.append("degenerate-candidates")
        elif issubclass(w.category, OrientationSingularityWarning):
            flags.append("orientation-singular")
    return _finish(scores, theta0, template.tau, rate_limits, flags)


def plan_fixed_pose(chain: DhParameters, template: MpcProblem, theta0, base: BaseState, *,
                    include_disturbance=True, rate_limits=None) -> PlanResult:
    """Plain disturbance-aware MPC at the current pose (no pose optimisation)."""
    theta0 = np.asarray(theta0, dtype=float)
    flags = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        J, pose = jacobian_and_pose(chain, theta0)
    if any(issubclass(w.category, OrientationSingularityWarning) for w in caught):
        flags.append("orientation-singular")
    B = input_matrix_from_jacobian(J, theta0[0], template.tau)
    s = pose.copy()
    s[0] += base.x
    s[1] += base.y
    e0 = pose_error(s, template.window[0])
    sol = solve_dare(template.with_input_matrix(B), theta0, theta0,
                     include_disturbance=include_disturbance)
    u_star = extract_control(sol, e0, 0)
    control, clipped = clamp_rates(u_star, rate_limits)
    if clipped:
        flags.append("rate-clamped")
    cost = float(cost_to_go(sol, e0))
    return PlanResult(
        chosen=theta0.copy(), chosen_index=0, pose_command=np.zeros_like(theta0),
        control=control, u_star=u_star, predicted_cost=cost,
        per_candidate_costs=np.array([cost]), candidates=theta0[None].copy(),
        error0=e0, solution=sol, flags=flags)


def candidate_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step sampling stream, shared by every variant run with the same seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def chunk_count(n_candidates: int) -> int:
    return math.ceil(n_candidates / LANES)
