"""Closed-loop Monte Carlo trials and planning-time benchmarks.

The plant integrates the same kinematic model the planner linearises:
the base follows the differential-drive update, the joints integrate
``theta += tau * omega`` (saturating at the joint limits) and the
end-effector pose comes from full forward kinematics.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    BaseState,
    ConfigurationError,
    DhParameters,
    base_step,
    forward_kinematics,
    jacobian,
    pose_error,
    reference_chain,
    whole_body_pose,
)
from .planner import CandidatePolicy, candidate_rng, plan_fixed_pose, plan_step
from .riccati import MpcProblem, NumericalFailure
from .trajectory import (
    Predictor,
    ReferenceModel,
    DRIFT_DIAG,
    make_nominal,
    predict_window,
    realize_disturbance,
)

log = logging.getLogger(__name__)

VARIANTS = ("PO-HU", "pPO-HU", "NPO-HU", "PO-NHU")

# arm posture the start configuration is solved from: elbow bent, gripper level
SEED_POSTURE = np.array([0.0, 0.0, 0.6, 0.0, -1.5, 0.0, 0.9, 0.0])
# end-effector placement in the base frame at the start (heading 0)
START_OFFSET = np.array([0.85, 0.0])

FAILURE_RATIO_LIMIT = 0.1


@dataclass(frozen=True)
class ExperimentSpec:
    trajectory: str = "curve-B"
    predictor: str = "oracle-nominal"
    q_scale: float = 1000.0
    q: float = 0.4
    H: int = 8
    tau: float = 0.1
    kappa: float = 1.0
    r_scale: float = 1.0
    variant: str = "PO-HU"
    trials: int = 20
    base_seed: int = 0
    T: int = 500
    candidates: int = 12
    radius: float = 0.1
    include_base: bool = True
    period: int = 5
    e0_mode: str = "recompute"
    threads: int = 1
    sigma_base: tuple = DRIFT_DIAG
    sigma_units: str = "variance"
    trajectory_file: str | None = None
    chain_file: str | None = None
    limits_file: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.period < 1:
            raise ConfigurationError("period must be >= 1")
        if self.q < 0 or self.q_scale < 0 or self.r_scale <= 0:
            raise ConfigurationError("weights and disturbance strength must be non-negative")
        if self.sigma_units not in ("variance", "stddev"):
            raise ConfigurationError(f"sigma_units must be variance or stddev, got {self.sigma_units!r}")
        if len(self.sigma_base) != 3 or min(self.sigma_base) < 0:
            raise ConfigurationError("sigma_base needs three non-negative entries")

    def with_variant(self, variant: str) -> "ExperimentSpec":
        return dataclasses.replace(self, variant=variant)

    def chain(self) -> DhParameters:
        if self.chain_file is None:
            return reference_chain()
        from .kinematics import load_chain
        return load_chain(self.chain_file, self.limits_file)

    def sigma(self) -> np.ndarray:
        """Per-step disturbance covariance.

        ``variance``: ``q * diag(sigma_base)``. ``stddev``: the scaled entries
        are per-axis standard deviations, ``diag((q * sigma_base) ** 2)``.
        """
        base = np.asarray(self.sigma_base, dtype=float)
        if self.sigma_units == "variance":
            return self.q * np.diag(base)
        return np.diag((self.q * base) ** 2)

    def weights(self):
        return self.q_scale * np.eye(6), self.r_scale * np.eye(9)

    def policy(self, seed: int) -> CandidatePolicy:
        return CandidatePolicy(count=self.candidates, radius=self.radius,
                               include_base=self.include_base, seed=seed)


@dataclass
class TrialRecord:
    seed: int
    variant: str
    states: np.ndarray        # s(0..T)
    references: np.ndarray    # r(0..T)
    errors: np.ndarray        # e(0..T)
    thetas: np.ndarray        # theta(0..T)
    controls: np.ndarray      # applied (fused) input, steps 0..T-1
    u_star: np.ndarray        # MPC input without the pose jump
    chosen: np.ndarray        # theta_bar per step
    switched: np.ndarray      # pose changed this step
    track_cost: np.ndarray    # e(t)'Q e(t), t = 1..T
    input_cost: np.ndarray    # u(t)'R u(t)
    pose_cost: np.ndarray     # kappa |theta_bar - theta|^2
    predicted_cost: np.ndarray
    plan_seconds: np.ndarray
    flags: dict = field(default_factory=dict)
    failed: bool = False
    failure: str | None = None

    @property
    def step_cost(self) -> np.ndarray:
        return self.track_cost + self.input_cost + self.pose_cost

    @property
    def C_total(self) -> float:
        return float(np.sum(self.step_cost))

    def accumulated(self) -> np.ndarray:
        return np.cumsum(self.step_cost)


def _solve_posture(chain: DhParameters, target, seed_theta, iters=200):
    """Damped least-squares IK in the base frame (joint 0 held at zero)."""
    theta = np.array(seed_theta, dtype=float)
    for _ in range(iters):
        err = pose_error(forward_kinematics(chain, theta), target)
        if np.max(np.abs(err)) < 1e-12:
            break
        J = jacobian(chain, theta)[:, 1:]
        step = J.T @ np.linalg.solve(J @ J.T + 1e-6 * np.eye(6), err)
        theta[1:] = np.clip(theta[1:] - step, chain.lower[1:], chain.upper[1:])
    return theta


def initial_state(chain: DhParameters, r0):
    """Base and joints that put the end effector on ``r0`` (position and yaw)."""
    target = np.array([START_OFFSET[0], START_OFFSET[1], r0[2], r0[3], r0[4], 0.0])
    theta = _solve_posture(chain, target, SEED_POSTURE)
    theta[0] = r0[5]
    s_arm = forward_kinematics(chain, theta)
    base = BaseState(float(r0[0] - s_arm[0]), float(r0[1] - s_arm[1]), float(theta[0]))
    return base, theta


def _window(pred, realized, nominal, k, H):
    window, clamped = predict_window(pred, realized[:k + 1], nominal, k, H)
    # expected future reference carries the disturbance accumulated so far
    window[:, :3] += realized[k, :3] - window[0, :3]
    return window, clamped


def run_trial(spec: ExperimentSpec, seed: int, *, chain=None, nominal=None,
              variant_path="dedicated", steps=None, on_plan=None) -> TrialRecord:
    """One closed-loop run of ``spec.variant`` on a freshly disturbed trajectory.

    ``variant_path="reduction"`` runs the baselines through the general
    planner instead (NPO-HU as a one-candidate set, PO-NHU as a zero planner
    covariance); both paths must agree bit for bit. ``steps`` stops early;
    ``on_plan(k, plan)`` sees every plan before it is applied.
    """
    chain = spec.chain() if chain is None else chain
    if nominal is None:
        nominal = make_nominal(spec.trajectory, spec.T, spec.tau, spec.trajectory_file)
    Q, R = spec.weights()
    sigma = spec.sigma()
    traj = realize_disturbance(ReferenceModel(nominal, sigma, seed))
    realized = traj.realized
    pred = Predictor(spec.predictor)
    T = len(nominal) - 1 if steps is None else min(len(nominal) - 1, steps)

    base, theta = initial_state(chain, realized[0])
    s = whole_body_pose(chain, base, theta)

    states = np.zeros((T + 1, 6))
    errors = np.zeros((T + 1, 6))
    thetas = np.zeros((T + 1, chain.n_joints))
    controls = np.zeros((T, chain.n_joints + 1))
    u_star = np.zeros_like(controls)
    chosen = np.zeros((T, chain.n_joints))
    switched = np.zeros(T, dtype=bool)
    track = np.zeros(T)
    inp = np.zeros(T)
    pose_c = np.zeros(T)
    predicted = np.zeros(T)
    plan_s = np.zeros(T)
    flags: dict[str, int] = {}
    states[0], thetas[0] = s, theta
    errors[0] = pose_error(s, realized[0])

    full_policy = spec.policy(seed)
    single = dataclasses.replace(full_policy, count=1)
    failed, failure, done = False, None, T
    for k in range(T):
        window, clamped = _window(pred, realized, nominal, k, spec.H)
        if clamped:
            flags["window-clamped"] = flags.get("window-clamped", 0) + 1
        planner_sigma = sigma
        if spec.variant == "PO-NHU" and variant_path == "reduction":
            planner_sigma = np.zeros((3, 3))
        template = MpcProblem(Q, R, spec.kappa, spec.H, spec.tau, window, planner_sigma)
        t0 = time.perf_counter()
        try:
            if spec.variant == "NPO-HU" and variant_path == "dedicated":
                plan = plan_fixed_pose(chain, template, theta, base)
            else:
                policy = full_policy
                if spec.variant == "NPO-HU" or (spec.variant == "pPO-HU" and k % spec.period):
                    policy = single
                blind = spec.variant == "PO-NHU" and variant_path == "dedicated"
                plan = plan_step(chain, template, theta, base, policy,
                                 rng=candidate_rng(seed, k), e0_mode=spec.e0_mode,
                                 s_current=s, include_disturbance=not blind,
                                 threads=spec.threads)
        except (NumericalFailure, np.linalg.LinAlgError, ConfigurationError) as exc:
            failed, failure, done = True, f"step {k}: {exc}", k
            log.warning("trial %d (%s) failed at step %d: %s", seed, spec.variant, k, exc)
            break
        plan_s[k] = time.perf_counter() - t0
        if on_plan is not None:
            on_plan(k, plan)
        for f in plan.flags:
            flags[f] = flags.get(f, 0) + 1

        u = plan.control
        theta_bar = plan.chosen
        omega = u[1:]
        base = base_step(base, u[0], omega[0], spec.tau)
        new_theta = theta + spec.tau * omega
        sat = np.clip(new_theta, chain.lower, chain.upper)
        if np.any(sat != new_theta):
            flags["joint-saturated"] = flags.get("joint-saturated", 0) + 1
        theta_next = sat
        s_next = whole_body_pose(chain, base, theta_next)
        e_next = pose_error(s_next, realized[k + 1])

        controls[k], u_star[k], chosen[k] = u, plan.u_star, theta_bar
        switched[k] = plan.chosen_index != 0
        track[k] = e_next @ Q @ e_next
        inp[k] = plan.u_star @ R @ plan.u_star
        pose_c[k] = spec.kappa * np.sum((theta_bar - theta) ** 2)
        predicted[k] = plan.predicted_cost
        theta, s = theta_next, s_next
        states[k + 1], thetas[k + 1], errors[k + 1] = s, theta, e_next

    cut = slice(0, done)
    return TrialRecord(
        seed=seed, variant=spec.variant,
        states=states[:done + 1], references=realized[:done + 1], errors=errors[:done + 1],
        thetas=thetas[:done + 1], controls=controls[cut], u_star=u_star[cut],
        chosen=chosen[cut], switched=switched[cut], track_cost=track[cut],
        input_cost=inp[cut], pose_cost=pose_c[cut], predicted_cost=predicted[cut],
        plan_seconds=plan_s[cut], flags=flags, failed=failed, failure=failure)


def recompute_total(record: TrialRecord, Q, R, kappa) -> float:
    """C_total rebuilt from the stored errors, inputs and poses."""
    e = record.errors[1:]
    u = record.u_star
    dth = record.chosen - record.thetas[:-1]
    return float(np.sum(np.einsum("ti,ij,tj->t", e, Q, e)
                        + np.einsum("ti,ij,tj->t", u, R, u)
                        + kappa * np.sum(dth ** 2, axis=1)))


@dataclass
class AggregateReport:
    variant: str
    totals: list
    seeds: list
    failed_seeds: list
    mean: float
    std: float
    curve: np.ndarray          # mean accumulated cost per step over completed trials
    plan_ms_mean: float
    plan_ms_median: float
    unreliable: bool
    spec: ExperimentSpec

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mean_C_total": self.mean,
            "std_C_total": self.std,
            "completed": len(self.totals),
            "failed_seeds": self.failed_seeds,
            "unreliable": self.unreliable,
            "C_total": dict(zip(map(str, self.seeds), self.totals)),
            "plan_ms_mean": self.plan_ms_mean,
            "plan_ms_median": self.plan_ms_median,
        }


def _trial_job(args):
    spec, seed = args
    return run_trial(spec, seed)


def run_experiment(spec: ExperimentSpec, *, workers: int = 1, keep_records=False):
    """Run ``spec.trials`` trials on seeds ``base_seed .. base_seed + trials - 1``.

    Returns the report, plus the trial records when ``keep_records``.
    """
    seeds = [spec.base_seed + i for i in range(spec.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_trial_job, [(spec, s) for s in seeds]))
    else:
        chain = spec.chain()
        nominal = make_nominal(spec.trajectory, spec.T, spec.tau, spec.trajectory_file)
        records = [run_trial(spec, s, chain=chain, nominal=nominal) for s in seeds]
    report = aggregate(spec, records)
    return (report, records) if keep_records else report


def aggregate(spec: ExperimentSpec, records) -> AggregateReport:
    done = [r for r in records if not r.failed]
    totals = [r.C_total for r in done]
    curves = np.array([r.accumulated() for r in done]) if done else np.zeros((0, 0))
    plan = np.concatenate([r.plan_seconds for r in done]) if done else np.zeros(0)
    failed = [r.seed for r in records if r.failed]
    return AggregateReport(
        variant=spec.variant,
        totals=totals,
        seeds=[r.seed for r in done],
        failed_seeds=failed,
        mean=float(np.mean(totals)) if totals else float("nan"),
        std=float(np.std(totals)) if totals else float("nan"),
        curve=curves.mean(axis=0) if len(done) else np.zeros(0),
        plan_ms_mean=float(plan.mean() * 1e3) if plan.size else float("nan"),
        plan_ms_median=float(np.median(plan) * 1e3) if plan.size else float("nan"),
        unreliable=len(failed) > FAILURE_RATIO_LIMIT * len(records),
        spec=spec,
    )


def compare_variants(spec: ExperimentSpec, variants=VARIANTS, **kw) -> dict:
    return {v: run_experiment(spec.with_variant(v), **kw) for v in variants}


def benchmark_planning(spec: ExperimentSpec, candidate_counts=(1, 12), horizons=(3, 5, 8),
                       thread_widths=(1,), n_plans=500, warmup=20):
    """Wall-clock statistics of ``plan_step`` per (candidates, H, threads).

    Configurations are timed round-robin, one plan each per round, so slow
    drift in machine speed affects every row alike.
    """
    chain = spec.chain()
    nominal = make_nominal(spec.trajectory, spec.T, spec.tau, spec.trajectory_file)
    Q, R = spec.weights()
    base, theta = initial_state(chain, nominal[0])
    configs = [(count, H, width) for count in candidate_counts
               for H in horizons for width in thread_widths]
    samples = {cfg: [] for cfg in configs}
    for i in range(warmup + n_plans):
        k = i % max(1, len(nominal) - 1)
        for count, H, width in configs:
            policy = dataclasses.replace(spec.policy(spec.base_seed), count=count)
            window, _ = predict_window(Predictor(), None, nominal, k, H)
            window[:, :3] += nominal[0, :3] - window[0, :3]
            template = MpcProblem(Q, R, spec.kappa, H, spec.tau, window, spec.sigma())
            t0 = time.perf_counter()
            plan_step(chain, template, theta, base, policy,
                      rng=candidate_rng(spec.base_seed, i), threads=width)
            if i >= warmup:
                samples[(count, H, width)].append(time.perf_counter() - t0)
    rows = []
    for (count, H, width), times in samples.items():
        ms = np.array(times) * 1e3
        rows.append({"candidates": count, "H": H, "threads": width, "plans": n_plans,
                     "median_ms": float(np.median(ms)), "mean_ms": float(ms.mean()),
                     "p90_ms": float(np.percentile(ms, 90))})
    return rows
