"""Whole-body kinematics of a differential-drive mobile manipulator.

Poses are plain arrays ``[x, y, z, roll, pitch, yaw]`` with ZYX intrinsic
Euler angles (``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``). Joint vectors are
``[phi, theta_2, ..., theta_8]`` where ``phi`` is the base heading treated as
the first revolute joint of the arm, pivoting about the origin of the shifted
base frame. Functions accept a single joint vector or a stack of them with
shape ``(..., n)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

# cond(E) above this means the Euler-rate map is numerically singular
EULER_COND_LIMIT = 1e8

POSE_DIM = 6
INPUT_DIM = 9


class ConfigurationError(ValueError):
    """Invalid chain, joint vector or model configuration."""


class ConsistencyError(ValueError):
    """Base heading and joint vector disagree."""


class OrientationSingularityWarning(RuntimeWarning):
    """End-effector pitch is close enough to +-pi/2 to break Euler rates."""


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class DhParameters:
    """Standard DH table, base to tip, one row ``(a, alpha, d, theta_offset)`` per joint.

    ``tool`` holds fixed rows appended after the last joint. ``lower`` and
    ``upper`` are per-joint box limits in radians.
    """

    rows: np.ndarray
    tool: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        tool = np.asarray(self.tool, dtype=float).reshape(-1, 4)
        if rows.ndim != 2 or rows.shape[1] != 4 or rows.shape[0] < 1:
            raise ConfigurationError(f"DH table must be (n>=1, 4), got {rows.shape}")
        if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(tool))):
            raise ConfigurationError("DH table contains non-finite entries")
        n = rows.shape[0]
        lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if lower.shape != (n,) or upper.shape != (n,):
            raise ConfigurationError(f"joint limits must have {n} rows")
        if np.any(lower > upper):
            raise ConfigurationError("joint limit lower bound exceeds upper bound")
        for name, value in (("rows", rows), ("tool", tool), ("lower", lower), ("upper", upper)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_joints(self) -> int:
        return self.rows.shape[0]

    def within_limits(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)


def _parse_table(path: Path, width: int):
    rows, tool = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        target = rows
        if parts[0] == "tool":
            target, parts = tool, parts[1:]
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
        if len(values) != width:
            raise ConfigurationError(f"{path}:{lineno}: expected {width} numbers, got {len(values)}")
        target.append(values)
    return rows, tool


def load_chain(dh_path, limits_path=None) -> DhParameters:
    """Read a DH chain file and an optional joint-limit file.

    Chain rows are ``a alpha d theta_offset``; lines starting with ``tool``
    are fixed trailing transforms. Limit rows are ``lower upper``.
    """
    rows, tool = _parse_table(dh_path, 4)
    if not rows:
        raise ConfigurationError(f"{dh_path}: no joint rows")
    lower = upper = None
    if limits_path is not None:
        lims, _ = _parse_table(limits_path, 2)
        lims = np.asarray(lims, dtype=float).reshape(-1, 2)
        if len(lims) != len(rows):
            raise ConfigurationError(
                f"{limits_path}: {len(lims)} limit rows for {len(rows)} joints")
        lower, upper = lims[:, 0], lims[:, 1]
    return DhParameters(np.array(rows), np.array(tool).reshape(-1, 4), lower, upper)


def reference_chain() -> DhParameters:
    """The shipped 8-DOF chain (base heading + 7-DOF arm) with joint limits."""
    data = resources.files("pose_mpc") / "data"
    with resources.as_file(data / "fetch_dh.txt") as dh, \
            resources.as_file(data / "fetch_limits.txt") as lim:
        return load_chain(dh, lim)


def dh_transform(a, alpha, d, theta) -> np.ndarray:
    """Homogeneous transform ``Rz(theta) Tz(d) Tx(a) Rx(alpha)``; broadcasts over theta."""
    theta = np.asarray(theta, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(theta.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def _check_theta(chain: DhParameters, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0 or theta.shape[-1] != chain.n_joints:
        raise ConfigurationError(
            f"joint vector has {theta.shape[-1] if theta.ndim else 0} entries, "
            f"chain has {chain.n_joints}")
    return theta


def joint_frames(chain: DhParameters, theta):
    """Frames preceding each joint plus the tool frame.

    Returns ``(frames, tip)`` where ``frames[..., i, :, :]`` is the transform of
    the frame whose z axis is joint ``i``'s rotation axis.
    """
    theta = _check_theta(chain, theta)
    batch = theta.shape[:-1]
    frames = np.empty(batch + (chain.n_joints, 4, 4))
    T = np.broadcast_to(np.eye(4), batch + (4, 4))
    for i, (a, alpha, d, offset) in enumerate(chain.rows):
        frames[..., i, :, :] = T
        T = T @ dh_transform(a, alpha, d, theta[..., i] + offset)
    for a, alpha, d, offset in chain.tool:
        T = T @ dh_transform(a, alpha, d, offset)
    return frames, T


def rotation_to_rpy(R) -> np.ndarray:
    """ZYX Euler angles ``(roll, pitch, yaw)`` of rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R)
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    pitch = np.arctan2(-R[..., 2, 0], np.hypot(R[..., 0, 0], R[..., 1, 0]))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return np.stack([roll, pitch, yaw], axis=-1)


def rpy_to_rotation(rpy) -> np.ndarray:
    rpy = np.asarray(rpy, dtype=float)
    cr, sr = np.cos(rpy[..., 0]), np.sin(rpy[..., 0])
    cp, sp = np.cos(rpy[..., 1]), np.sin(rpy[..., 1])
    cy, sy = np.cos(rpy[..., 2]), np.sin(rpy[..., 2])
    R = np.empty(rpy.shape[:-1] + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def forward_kinematics(chain: DhParameters, theta) -> np.ndarray:
    """End-effector pose in the shifted base frame (translation-only offset from inertial)."""
    _, tip = joint_frames(chain, theta)
    return np.concatenate([tip[..., :3, 3], rotation_to_rpy(tip[..., :3, :3])], axis=-1)


def euler_rate_matrix(rpy) -> np.ndarray:
    """Map ``E`` with ``omega = E @ [roll_dot, pitch_dot, yaw_dot]`` (space-frame omega)."""
    rpy = np.asarray(rpy, dtype=float)
    cp, sp = np.cos(rpy[..., 1]), np.sin(rpy[..., 1])
    cy, sy = np.cos(rpy[..., 2]), np.sin(rpy[..., 2])
    E = np.zeros(rpy.shape[:-1] + (3, 3))
    E[..., 0, 0] = cy * cp
    E[..., 1, 0] = sy * cp
    E[..., 2, 0] = -sp
    E[..., 0, 1] = -sy
    E[..., 1, 1] = cy
    E[..., 2, 2] = 1.0
    return E


def orientation_singular(rpy) -> np.ndarray:
    """True where the Euler-rate map has condition number above ``EULER_COND_LIMIT``."""
    rpy = np.asarray(rpy, dtype=float)
    near = np.abs(np.cos(rpy[..., 1])) < 1e-4
    if not np.any(near):
        return near
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(euler_rate_matrix(rpy))
    return ~(cond <= EULER_COND_LIMIT)


def jacobian_and_pose(chain: DhParameters, theta):
    """Analytic Jacobian ``(..., 6, n)`` of :func:`forward_kinematics` plus the pose itself.

    Linear rows are ``z_i x (p_tip - o_i)``; angular rows are the joint axes
    mapped to Euler-angle rates. Near pitch = +-pi/2 an
    :class:`OrientationSingularityWarning` is emitted and the angular rows
    come from a least-squares solve.
    """
    frames, tip = joint_frames(chain, theta)
    z = frames[..., :3, 2]
    o = frames[..., :3, 3]
    p = tip[..., :3, 3]
    rpy = rotation_to_rpy(tip[..., :3, :3])
    lin = np.cross(z, p[..., None, :] - o)
    E = euler_rate_matrix(rpy)
    singular = orientation_singular(rpy)
    if np.any(singular):
        warnings.warn(
            "end-effector pitch near +-pi/2; Euler-rate Jacobian ill-conditioned",
            OrientationSingularityWarning, stacklevel=2)
        ang = np.linalg.pinv(E) @ np.swapaxes(z, -1, -2)
    else:
        ang = np.linalg.solve(E, np.swapaxes(z, -1, -2))
    J = np.concatenate([np.swapaxes(lin, -1, -2), ang], axis=-2)
    pose = np.concatenate([p, rpy], axis=-1)
    return J, pose


def jacobian(chain: DhParameters, theta) -> np.ndarray:
    return jacobian_and_pose(chain, theta)[0]


@dataclass(frozen=True)
class BaseState:
    x: float
    y: float
    phi: float  # unwrapped

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])


def base_step(state: BaseState, v: float, eta: float, tau: float) -> BaseState:
    """One Euler step of the differential-drive model."""
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite([state.x, state.y, state.phi, v, eta, tau])):
        raise ConfigurationError("non-finite base state or input")
    return BaseState(
        state.x + tau * v * np.cos(state.phi),
        state.y + tau * v * np.sin(state.phi),
        state.phi + tau * eta,
    )


def input_matrix_from_jacobian(J, phi, tau: float) -> np.ndarray:
    """Assemble ``tau * [base column | J]`` from a precomputed Jacobian."""
    J = np.asarray(J)
    phi = np.asarray(phi, dtype=float)
    B = np.zeros(J.shape[:-2] + (POSE_DIM, J.shape[-1] + 1))
    B[..., 0, 0] = np.cos(phi)
    B[..., 1, 0] = np.sin(phi)
    B[..., :, 1:] = J
    return tau * B


def whole_body_input_matrix(chain: DhParameters, theta, tau: float) -> np.ndarray:
    """Input matrix ``B(theta)`` (6 x 9 for the reference chain) of ``s(k+1) = s(k) + B u(k)``.

    Column 0 is the base linear velocity, column 1 the base heading rate,
    the rest the arm joint rates.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    theta = _check_theta(chain, theta)
    return input_matrix_from_jacobian(jacobian(chain, theta), theta[..., 0], tau)


def whole_body_pose(chain: DhParameters, base: BaseState, theta) -> np.ndarray:
    """Inertial end-effector pose: arm pose in the shifted frame plus the base position."""
    theta = _check_theta(chain, theta)
    if theta.ndim != 1:
        raise ConfigurationError("whole_body_pose takes a single joint vector")
    if theta[0] != base.phi:
        raise ConsistencyError(
            f"base heading {base.phi!r} differs from joint 0 {theta[0]!r}")
    s = forward_kinematics(chain, theta)
    s[0] += base.x
    s[1] += base.y
    return s


def pose_error(s, r) -> np.ndarray:
    """``s - r`` with orientation differences wrapped to [-pi, pi)."""
    e = np.asarray(s, dtype=float) - np.asarray(r, dtype=float)
    e[..., 3:] = wrap_angle(e[..., 3:])
    return e
