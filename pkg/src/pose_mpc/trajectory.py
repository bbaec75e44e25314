"""Reference trajectories with cumulative Gaussian positional disturbance.

A realized reference is ``r(k) = r_nom(k) + D @ sum_{j<=k} w(j)`` with
``w(j) ~ N(0, Sigma)`` and ``D = [I3; 0]``, so only the position channels are
disturbed. The accumulation starts at ``j = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import ConfigurationError

# Per-axis disturbance variances (m^2) scaled by the strength q.
DRIFT_DIAG = (0.015, 0.025, 0.015)

INJECTION = np.vstack([np.eye(3), np.zeros((3, 3))])
INJECTION.setflags(write=False)

CRUISE_SPEED = 0.5  # m/s
EE_HEIGHT = 0.9  # m


def drift_covariance(q: float) -> np.ndarray:
    return q * np.diag(DRIFT_DIAG)


def _heading_poses(xy: np.ndarray, z: float, length: float) -> np.ndarray:
    # uniform rescale to the cruise arc length; turn angles are scale-free
    arc = np.linalg.norm(np.diff(xy, axis=0), axis=1).sum()
    xy = (xy - xy[0]) * (length / arc) + xy[0]
    d = np.gradient(xy, axis=0)
    yaw = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    poses = np.zeros((len(xy), 6))
    poses[:, :2] = xy
    poses[:, 2] = z
    poses[:, 5] = yaw
    return poses


def _curve_a(T: int, tau: float) -> np.ndarray:
    # gentle sine weave
    n = T + 1
    s = np.linspace(0.0, CRUISE_SPEED * tau * T, n)
    x = s
    y = 1.0 * np.sin(2 * np.pi * s / 12.5)
    # re-sample at constant arc length so speed is uniform
    xy = _resample_arclength(np.column_stack([x, y]), n)
    return _heading_poses(xy, EE_HEIGHT, CRUISE_SPEED * tau * T)


_CURVE_B_WAYPOINTS = np.array([
    [0.0, 0.0], [4.0, 0.0], [5.5, 2.5], [9.0, 2.5],
    [10.0, -0.5], [14.0, -0.5], [15.0, 2.0], [18.0, 2.0],
    [19.5, -1.0], [24.0, -1.0],
])


def _curve_b(T: int, tau: float) -> np.ndarray:
    # polyline with rounded corners
    n = T + 1
    length = CRUISE_SPEED * tau * T
    wp = _CURVE_B_WAYPOINTS
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    wp = wp * (length / seg.sum())
    dense = _resample_arclength(wp, 20 * n)
    k = 7 * 20
    kernel = np.ones(k) / k
    pad = np.vstack([np.repeat(dense[:1], k, 0), dense, np.repeat(dense[-1:], k, 0)])
    smooth = np.column_stack([np.convolve(pad[:, i], kernel, mode="same") for i in range(2)])
    smooth = smooth[k:-k]
    xy = _resample_arclength(smooth, n)
    return _heading_poses(xy, EE_HEIGHT, length)


def _resample_arclength(xy: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(target, s, xy[:, i]) for i in range(xy.shape[1])])


def make_nominal(kind: str, T: int, tau: float, path=None) -> np.ndarray:
    """Nominal poses ``(T + 1, 6)`` for ``kind`` in ``{"curve-A", "curve-B", "file"}``.

    curve-A is a smooth weave, curve-B a polyline with sharp rounded turns.
    Both cruise at 0.5 m/s with the end-effector yaw following the path
    heading. ``file`` loads poses verbatim from ``path``.
    """
    if T < 2:
        raise ConfigurationError(f"T must be >= 2, got {T}")
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if kind == "curve-A":
        return _curve_a(T, tau)
    if kind == "curve-B":
        return _curve_b(T, tau)
    if kind == "file":
        if path is None:
            raise ConfigurationError("file trajectory requires a path")
        poses = load_trajectory(path)
        if len(poses) != T + 1:
            raise ConfigurationError(f"{path}: {len(poses)} poses, expected T+1 = {T + 1}")
        return poses
    raise ConfigurationError(f"unknown trajectory kind {kind!r}")


def turn_angles(poses: np.ndarray) -> np.ndarray:
    """Heading change between consecutive planar displacement vectors."""
    d = np.diff(np.asarray(poses)[:, :2], axis=0)
    h = np.arctan2(d[:, 1], d[:, 0])
    return np.abs((np.diff(h) + np.pi) % (2 * np.pi) - np.pi)


def load_trajectory(path) -> np.ndarray:
    """One pose per line: ``x y z roll pitch yaw``; ``#`` starts a comment."""
    try:
        poses = np.loadtxt(path, comments="#", ndmin=2)
    except (ValueError, OSError) as exc:
        raise ConfigurationError(f"cannot parse trajectory {path}: {exc}") from None
    if poses.shape[1] != 6 or not np.all(np.isfinite(poses)):
        raise ConfigurationError(f"{path}: expected 6 finite fields per line")
    return poses


def save_trajectory(path, poses, *, seed=None, sigma=None) -> None:
    header = []
    if seed is not None:
        header.append(f"seed {seed}")
    if sigma is not None:
        header.append("sigma " + " ".join(repr(float(v)) for v in np.ravel(sigma)))
    header.append("x y z roll pitch yaw")
    np.savetxt(Path(path), np.asarray(poses), fmt="%.17g", header="\n".join(header))


def symmetric_sqrt(sigma: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; rejects non-PSD input."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (3, 3) or not np.all(np.isfinite(sigma)):
        raise ConfigurationError("sigma must be a finite 3x3 matrix")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
        raise ConfigurationError("sigma is not symmetric")
    w, V = np.linalg.eigh(sigma)
    tol = 1e-12 * max(1.0, np.abs(w).max())
    if w.min() < -tol:
        raise ConfigurationError(f"sigma is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True)
class ReferenceModel:
    nominal: np.ndarray
    sigma: np.ndarray
    seed: int = 0
    injection: np.ndarray = field(default=INJECTION, repr=False)

    def __post_init__(self):
        nominal = np.asarray(self.nominal, dtype=float)
        if nominal.ndim != 2 or nominal.shape[1] != 6 or not np.all(np.isfinite(nominal)):
            raise ConfigurationError("nominal must be a finite (T+1, 6) array")
        if not np.array_equal(self.injection, INJECTION):
            raise ConfigurationError("injection matrix must be [I3; 0]")
        symmetric_sqrt(self.sigma)
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))


@dataclass(frozen=True)
class DisturbedTrajectory:
    realized: np.ndarray
    draws: np.ndarray
    seed: int


def realize_disturbance(model: ReferenceModel) -> DisturbedTrajectory:
    """Draw ``w(0..T)`` and accumulate them onto the nominal positions."""
    root = symmetric_sqrt(model.sigma)
    rng = np.random.default_rng(model.seed)
    draws = rng.standard_normal((len(model.nominal), 3)) @ root
    realized = model.nominal + np.cumsum(draws, axis=0) @ model.injection.T
    return DisturbedTrajectory(realized, draws, model.seed)


@dataclass(frozen=True)
class Predictor:
    """Robot-side view of future references.

    ``oracle-nominal`` returns the nominal poses; ``constant-velocity``
    extrapolates the mean positional step over the last ``window`` observed
    poses and holds the last observed orientation.
    """

    mode: str = "oracle-nominal"
    window: int = 2

    def __post_init__(self):
        if self.mode not in ("oracle-nominal", "constant-velocity"):
            raise ConfigurationError(f"unknown predictor mode {self.mode!r}")
        if self.window < 2:
            raise ConfigurationError("predictor window must be >= 2")


def predict_window(pred: Predictor, history, nominal, k: int, H: int):
    """Return ``(poses, clamped)`` with ``H + 1`` predicted poses for steps ``k..k+H``.

    Indices past the end of ``nominal`` repeat the final pose and set ``clamped``.
    """
    nominal = np.asarray(nominal)
    last = len(nominal) - 1
    idx = np.arange(k, k + H + 1)
    clamped = bool(idx[-1] > last)
    idx = np.minimum(idx, last)
    if pred.mode == "oracle-nominal":
        return nominal[idx].copy(), clamped
    history = np.asarray(history, dtype=float)
    if history.ndim != 2 or len(history) == 0:
        raise ConfigurationError("constant-velocity prediction needs observed history")
    recent = history[-pred.window:]
    vel = np.zeros(3)
    if len(recent) > 1:
        vel = (recent[-1, :3] - recent[0, :3]) / (len(recent) - 1)
    steps = (idx - k).astype(float)
    out = np.repeat(recent[-1:], H + 1, axis=0)
    out[:, :3] += steps[:, None] * vel
    return out, clamped
