"""Finite-horizon tracking Riccati recursion with affine and disturbance terms.

For a fixed input matrix ``B`` the expected cost-to-go from tracking error
``e`` at step ``k`` is ``e'P(k)e + 2e'p(k) + c(k)``. With ``d = r(k) - r(k+1)``
and ``P+ = P(k+1)`` etc.::

    M    = (R + B'P+B)^-1 B'
    P(k) = Q + P+ - P+ B M P+
    p(k) = p+ + P+ d - P+ B M P+ d - P+ B M p+
    c(k) = c+ + d'P+d + tr(Sigma D'P+D) - g' B M g + 2 d'p+,   g = P+ d + p+
    u(k) = -M (P+ (e + d) + p+)

terminated by ``P(H) = Q``, ``p(H) = 0``, ``c(H) = kappa |theta_bar - theta_0|^2``.

Every routine broadcasts over leading axes of the input matrix, so a stack of
candidate matrices ``(n, 6, 9)`` is solved in one pass.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .kinematics import ConfigurationError, pose_error
from .trajectory import INJECTION

# Defaults used in the reported experiments.
DEFAULT_H = 8
DEFAULT_Q_SCALE = 1000.0
DEFAULT_KAPPA = 1.0


class NumericalFailure(ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class MpcProblem:
    """One planning instance. ``B_bar`` may be ``None`` in a template."""

    Q: np.ndarray
    R: np.ndarray
    kappa: float
    H: int
    tau: float
    window: np.ndarray
    sigma: np.ndarray
    B_bar: np.ndarray | None = None
    injection: np.ndarray = field(default=INJECTION, repr=False)

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        window = np.asarray(self.window, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        nx = Q.shape[0]
        if Q.ndim != 2 or Q.shape != (nx, nx) or not np.allclose(Q, Q.T, atol=1e-12):
            raise ConfigurationError("Q must be a symmetric square matrix")
        if np.linalg.eigvalsh(Q).min() < -1e-10 * max(1.0, np.abs(Q).max()):
            raise ConfigurationError("Q must be positive semidefinite")
        if R.ndim != 2 or R.shape[0] != R.shape[1] or not np.allclose(R, R.T, atol=1e-12):
            raise ConfigurationError("R must be a symmetric square matrix")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ConfigurationError("R must be positive definite")
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ConfigurationError("kappa must be finite and >= 0")
        if int(self.H) != self.H or self.H < 1:
            raise ConfigurationError("H must be an integer >= 1")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if window.shape != (self.H + 1, nx):
            raise ConfigurationError(f"reference window must be ({self.H + 1}, {nx}), got {window.shape}")
        D = np.asarray(self.injection, dtype=float)
        if D.shape != (nx, sigma.shape[0]) or sigma.shape != (sigma.shape[0],) * 2:
            raise ConfigurationError("sigma / injection dimensions do not match the state")
        if self.B_bar is not None:
            B = np.asarray(self.B_bar, dtype=float)
            if B.shape[-2:] != (nx, R.shape[0]):
                raise ConfigurationError(f"B_bar must end in ({nx}, {R.shape[0]}), got {B.shape}")
            object.__setattr__(self, "B_bar", B)
        for name, value in (("Q", Q), ("R", R), ("window", window), ("sigma", sigma), ("injection", D)):
            object.__setattr__(self, name, value)

    def with_input_matrix(self, B_bar) -> "MpcProblem":
        return dataclasses.replace(self, B_bar=B_bar)

    def with_sigma(self, sigma) -> "MpcProblem":
        return dataclasses.replace(self, sigma=sigma)

    def reference_steps(self) -> np.ndarray:
        """``r(k) - r(k+1)`` for ``k = 0..H-1``, orientation differences wrapped."""
        if self.window.shape[1] == 6:
            return pose_error(self.window[:-1], self.window[1:])
        return self.window[:-1] - self.window[1:]


def default_weights(q_scale=DEFAULT_Q_SCALE, n_state=6, n_input=9):
    return q_scale * np.eye(n_state), np.eye(n_input)


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward sequences; index ``k`` runs over the leading sequence axis.

    ``P``: (H+1, ..., nx, nx), ``p``: (H+1, ..., nx), ``c``: (H+1, ...),
    ``M``: (H, ..., nu, nx) where ``M[k]`` pairs with ``P[k+1]``.
    """

    P: np.ndarray
    p: np.ndarray
    c: np.ndarray
    M: np.ndarray
    steps: np.ndarray

    @property
    def H(self) -> int:
        return self.M.shape[0]

    def to_json(self) -> str:
        return json.dumps({"P": self.P.tolist(), "p": self.p.tolist(),
                           "c": self.c.tolist(), "M": self.M.tolist()})


def _pose_change_cost(problem, theta_bar, theta0):
    theta_bar = np.asarray(theta_bar, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    return problem.kappa * np.sum((theta_bar - theta0) ** 2, axis=-1)


def solve_dare(problem: MpcProblem, theta_bar, theta0, *, include_disturbance=True,
               check=True) -> RiccatiSolution:
    """Backward recursion from ``k = H`` to ``0`` for ``problem.B_bar``.

    ``theta_bar`` may be stacked to match a stacked ``B_bar``. With
    ``include_disturbance=False`` the trace term is skipped (disturbance-blind
    scoring). With ``check=False`` non-finite results are returned instead
    of raising, so callers can mask failed members of a stack.
    """
    if problem.B_bar is None:
        raise ConfigurationError("problem has no input matrix")
    B = problem.B_bar
    Bt = np.swapaxes(B, -1, -2)
    Q, R, H = problem.Q, problem.R, problem.H
    D = problem.injection
    batch = B.shape[:-2]
    nx, nu = B.shape[-2], B.shape[-1]
    steps = problem.reference_steps()

    P = np.empty((H + 1,) + batch + (nx, nx))
    p = np.empty((H + 1,) + batch + (nx,))
    c = np.empty((H + 1,) + batch)
    M_seq = np.empty((H,) + batch + (nu, nx))
    P[H] = Q
    p[H] = 0.0
    c[H] = np.broadcast_to(_pose_change_cost(problem, theta_bar, theta0), batch)

    # tr(Sigma D'PD) = sum(D Sigma D' * P) elementwise for symmetric P
    noise_weight = D @ problem.sigma @ D.T if include_disturbance else None
    for k in range(H - 1, -1, -1):
        Pn, pn, d = P[k + 1], p[k + 1], steps[k]
        G = R + Bt @ (Pn @ B)
        M = np.linalg.solve(G, Bt)
        BM = B @ M
        BM = 0.5 * (BM + np.swapaxes(BM, -1, -2))
        PBM = Pn @ BM
        Pk = Q + Pn - PBM @ Pn
        P[k] = 0.5 * (Pk + np.swapaxes(Pk, -1, -2))
        Pd = Pn @ d
        g = Pd + pn
        BMg = (BM @ g[..., None])[..., 0]
        p[k] = g - (Pn @ BMg[..., None])[..., 0]
        ck = c[k + 1] + Pd @ d - (g * BMg).sum(axis=-1) + 2.0 * (pn @ d)
        if noise_weight is not None:
            ck = ck + (noise_weight * Pn).sum(axis=(-2, -1))
        c[k] = ck
        M_seq[k] = M
        if check and not (np.all(np.isfinite(P[k])) and np.all(np.isfinite(p[k]))
                          and np.all(np.isfinite(c[k]))):
            raise NumericalFailure(f"non-finite Riccati iterate at step {k}", step=k)
    return RiccatiSolution(P, p, c, M_seq, steps)


def extract_control(sol: RiccatiSolution, e_k, k: int, problem: MpcProblem | None = None) -> np.ndarray:
    """Optimal input ``u(k) = -M(k) (P(k+1)(e(k) + d(k)) + p(k+1))``.

    ``e_k`` may carry extra leading axes (e.g. Monte Carlo samples) that
    broadcast against the solution's stack axes.
    """
    if not 0 <= k < sol.H:
        raise IndexError(f"step {k} outside [0, {sol.H})")
    e_k = np.asarray(e_k, dtype=float)
    x = e_k + sol.steps[k]
    g = (sol.P[k + 1] @ x[..., None])[..., 0] + sol.p[k + 1]
    return -(sol.M[k] @ g[..., None])[..., 0]


def cost_to_go(sol: RiccatiSolution, e0) -> np.ndarray:
    """Expected cost ``e0'P(0)e0 + 2 e0'p(0) + c(0)``."""
    e0 = np.asarray(e0, dtype=float)
    quad = np.einsum("...i,...ij,...j->...", e0, sol.P[0], e0)
    return quad + 2.0 * np.einsum("...i,...i->...", e0, sol.p[0]) + sol.c[0]
