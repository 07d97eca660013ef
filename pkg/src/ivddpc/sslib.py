"""Discrete-time LTI state-space modeling and simulation.

Provides the plant/controller containers used across the package, open- and
closed-loop simulators with exact resolution of the direct-feedthrough
algebraic loop, deterministic signal generators, and a fixed-point solver for
the discrete filter Riccati equation used in gain synthesis.

Conventions:
    * Signals are time-major ``(T, channels)`` float arrays; scalar channels
      may be passed as 1-D arrays of length ``T``.
    * The feedback controller acts on the tracking error ``r(t) - y(t)``.
    * The stochastic plant is in innovation form: ``x+ = A x + B u + K e``,
      ``y = C x + D u + e``; with ``K`` absent it is treated as zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


class WellPosednessError(ValueError):
    """The feedback interconnection has a singular algebraic loop."""


class DareConvergenceError(RuntimeError):
    """Riccati fixed-point iteration did not reach the requested tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    return M


def _as_signal(x, channels: Optional[int] = None, name: str = "signal") -> np.ndarray:
    """Coerce to a (T, d) float array; 1-D input becomes a single channel."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got ndim={x.ndim}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"{name} has {x.shape[1]} channels, expected {channels}")
    return x


def spectral_radius(A) -> float:
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


@dataclass(frozen=True)
class StateSpaceModel:
    """Plant quadruple (A, B, C, D) with optional innovation gain K.

    Dimension checks run at construction; when ``K`` is supplied the
    predictor matrix ``A - K C`` must be Schur stable.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    K: Optional[np.ndarray] = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} cols, expected {n}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        if self.K is not None:
            K = _as_matrix(self.K, "K")
            if K.shape != (n, C.shape[0]):
                raise ValueError(f"K must be {n}x{C.shape[0]}, got {K.shape}")
            rho = spectral_radius(A - K @ C)
            if rho >= 1.0:
                raise ValueError(f"A - K C must be Schur stable, spectral radius {rho:.6f}")
            object.__setattr__(self, "K", K)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def a_k(self) -> np.ndarray:
        """Predictor matrix A - K C (K treated as zero when absent)."""
        if self.K is None:
            return self.A.copy()
        return self.A - self.K @ self.C

    def with_gain(self, K) -> "StateSpaceModel":
        return replace(self, K=K)


@dataclass(frozen=True)
class ControllerModel:
    """Feedback controller quadruple acting on the tracking error r - y.

    ``x_c+ = A x_c + B (r - y)``, ``u = C x_c + D (r - y)``. The controller
    input dimension must equal the plant output dimension and vice versa.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        nc = A.shape[0]
        if A.shape != (nc, nc):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != nc or C.shape[1] != nc:
            raise ValueError("controller A, B, C dimensions are inconsistent")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n_c(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        """Controller output dimension (= plant input dimension)."""
        return self.C.shape[0]

    @property
    def p(self) -> int:
        """Controller input dimension (= plant output dimension)."""
        return self.B.shape[1]


_EMPTY = np.zeros((0, 0))


@dataclass(frozen=True)
class Trajectory:
    """One input/output record; r and e may be empty (shape (0, d))."""

    u: np.ndarray
    y: np.ndarray
    r: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    e: np.ndarray = field(default_factory=lambda: _EMPTY.copy())

    def __post_init__(self):
        u = _as_signal(self.u, name="u")
        y = _as_signal(self.y, name="y")
        r = _as_signal(self.r, name="r") if np.asarray(self.r).size else np.zeros((0, y.shape[1]))
        e = _as_signal(self.e, name="e") if np.asarray(self.e).size else np.zeros((0, y.shape[1]))
        T = u.shape[0]
        for name, sig in (("y", y), ("r", r), ("e", e)):
            if sig.shape[0] not in (0, T):
                raise ValueError(f"{name} has length {sig.shape[0]}, expected {T}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "e", e)

    @property
    def length(self) -> int:
        return self.u.shape[0]


def plant_step(model: StateSpaceModel, x, u_t, e_t):
    """One innovation-form plant update. Returns (y_t, x_next)."""
    y_t = model.C @ x + model.D @ u_t + e_t
    x_next = model.A @ x + model.B @ u_t
    if model.K is not None:
        x_next = x_next + model.K @ e_t
    return y_t, x_next


def feedback_loop_matrix(model: StateSpaceModel, ctrl: ControllerModel) -> np.ndarray:
    """Inverse of the direct-feedthrough loop coupling u and y.

    With the controller acting on r - y, the instantaneous loop gives
    ``(I + D_c D) u = C_c x_c + D_c (r - C x - e)``; the returned matrix is
    ``(I + D_c D)^{-1}``. Raises WellPosednessError when singular.
    """
    m = model.m
    loop = np.eye(m) + ctrl.D @ model.D
    try:
        Minv = np.linalg.inv(loop)
    except np.linalg.LinAlgError as exc:
        raise WellPosednessError(
            "algebraic loop matrix I + D_c D is singular; the interconnection is ill posed"
        ) from exc
    if not np.all(np.isfinite(Minv)) or np.linalg.cond(loop) > 1e12:
        raise WellPosednessError(
            "algebraic loop matrix I + D_c D is numerically singular"
        )
    return Minv


def closed_loop_step(model: StateSpaceModel, ctrl: ControllerModel, x, xc, r_t, e_t,
                     loop_inv: Optional[np.ndarray] = None):
    """One exact step of the feedback interconnection.

    Solves the algebraic loop for u(t), then forms y(t) and both state
    updates. Returns (u_t, y_t, x_next, xc_next).
    """
    if loop_inv is None:
        loop_inv = feedback_loop_matrix(model, ctrl)
    u_t = loop_inv @ (ctrl.C @ xc + ctrl.D @ (r_t - model.C @ x - e_t))
    y_t = model.C @ x + model.D @ u_t + e_t
    x_next = model.A @ x + model.B @ u_t
    if model.K is not None:
        x_next = x_next + model.K @ e_t
    xc_next = ctrl.A @ xc + ctrl.B @ (r_t - y_t)
    return u_t, y_t, x_next, xc_next


def simulate_open_loop(model: StateSpaceModel, u, e=None, x0=None) -> Trajectory:
    """Simulate ``x+ = A x + B u + K e``, ``y = C x + D u + e``.

    ``e`` defaults to zero; ``K`` absent is treated as zero.
    """
    u = _as_signal(u, model.m, "u")
    T = u.shape[0]
    if e is None:
        e = np.zeros((T, model.p))
    e = _as_signal(e, model.p, "e")
    if e.shape[0] != T:
        raise ValueError(f"u and e must have equal length, got {T} and {e.shape[0]}")
    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float).reshape(model.n)
    y = np.empty((T, model.p))
    for t in range(T):
        y[t], x = plant_step(model, x, u[t], e[t])
    return Trajectory(u=u, y=y, e=e)


def simulate_closed_loop(model: StateSpaceModel, ctrl: ControllerModel, r, e=None,
                         x0=None, xc0=None) -> Trajectory:
    """Simulate the plant under feedback ``u = C_c x_c + D_c (r - y)``.

    The instantaneous u/y coupling through D and D_c is solved exactly at
    every step via the loop matrix ``(I + D_c D)^{-1}``.
    """
    if ctrl.p != model.p or ctrl.m != model.m:
        raise ValueError("controller I/O dimensions do not match the plant")
    r = _as_signal(r, model.p, "r")
    T = r.shape[0]
    if e is None:
        e = np.zeros((T, model.p))
    e = _as_signal(e, model.p, "e")
    if e.shape[0] != T:
        raise ValueError(f"r and e must have equal length, got {T} and {e.shape[0]}")
    loop_inv = feedback_loop_matrix(model, ctrl)
    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float).reshape(model.n)
    xc = np.zeros(ctrl.n_c) if xc0 is None else np.asarray(xc0, dtype=float).reshape(ctrl.n_c)
    u = np.empty((T, model.m))
    y = np.empty((T, model.p))
    for t in range(T):
        u[t], y[t], x, xc = closed_loop_step(model, ctrl, x, xc, r[t], e[t], loop_inv)
    return Trajectory(u=u, y=y, r=r, e=e)


def square_wave(period: int, duty: float, amplitude: float, length: int,
                phase: int = 0) -> np.ndarray:
    """Square wave: +amplitude for the first round(duty*period) samples of
    each period, -amplitude otherwise, shifted by ``phase`` samples."""
    if period < 2:
        raise ValueError(f"period must be >= 2, got {period}")
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    if not 0.0 < duty < 1.0:
        raise ValueError(f"duty must lie in (0, 1), got {duty}")
    high = int(round(duty * period))
    t = np.arange(length) + int(phase)
    return np.where(np.mod(t, period) < high, amplitude, -amplitude).astype(float)


def excitation_reference(period: int, duty: float, amplitudes) -> np.ndarray:
    """Concatenated square-wave blocks, one full period per amplitude."""
    amplitudes = list(amplitudes)
    if not amplitudes:
        raise ValueError("amplitudes must be non-empty")
    return np.concatenate([square_wave(period, duty, a, period) for a in amplitudes])


def gaussian_noise(seed, sigma, length: int, channels: int = 1) -> np.ndarray:
    """Reproducible zero-mean Gaussian noise, shape (length, channels).

    ``sigma`` is a scalar or per-channel vector of standard deviations. The
    generator is numpy's PCG64 seeded with ``seed`` (or a SeedSequence);
    identical seeds give bitwise-identical output.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (channels,))
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((length, channels)) * sigma


def dare_solve(A, C, Qw, Rv, tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
    """Stabilizing solution of the discrete filter Riccati equation.

    Fixed-point iteration of ``P -> A P A' + Qw - A P C' (C P C' + Rv)^-1 C P A'``
    from P = Qw. Raises DareConvergenceError (carrying the last residual)
    when the relative Frobenius residual stays above ``tol``.
    """
    A = _as_matrix(A, "A")
    C = _as_matrix(C, "C")
    Qw = _as_matrix(Qw, "Qw")
    Rv = _as_matrix(Rv, "Rv")
    P = Qw.copy()
    residual = np.inf
    for _ in range(max_iter):
        S = C @ P @ C.T + Rv
        G = np.linalg.solve(S, C @ P @ A.T)
        P_next = A @ P @ A.T + Qw - A @ P @ C.T @ G
        P_next = 0.5 * (P_next + P_next.T)
        residual = np.linalg.norm(P_next - P, "fro") / max(1.0, np.linalg.norm(P_next, "fro"))
        P = P_next
        if residual <= tol:
            return P
    raise DareConvergenceError(
        f"Riccati iteration did not converge in {max_iter} steps (residual {residual:.3e})",
        residual,
    )


def riccati_residual(A, C, Qw, Rv, P) -> float:
    """Frobenius norm of the filter Riccati fixed-point defect at P."""
    S = C @ P @ C.T + Rv
    defect = A @ P @ A.T + Qw - A @ P @ C.T @ np.linalg.solve(S, C @ P @ A.T) - P
    return float(np.linalg.norm(defect, "fro"))


def kalman_gain(model: StateSpaceModel, Qw, Rv, tol: float = 1e-12,
                max_iter: int = 100000) -> np.ndarray:
    """Steady-state innovation gain ``K = A P C' (C P C' + Rv)^{-1}``."""
    P = dare_solve(model.A, model.C, Qw, Rv, tol=tol, max_iter=max_iter)
    S = model.C @ P @ model.C.T + np.asarray(Rv, dtype=float)
    return model.A @ P @ model.C.T @ np.linalg.inv(S)


def stabilizing_output_injection(A_c, C_c, tol: float = 1e-12) -> np.ndarray:
    """Gain L with ``A_c + L C_c`` Schur stable.

    Returns zero when A_c is already stable; otherwise the sign-flipped
    steady-state Kalman gain of the pair (A_c, C_c) with identity weights.
    """
    A_c = _as_matrix(A_c, "A_c")
    C_c = _as_matrix(C_c, "C_c")
    if spectral_radius(A_c) < 1.0:
        return np.zeros((A_c.shape[0], C_c.shape[0]))
    P = dare_solve(A_c, C_c, np.eye(A_c.shape[0]), np.eye(C_c.shape[0]), tol=tol)
    S = C_c @ P @ C_c.T + np.eye(C_c.shape[0])
    L = -(A_c @ P @ C_c.T @ np.linalg.inv(S))
    rho = spectral_radius(A_c + L @ C_c)
    if rho >= 1.0:
        raise DareConvergenceError(
            f"output injection failed to stabilize, spectral radius {rho:.6f}", rho
        )
    return L
