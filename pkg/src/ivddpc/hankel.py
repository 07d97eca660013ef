"""Block-Hankel data matrices and subspace operators.

Builds the past/future data blocks used by the predictors, the extended
observability/controllability matrices, the lower block-triangular Toeplitz
operator, and a residual check of the multi-step input/output data equation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sslib import StateSpaceModel, Trajectory, _as_matrix, _as_signal


def hankel(signal, depth: int) -> np.ndarray:
    """Block Hankel matrix of a (T, d) signal; column j stacks samples
    j..j+depth-1. Output shape (d*depth, T-depth+1)."""
    x = _as_signal(signal, name="signal")
    T, d = x.shape
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth > T:
        raise ValueError(f"depth {depth} exceeds signal length {T}")
    cols = T - depth + 1
    H = np.empty((d * depth, cols))
    for j in range(cols):
        H[:, j] = x[j:j + depth].ravel()
    return H


@dataclass(frozen=True)
class HankelBundle:
    """Offline data matrices at horizons (L_p, L_f), all with N̄ columns.

    Z_p stacks U_p over Y_p in that fixed order. R_f is present only for
    closed-loop data, E_f only when the innovation sequence is known.
    """

    U_p: np.ndarray
    Y_p: np.ndarray
    U_f: np.ndarray
    Y_f: np.ndarray
    L_p: int
    L_f: int
    m: int
    p: int
    R_f: Optional[np.ndarray] = None
    E_f: Optional[np.ndarray] = None

    def __post_init__(self):
        cols = self.U_p.shape[1]
        for name in ("Y_p", "U_f", "Y_f", "R_f", "E_f"):
            block = getattr(self, name)
            if block is not None and block.shape[1] != cols:
                raise ValueError(f"{name} has {block.shape[1]} columns, expected {cols}")
        if cols < 1:
            raise ValueError("bundle must have at least one column")

    @property
    def n_cols(self) -> int:
        return self.U_p.shape[1]

    @property
    def Z_p(self) -> np.ndarray:
        return np.vstack([self.U_p, self.Y_p])

    @property
    def ZU(self) -> np.ndarray:
        """The stacked regressor col(Z_p, U_f)."""
        return np.vstack([self.U_p, self.Y_p, self.U_f])


def build_bundle(traj: Trajectory, L_p: int, L_f: int) -> HankelBundle:
    """Split a trajectory into past/future Hankel blocks.

    Past blocks have depth L_p over samples [0, N-L_f); future blocks have
    depth L_f over samples [L_p, N). Requires N >= L_p + L_f.
    """
    N = traj.length
    if L_p < 1 or L_f < 1:
        raise ValueError("horizons must be >= 1")
    if N < L_p + L_f:
        raise ValueError(f"need at least L_p + L_f = {L_p + L_f} samples, got {N}")
    U_p = hankel(traj.u[:N - L_f], L_p)
    Y_p = hankel(traj.y[:N - L_f], L_p)
    U_f = hankel(traj.u[L_p:], L_f)
    Y_f = hankel(traj.y[L_p:], L_f)
    R_f = hankel(traj.r[L_p:], L_f) if traj.r.shape[0] else None
    E_f = hankel(traj.e[L_p:], L_f) if traj.e.shape[0] else None
    return HankelBundle(U_p=U_p, Y_p=Y_p, U_f=U_f, Y_f=Y_f, R_f=R_f, E_f=E_f,
                        L_p=L_p, L_f=L_f, m=traj.u.shape[1], p=traj.y.shape[1])


def extended_observability(A, C, s: int) -> np.ndarray:
    """col(C, CA, ..., CA^{s-1})."""
    A = _as_matrix(A, "A")
    C = _as_matrix(C, "C")
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    blocks = []
    M = C
    for _ in range(s):
        blocks.append(M)
        M = M @ A
    return np.vstack(blocks)


def extended_controllability(A, B, s: int) -> np.ndarray:
    """[A^{s-1}B, ..., AB, B]: oldest sample leftmost, so that multiplying a
    stacked window col(w(t-s), ..., w(t-1)) propagates it to the state at t."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    blocks = [B]
    M = B
    for _ in range(s - 1):
        M = A @ M
        blocks.append(M)
    return np.hstack(blocks[::-1])


def toeplitz(A, B, C, D, s: int) -> np.ndarray:
    """Lower block-triangular Toeplitz operator of the Markov parameters:
    block (i, j) = D for i = j, C A^{i-j-1} B for i > j, zero above."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    C = _as_matrix(C, "C")
    D = _as_matrix(D, "D")
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    p, m = D.shape
    markov = [D]
    M = B
    for _ in range(s - 1):
        markov.append(C @ M)
        M = A @ M
    H = np.zeros((p * s, m * s))
    for i in range(s):
        for j in range(i + 1):
            H[i * p:(i + 1) * p, j * m:(j + 1) * m] = markov[i - j]
    return H


def data_equation_residual(model: StateSpaceModel, bundle: HankelBundle) -> float:
    """Relative defect of the multi-step predictor-form data equation.

    Evaluates ``||Y_f - G (D_u U_p + D_y Y_p) - H_u U_f - H_e E_f||_F / ||Y_f||_F``
    with G the extended observability matrix of (A, C), D_u, D_y the
    controllability matrices of (A - K C, B - K D) and (A - K C, K), and
    H_u, H_e the Toeplitz operators of (A, B, C, D) and (A, K, C, I). For
    exact data the residual reflects only the window truncation ||(A-KC)^L_p||.
    """
    if bundle.E_f is None:
        raise ValueError("bundle has no E_f block; residual needs known innovations")
    K = model.K if model.K is not None else np.zeros((model.n, model.p))
    A_K = model.A - K @ model.C
    G = extended_observability(model.A, model.C, bundle.L_f)
    D_u = extended_controllability(A_K, model.B - K @ model.D, bundle.L_p)
    D_y = extended_controllability(A_K, K, bundle.L_p)
    H_u = toeplitz(model.A, model.B, model.C, model.D, bundle.L_f)
    H_e = toeplitz(model.A, K, model.C, np.eye(model.p), bundle.L_f)
    predicted = G @ (D_u @ bundle.U_p + D_y @ bundle.Y_p) + H_u @ bundle.U_f + H_e @ bundle.E_f
    scale = np.linalg.norm(bundle.Y_f, "fro")
    if scale == 0.0:
        return float(np.linalg.norm(bundle.Y_f - predicted, "fro"))
    return float(np.linalg.norm(bundle.Y_f - predicted, "fro") / scale)


@dataclass(frozen=True)
class OnlineWindow:
    """Stacked last-L_p inputs then outputs, as consumed by the predictors."""

    z_p: np.ndarray
    t: int


def online_window(traj: Trajectory, t: int, L_p: int) -> OnlineWindow:
    """Window col(u(t-L_p..t-1), y(t-L_p..t-1)) ending just before sample t."""
    if t < L_p:
        raise ValueError(f"need t >= L_p = {L_p}, got t = {t}")
    if t > traj.length:
        raise ValueError(f"t = {t} exceeds trajectory length {traj.length}")
    u_p = traj.u[t - L_p:t].ravel()
    y_p = traj.y[t - L_p:t].ravel()
    return OnlineWindow(z_p=np.concatenate([u_p, y_p]), t=t)


def stack_window(u_hist: np.ndarray, y_hist: np.ndarray, L_p: int) -> np.ndarray:
    """z_p vector from the trailing L_p rows of running history arrays."""
    if u_hist.shape[0] < L_p or y_hist.shape[0] < L_p:
        raise ValueError("insufficient history for the requested window")
    return np.concatenate([u_hist[-L_p:].ravel(), y_hist[-L_p:].ravel()])
