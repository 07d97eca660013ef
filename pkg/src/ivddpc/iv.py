"""Instrument construction for predictive control from closed-loop data.

Covers the left coprime factorization of the loop controller, the
factorization-based instrument block, assembly of the instrument matrix
variants, the weighted-least-squares multi-step predictor, the associated
projection, and the controller-annihilator diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .hankel import HankelBundle, extended_observability, toeplitz
from .sslib import ControllerModel, StateSpaceModel, spectral_radius, stabilizing_output_injection

DEFAULT_SVD_RTOL = 1e-10


class IllPosedDataError(ValueError):
    """The instrumented regressor lost rank beyond the pseudo-inverse tolerance."""


class IvVariant(str, Enum):
    """Instrument matrix recipes; all carry a 1/N̄ column scaling."""

    OPEN_LOOP = "open_loop"      # col(Z_p, U_f): valid for open-loop data only
    REF_ONLY = "ref_only"        # col(Z_p, R_f)
    LCF_ONLY = "lcf_only"        # col(Z_p, Xi_f)
    COMBINED = "combined"        # col(Z_p, Xi_f, R_f)
    PAST_ONLY = "past_only"      # col(Z_p): diagnostic-only, reference-blind


@dataclass(frozen=True)
class CoprimeFactors:
    """Stable left factors with ``controller = V^{-1} U`` as transfer matrices.

    V has identity feedthrough, so its inverse is well defined; both factor
    state matrices share ``A_c + L C_c``.
    """

    V: StateSpaceModel
    U: StateSpaceModel
    L: np.ndarray

    def __post_init__(self):
        for name, factor in (("V", self.V), ("U", self.U)):
            rho = spectral_radius(factor.A)
            if rho >= 1.0:
                raise ValueError(f"factor {name} is unstable (spectral radius {rho:.6f})")
        if np.linalg.matrix_rank(self.V.D) < self.V.D.shape[0]:
            raise ValueError("V must have invertible feedthrough")


@dataclass
class InstrumentSet:
    """An instrument matrix plus the predictor/projection derived from it.

    ``omega`` and ``pi`` start empty and are filled by :func:`predictor` and
    :func:`projection`; after that the set is treated as read-only.
    """

    variant: IvVariant
    phi: np.ndarray
    omega: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None
    pi_factors: Optional[tuple] = None
    meta: dict = field(default_factory=dict)


def lcf(ctrl: ControllerModel) -> CoprimeFactors:
    """Observer-form left coprime factorization of the controller.

    With L from :func:`stabilizing_output_injection`,
    ``V = (A_c + L C_c, L, C_c, I)`` and ``U = (A_c + L C_c, B_c + L D_c, C_c, D_c)``.
    A controller that is already stable takes the L = 0 fast path, making V
    the identity system and U the controller itself.
    """
    L = stabilizing_output_injection(ctrl.A, ctrl.C)
    A_cl = ctrl.A + L @ ctrl.C
    m = ctrl.m
    V = StateSpaceModel(A=A_cl, B=L, C=ctrl.C, D=np.eye(m))
    U = StateSpaceModel(A=A_cl, B=ctrl.B + L @ ctrl.D, C=ctrl.C, D=ctrl.D)
    return CoprimeFactors(V=V, U=U, L=L)


def markov_parameters(A, B, C, D, count: int) -> np.ndarray:
    """First ``count`` impulse-response blocks [D, CB, CAB, ...], stacked."""
    blocks = [np.atleast_2d(np.asarray(D, dtype=float))]
    M = np.atleast_2d(np.asarray(B, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    for _ in range(count - 1):
        blocks.append(C @ M)
        M = A @ M
    return np.stack(blocks)


def factor_markov_parameters(factors: CoprimeFactors, count: int) -> np.ndarray:
    """Impulse response of ``V^{-1} U``, for checking the factorization.

    The inverse of V = (A, B, C, I) is realized as (A - B C, B, -C, I); the
    result is the cascade of U followed by that inverse.
    """
    V, U = factors.V, factors.U
    Ainv = V.A - V.B @ V.C
    m = U.D.shape[1]
    out = np.empty((count, U.D.shape[0], m))
    for j in range(m):
        imp = np.zeros((count, m))
        imp[0, j] = 1.0
        xu = np.zeros(U.A.shape[0])
        mid = np.empty((count, U.C.shape[0]))
        for t in range(count):
            mid[t] = U.C @ xu + U.D @ imp[t]
            xu = U.A @ xu + U.B @ imp[t]
        xv = np.zeros(Ainv.shape[0])
        for t in range(count):
            out[t, :, j] = -V.C @ xv + mid[t]
            xv = Ainv @ xv + V.B @ mid[t]
    return out


def xi_f(factors: CoprimeFactors, bundle: HankelBundle) -> np.ndarray:
    """Factorization-based instrument block ``H_v U_f + H_u Y_f``.

    Both Toeplitz operators are built at depth L_f from the coprime factors;
    the combination is expressible through the future reference and the
    factor states only, so it stays uncorrelated with future innovations.
    """
    H_v = toeplitz(factors.V.A, factors.V.B, factors.V.C, factors.V.D, bundle.L_f)
    H_u = toeplitz(factors.U.A, factors.U.B, factors.U.C, factors.U.D, bundle.L_f)
    if H_v.shape[1] != bundle.U_f.shape[0] or H_u.shape[1] != bundle.Y_f.shape[0]:
        raise ValueError("coprime factor dimensions do not match the bundle")
    return H_v @ bundle.U_f + H_u @ bundle.Y_f


def build_iv(bundle: HankelBundle, variant: IvVariant,
             factors: Optional[CoprimeFactors] = None) -> InstrumentSet:
    """Assemble the instrument matrix for ``variant``, scaled by 1/N̄."""
    variant = IvVariant(variant)
    rows = [bundle.Z_p]
    if variant in (IvVariant.LCF_ONLY, IvVariant.COMBINED):
        if factors is None:
            raise ValueError(f"variant {variant.value} requires coprime factors")
        rows.append(xi_f(factors, bundle))
    if variant in (IvVariant.REF_ONLY, IvVariant.COMBINED):
        if bundle.R_f is None:
            raise ValueError(f"variant {variant.value} requires a closed-loop bundle with R_f")
        rows.append(bundle.R_f)
    if variant is IvVariant.OPEN_LOOP:
        rows.append(bundle.U_f)
    phi = np.vstack(rows) / bundle.n_cols
    meta = {"variant": variant.value, "svd_rtol": DEFAULT_SVD_RTOL}
    if factors is not None and variant in (IvVariant.LCF_ONLY, IvVariant.COMBINED):
        meta["lcf_gain"] = factors.L.tolist()
    return InstrumentSet(variant=variant, phi=phi, meta=meta)


def _truncated_pinv(M: np.ndarray, rtol: float):
    """SVD pseudo-inverse with relative cutoff; returns (pinv, rank, factors)."""
    Um, sv, Vt = np.linalg.svd(M, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        raise IllPosedDataError("regressor [Z_p; U_f] Phi' is identically zero")
    keep = sv > rtol * sv[0]
    rank = int(np.count_nonzero(keep))
    pinv = (Vt[keep].T / sv[keep]) @ Um[:, keep].T
    return pinv, rank, (Um, sv, Vt)


def _instrumented_regressor(bundle: HankelBundle, ivset: InstrumentSet):
    W = bundle.ZU
    M = W @ ivset.phi.T
    rtol = ivset.meta.get("svd_rtol", DEFAULT_SVD_RTOL)
    pinv, rank, _ = _truncated_pinv(M, rtol)
    z_rows = bundle.Z_p.shape[0]
    if rank < z_rows:
        raise IllPosedDataError(
            f"[Z_p; U_f] Phi' has numerical rank {rank} < {z_rows} Z_p rows; "
            "deficient block: Z_p consistency (data not informative enough)"
        )
    return W, pinv


def predictor(bundle: HankelBundle, ivset: InstrumentSet) -> np.ndarray:
    """Weighted-least-squares multi-step predictor
    ``Omega = Y_f Phi' ([Z_p; U_f] Phi')^+``; cached on the instrument set.

    Predictions are ``y_f = Omega @ col(z_p, u_f)``.
    """
    if ivset.omega is not None:
        return ivset.omega
    _, pinv = _instrumented_regressor(bundle, ivset)
    ivset.omega = bundle.Y_f @ ivset.phi.T @ pinv
    return ivset.omega


def projection(bundle: HankelBundle, ivset: InstrumentSet) -> np.ndarray:
    """Oblique projection ``Pi = Phi' ([Z_p; U_f] Phi')^+ [Z_p; U_f]``.

    Idempotent with range inside the row space of Phi. The low-rank factors
    (left = Phi' pinv, right = [Z_p; U_f]) are cached alongside the dense
    matrix so quadratic forms in (I - Pi) can be assembled cheaply.
    """
    if ivset.pi is not None:
        return ivset.pi
    W, pinv = _instrumented_regressor(bundle, ivset)
    left = ivset.phi.T @ pinv
    ivset.pi_factors = (left, W)
    ivset.pi = left @ W
    return ivset.pi


def annihilator(ctrl: ControllerModel, L_f: int, null_rtol: float = 1e-10) -> np.ndarray:
    """Controller annihilator ``Theta = G_perp [I  H_c]``.

    G_perp is an orthonormal basis (as rows) of the left null space of the
    controller's extended observability matrix at depth L_f, and H_c the
    controller Toeplitz operator. Applied to a stacked window col(u_f, y_f)
    of exact closed-loop data it returns a function of the reference alone.
    """
    gamma_c = extended_observability(ctrl.A, ctrl.C, L_f)
    rows, n_c = gamma_c.shape
    if rows <= n_c:
        raise ValueError(f"need L_f * m > n_c for a nontrivial annihilator, got {rows} <= {n_c}")
    Um, sv, _ = np.linalg.svd(gamma_c, full_matrices=True)
    tol = null_rtol * (sv[0] if sv.size else 1.0)
    rank = int(np.count_nonzero(sv > tol))
    gamma_perp = Um[:, rank:].T
    if gamma_perp.shape[0] == 0:
        raise ValueError("controller observability matrix has full row space; no annihilator")
    H_c = toeplitz(ctrl.A, ctrl.B, ctrl.C, ctrl.D, L_f)
    return gamma_perp @ np.hstack([np.eye(rows), H_c])


def restriction_residual(theta: np.ndarray, u_f: np.ndarray, y_f_hat: np.ndarray) -> float:
    """Norm of the annihilated plan window ``||Theta col(u_f, y_f_hat)||``.

    Small values flag plans that are trapped inside the loop controller's
    own behavior instead of exploring the full plant behavior.
    """
    stacked = np.concatenate([np.asarray(u_f, dtype=float).ravel(),
                              np.asarray(y_f_hat, dtype=float).ravel()])
    if stacked.shape[0] != theta.shape[1]:
        raise ValueError(f"window length {stacked.shape[0]} does not match "
                         f"annihilator width {theta.shape[1]}")
    return float(np.linalg.norm(theta @ stacked))


def iv_noise_correlation(E_f: np.ndarray, phi: np.ndarray) -> float:
    """Frobenius norm of the sample cross-moment ``E_f Phi'``."""
    E_f = np.asarray(E_f, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if E_f.shape[1] != phi.shape[1]:
        raise ValueError("E_f and Phi must have the same number of columns")
    return float(np.linalg.norm(E_f @ phi.T, "fro"))
