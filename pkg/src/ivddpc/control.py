"""Receding-horizon controller variants and the run executive.

Implements the model-based oracle controller, the family of data-driven
predictor controllers (plain least-squares and the instrumented variants),
the projection-regularized formulation, the steady-state Kalman update, the
receding-horizon executive, and the scalar performance index.

All planners expose a prepared-workspace form: the expensive factorizations
depend only on the dataset, the task weights, and (for the regularized
variant) the penalty, so they are computed once per run and reused at every
time step. Every function is deterministic for fixed inputs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg

from . import iv as iv_mod
from .hankel import HankelBundle, extended_observability, stack_window, toeplitz
from .qp import GeneralQpWorkspace, EqualityWorkspace, QpStatus, SolverSettings
from .sslib import ControllerModel, StateSpaceModel, Trajectory, closed_loop_step, \
    feedback_loop_matrix, plant_step


class VariantTag(str, Enum):
    ORACLE = "oracle"
    SPC = "spc"
    DDPC_IV = "ddpc_iv"
    DDPC_IV1 = "ddpc_iv1"
    DDPC_IV2 = "ddpc_iv2"
    RDDPC_IV = "rddpc_iv"
    LOOP_BASELINE = "loop_baseline"


#: instrument recipe backing each data-driven predictor variant
VARIANT_IV = {
    VariantTag.SPC: iv_mod.IvVariant.OPEN_LOOP,
    VariantTag.DDPC_IV: iv_mod.IvVariant.COMBINED,
    VariantTag.DDPC_IV1: iv_mod.IvVariant.REF_ONLY,
    VariantTag.DDPC_IV2: iv_mod.IvVariant.LCF_ONLY,
    VariantTag.RDDPC_IV: iv_mod.IvVariant.COMBINED,
}


@dataclass(frozen=True)
class ControllerVariant:
    """A variant tag plus the parameters it needs.

    ``lam`` and ``norm_order`` apply to the regularized variant only; the
    executive checks at run time that the attached data (instrument set or
    plant model) matches the tag.
    """

    tag: VariantTag
    lam: Optional[float] = None
    norm_order: int = 2

    def __post_init__(self):
        if self.tag is VariantTag.RDDPC_IV:
            if self.lam is None or self.lam < 0:
                raise ValueError("regularized variant requires lam >= 0")
            if self.norm_order not in (1, 2):
                raise ValueError("norm_order must be 1 or 2")

    @property
    def label(self) -> str:
        if self.tag is VariantTag.RDDPC_IV:
            return f"{self.tag.value}(lam={self.lam:g})"
        return self.tag.value


@dataclass(frozen=True)
class ControlTask:
    """Tracking task: stacked horizon weights, boxes, horizons, run length.

    ``reference`` must cover the warmup, the controlled run, and one final
    prediction horizon: at least L_p + N_c + L_f samples.
    """

    reference: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    L_p: int
    L_f: int
    N_c: int
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None
    y_min: Optional[np.ndarray] = None
    y_max: Optional[np.ndarray] = None

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=float)
        if ref.ndim == 1:
            ref = ref[:, None]
        object.__setattr__(self, "reference", ref)
        kmin = self.L_p + self.N_c + self.L_f
        if ref.shape[0] < kmin:
            raise ValueError(f"reference must span warmup+run+horizon ({kmin} samples), "
                             f"got {ref.shape[0]}")
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if np.abs(M - M.T).max() > 1e-10 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(M) <= 0):
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, M)

    @property
    def p(self) -> int:
        return self.reference.shape[1]

    @property
    def m(self) -> int:
        return self.R.shape[0] // self.L_f

    def y_ref_window(self, t: int) -> np.ndarray:
        """Flattened reference window r(t..t+L_f-1)."""
        return self.reference[t:t + self.L_f].ravel()

    def input_bounds(self):
        """Horizon-replicated input box (lo, hi); None when unbounded."""
        if self.u_min is None and self.u_max is None:
            return None
        m = self.m
        lo = np.tile(np.full(m, -np.inf) if self.u_min is None else self.u_min, self.L_f)
        hi = np.tile(np.full(m, np.inf) if self.u_max is None else self.u_max, self.L_f)
        return lo, hi

    def output_bounds(self):
        if self.y_min is None and self.y_max is None:
            return None
        p = self.p
        lo = np.tile(np.full(p, -np.inf) if self.y_min is None else self.y_min, self.L_f)
        hi = np.tile(np.full(p, np.inf) if self.y_max is None else self.y_max, self.L_f)
        return lo, hi

    @property
    def is_unconstrained(self) -> bool:
        return self.input_bounds() is None and self.output_bounds() is None


def make_task(reference, q_step, r_step, L_p: int, L_f: int, N_c: int,
              u_min=None, u_max=None, y_min=None, y_max=None) -> ControlTask:
    """Build a ControlTask from per-step weight diagonals."""
    q_step = np.atleast_1d(np.asarray(q_step, dtype=float))
    r_step = np.atleast_1d(np.asarray(r_step, dtype=float))
    Q = np.kron(np.eye(L_f), np.diag(q_step))
    R = np.kron(np.eye(L_f), np.diag(r_step))
    def _bound(v, d):
        return None if v is None else np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
    return ControlTask(reference=reference, Q=Q, R=R, L_p=L_p, L_f=L_f, N_c=N_c,
                       u_min=_bound(u_min, r_step.size), u_max=_bound(u_max, r_step.size),
                       y_min=_bound(y_min, q_step.size), y_max=_bound(y_max, q_step.size))


@dataclass
class KalmanState:
    """One-step-ahead state prediction of the steady-state filter."""

    x_hat: np.ndarray


def kalman_update(model: StateSpaceModel, kstate: KalmanState, u_t, y_t) -> KalmanState:
    """Innovation-form predictor update
    ``x+ = A x + B u + K (y - C x - D u)``."""
    if model.K is None:
        raise ValueError("model has no innovation gain K")
    x = kstate.x_hat
    innov = y_t - model.C @ x - model.D @ u_t
    return KalmanState(x_hat=model.A @ x + model.B @ u_t + model.K @ innov)


@dataclass
class PlanInfo:
    objective: float
    iterations: int
    status: str


class PredictorPlanner:
    """Plan u_f against a fixed multi-step predictor y_f = Om_z z_p + Om_u u_f."""

    def __init__(self, omega: np.ndarray, task: ControlTask,
                 settings: Optional[SolverSettings] = None):
        self.task = task
        self.settings = settings or SolverSettings()
        mLf = task.R.shape[0]
        self.omega_z = omega[:, :omega.shape[1] - mLf]
        self.omega_u = omega[:, omega.shape[1] - mLf:]
        if task.is_unconstrained:
            H = self.omega_u.T @ task.Q @ self.omega_u + task.R
            self._cho = scipy.linalg.cho_factor(H, check_finite=False)
            self._ws = None
        else:
            self._cho = None
            d = mLf + task.Q.shape[0]
            P = np.zeros((d, d))
            P[:mLf, :mLf] = 2.0 * task.R
            P[mLf:, mLf:] = 2.0 * task.Q
            Aeq = np.hstack([-self.omega_u, np.eye(task.Q.shape[0])])
            lb = np.full(d, -np.inf)
            ub = np.full(d, np.inf)
            ub_box = task.input_bounds()
            if ub_box is not None:
                lb[:mLf], ub[:mLf] = ub_box
            yb = task.output_bounds()
            if yb is not None:
                lb[mLf:], ub[mLf:] = yb
            rows = [Aeq]
            boxed = np.flatnonzero(np.isfinite(lb) | np.isfinite(ub))
            eye = np.zeros((boxed.size, d))
            eye[np.arange(boxed.size), boxed] = 1.0
            rows.append(eye)
            A = np.vstack(rows)
            self._n_eq = Aeq.shape[0]
            self._boxed = boxed
            self._l = np.concatenate([np.zeros(self._n_eq), lb[boxed]])
            self._u = np.concatenate([np.zeros(self._n_eq), ub[boxed]])
            self._ws = GeneralQpWorkspace(P, A, self._l, self._u, self.settings)

    def plan(self, z_p: np.ndarray, t: int):
        task = self.task
        y_r = task.y_ref_window(t)
        free = self.omega_z @ z_p
        if self._cho is not None:
            rhs = self.omega_u.T @ (task.Q @ (y_r - free))
            u_f = scipy.linalg.cho_solve(self._cho, rhs, check_finite=False)
            dy = self.omega_u @ u_f + free - y_r
            obj = float(dy @ task.Q @ dy + u_f @ task.R @ u_f)
            return u_f, PlanInfo(objective=obj, iterations=0, status="solved")
        mLf = task.R.shape[0]
        q = np.concatenate([np.zeros(mLf), -2.0 * (task.Q @ y_r)])
        l = self._l.copy()
        u = self._u.copy()
        l[:self._n_eq] = free
        u[:self._n_eq] = free
        sol = self._ws.solve(q, l, u)
        if sol.status is QpStatus.PRIMAL_INFEASIBLE:
            raise RuntimeError("predictor plan infeasible under the given boxes")
        u_f = sol.x[:mLf]
        return u_f, PlanInfo(objective=sol.objective + float(y_r @ task.Q @ y_r),
                             iterations=sol.iterations, status=sol.status.value)


class _WoodburyRddpc:
    """Equality-constrained regularized solve in low-rank spectral form.

    The quadratic ``Y'QY + U'RU + lam (I - Pi)'(I - Pi)`` equals
    ``lam I + F C(lam) F'`` with F = [Y', U', W', L] fixed by the dataset
    (Pi = L W from the projection factors). Orthonormalizing F once and
    eigendecomposing the small core makes every solve an exact spectral
    application costing O(n_cols * rank) instead of a dense factorization.
    """

    def __init__(self, Y_f, U_f, Z_p, left, right, Q, R, lam: float):
        self.lam = float(lam)
        self.Z = Z_p
        d_w = right.shape[0]
        pq = Q.shape[0]
        mr = R.shape[0]
        F = np.hstack([Y_f.T, U_f.T, right.T, left])
        Qf, Rf = np.linalg.qr(F)
        r = F.shape[1]
        C = np.zeros((r, r))
        C[:pq, :pq] = Q
        C[pq:pq + mr, pq:pq + mr] = R
        i3 = pq + mr
        i4 = i3 + d_w
        lam_ = self.lam
        C[i3:i4, i3:i4] = lam_ * (left.T @ left)
        C[i3:i4, i4:] = -lam_ * np.eye(d_w)
        C[i4:, i3:i4] = -lam_ * np.eye(d_w)
        core = Rf @ C @ Rf.T
        d, V = np.linalg.eigh(0.5 * (core + core.T))
        denom = lam_ + d
        floor = 1e-14 * max(lam_, float(np.abs(d).max(initial=0.0)))
        denom = np.where(denom > floor, denom, floor)
        self._shrink = d / denom
        self._basis = Qf @ V
        PiZ = self._apply_pinv(self.Z.T)
        schur = self.Z @ PiZ
        self._schur_lu = scipy.linalg.lu_factor(schur, check_finite=False)
        self._PiZ = PiZ

    def _apply_pinv(self, V):
        """(lam I + F C F')^{-1} V, applied spectrally."""
        proj = self._basis.T @ V
        if V.ndim == 1:
            return (V - self._basis @ (self._shrink * proj)) / self.lam
        return (V - self._basis @ (self._shrink[:, None] * proj)) / self.lam

    def solve(self, q, b):
        """min g'(lam I + F C F')g + q'g  s.t.  Z g = b."""
        half = self._apply_pinv(q) * 0.5
        nu = -scipy.linalg.lu_solve(self._schur_lu, b + self.Z @ half, check_finite=False)
        return -half - self._PiZ @ nu


class RddpcPlanner:
    """Regularized plan over the behavioral coefficient vector g.

    Without boxes the problem reduces to an equality-constrained quadratic
    in g, solved either through the low-rank Woodbury form (default, exact)
    or a dense KKT factorization; with boxes it is posed jointly over
    (g, u_f, y_f) for the operator-splitting solver. ``norm_order=1``
    replaces the squared penalty with a 1-norm via auxiliary variables.
    """

    def __init__(self, bundle: HankelBundle, ivset: iv_mod.InstrumentSet, task: ControlTask,
                 lam: float, norm_order: int = 2,
                 settings: Optional[SolverSettings] = None, dense: bool = False):
        self.task = task
        self.bundle = bundle
        self.lam = float(lam)
        self.norm_order = norm_order
        self.settings = settings or SolverSettings()
        if ivset.pi is None:
            iv_mod.projection(bundle, ivset)
        self._ivset = ivset
        self.Z_p = bundle.Z_p
        self.U_f = bundle.U_f
        self.Y_f = bundle.Y_f
        nbar = bundle.n_cols
        self._reg = None
        self._residual_map = None if norm_order == 2 else (np.eye(nbar) - ivset.pi)
        self.mLf = task.R.shape[0]
        self.pLf = task.Q.shape[0]
        self._eq = None
        self._wb = None
        if task.is_unconstrained and norm_order == 2:
            if self.lam > 0.0 and not dense and ivset.pi_factors is not None:
                left, right = ivset.pi_factors
                self._wb = _WoodburyRddpc(self.Y_f, self.U_f, self.Z_p, left, right,
                                          task.Q, task.R, self.lam)
            else:
                self._reg = self._penalty_matrix(ivset, nbar)
                P = 2.0 * (self.Y_f.T @ task.Q @ self.Y_f + self.U_f.T @ task.R @ self.U_f
                           + self.lam * self._reg)
                self._eq = EqualityWorkspace(P, self.Z_p)
        else:
            self._build_general(nbar)

    @staticmethod
    def _penalty_matrix(ivset: iv_mod.InstrumentSet, nbar: int) -> np.ndarray:
        """(I - Pi)'(I - Pi), assembled from the cached low-rank factors."""
        pi = ivset.pi
        if ivset.pi_factors is not None:
            left, right = ivset.pi_factors
            core = right.T @ ((left.T @ left) @ right)
        else:
            core = pi.T @ pi
        return np.eye(nbar) - pi - pi.T + core

    def _build_general(self, nbar: int):
        task = self.task
        mLf, pLf = self.mLf, self.pLf
        n_aux = 0 if self.norm_order == 2 else nbar
        d = nbar + mLf + pLf + n_aux
        P = np.zeros((d, d))
        q_const = np.zeros(d)
        if self.norm_order == 2:
            if self._reg is None:
                self._reg = self._penalty_matrix(self._ivset, nbar)
            P[:nbar, :nbar] = 2.0 * self.lam * self._reg
        else:
            q_const[nbar + mLf + pLf:] = self.lam
        P[nbar:nbar + mLf, nbar:nbar + mLf] = 2.0 * task.R
        P[nbar + mLf:nbar + mLf + pLf, nbar + mLf:nbar + mLf + pLf] = 2.0 * task.Q
        rows = []
        l_parts = []
        u_parts = []
        n_z = self.Z_p.shape[0]
        eq = np.zeros((n_z + mLf + pLf, d))
        eq[:n_z, :nbar] = self.Z_p
        eq[n_z:n_z + mLf, :nbar] = self.U_f
        eq[n_z:n_z + mLf, nbar:nbar + mLf] = -np.eye(mLf)
        eq[n_z + mLf:, :nbar] = self.Y_f
        eq[n_z + mLf:, nbar + mLf:nbar + mLf + pLf] = -np.eye(pLf)
        rows.append(eq)
        l_parts.append(np.zeros(n_z + mLf + pLf))
        u_parts.append(np.zeros(n_z + mLf + pLf))
        ub_box = task.input_bounds()
        if ub_box is not None:
            sel = np.zeros((mLf, d))
            sel[:, nbar:nbar + mLf] = np.eye(mLf)
            rows.append(sel)
            l_parts.append(ub_box[0])
            u_parts.append(ub_box[1])
        yb = task.output_bounds()
        if yb is not None:
            sel = np.zeros((pLf, d))
            sel[:, nbar + mLf:nbar + mLf + pLf] = np.eye(pLf)
            rows.append(sel)
            l_parts.append(yb[0])
            u_parts.append(yb[1])
        if self.norm_order == 1:
            res = self._residual_map
            block = np.zeros((2 * nbar, d))
            block[:nbar, :nbar] = res
            block[:nbar, nbar + mLf + pLf:] = -np.eye(nbar)
            block[nbar:, :nbar] = -res
            block[nbar:, nbar + mLf + pLf:] = -np.eye(nbar)
            rows.append(block)
            l_parts.append(np.full(2 * nbar, -np.inf))
            u_parts.append(np.zeros(2 * nbar))
        A = np.vstack(rows)
        self._l = np.concatenate(l_parts)
        self._u = np.concatenate(u_parts)
        self._n_z = n_z
        self._q_const = q_const
        self._dim = d
        self._nbar = nbar
        self._ws = GeneralQpWorkspace(P, A, self._l, self._u, self.settings)

    def _penalty_value(self, g: np.ndarray) -> float:
        if self._ivset.pi_factors is not None:
            left, right = self._ivset.pi_factors
            resid = g - left @ (right @ g)
        else:
            resid = g - self._ivset.pi @ g
        return self.lam * float(resid @ resid)

    def plan(self, z_p: np.ndarray, t: int):
        task = self.task
        y_r = task.y_ref_window(t)
        if self._wb is not None or self._eq is not None:
            q = -2.0 * (self.Y_f.T @ (task.Q @ y_r))
            if self._wb is not None:
                g = self._wb.solve(q, z_p)
            else:
                g = self._eq.solve(q, z_p)
            u_f = self.U_f @ g
            dy = self.Y_f @ g - y_r
            obj = float(dy @ task.Q @ dy + u_f @ task.R @ u_f) + self._penalty_value(g)
            return u_f, g, PlanInfo(objective=obj, iterations=0, status="solved")
        nbar, mLf, pLf = self._nbar, self.mLf, self.pLf
        q = self._q_const.copy()
        q[nbar + mLf:nbar + mLf + pLf] = -2.0 * (task.Q @ y_r)
        l = self._l.copy()
        u = self._u.copy()
        l[:self._n_z] = z_p
        u[:self._n_z] = z_p
        sol = self._ws.solve(q, l, u)
        if sol.status is QpStatus.PRIMAL_INFEASIBLE:
            raise RuntimeError("regularized plan infeasible: z_p consistency cannot be met")
        g = sol.x[:nbar]
        u_f = sol.x[nbar:nbar + mLf]
        return u_f, g, PlanInfo(objective=sol.objective + float(y_r @ task.Q @ y_r),
                                iterations=sol.iterations, status=sol.status.value)


class OraclePlanner:
    """Certainty-equivalent model-based plan from the filtered state."""

    def __init__(self, model: StateSpaceModel, task: ControlTask,
                 settings: Optional[SolverSettings] = None):
        self.model = model
        self.task = task
        self.settings = settings or SolverSettings()
        self.gamma = extended_observability(model.A, model.C, task.L_f)
        self.h_u = toeplitz(model.A, model.B, model.C, model.D, task.L_f)
        if task.is_unconstrained:
            H = self.h_u.T @ task.Q @ self.h_u + task.R
            self._cho = scipy.linalg.cho_factor(H, check_finite=False)
            self._ws = None
        else:
            self._cho = None
            self._inner = PredictorPlanner(np.hstack([self.gamma, self.h_u]), task, settings)

    def plan(self, x_hat: np.ndarray, t: int):
        task = self.task
        y_r = task.y_ref_window(t)
        free = self.gamma @ x_hat
        if self._cho is not None:
            rhs = self.h_u.T @ (task.Q @ (y_r - free))
            u_f = scipy.linalg.cho_solve(self._cho, rhs, check_finite=False)
            dy = self.h_u @ u_f + free - y_r
            obj = float(dy @ task.Q @ dy + u_f @ task.R @ u_f)
            return u_f, PlanInfo(objective=obj, iterations=0, status="solved")
        return self._inner.plan(x_hat, t)


def predictor_step(ivset: iv_mod.InstrumentSet, z_p: np.ndarray, task: ControlTask, t: int,
                   bundle: Optional[HankelBundle] = None,
                   settings: Optional[SolverSettings] = None) -> np.ndarray:
    """One plan of the predictor-based controller; returns the u_f vector."""
    if ivset.omega is None:
        if bundle is None:
            raise ValueError("instrument set has no predictor; pass the bundle to fit one")
        iv_mod.predictor(bundle, ivset)
    planner = PredictorPlanner(ivset.omega, task, settings)
    u_f, _ = planner.plan(np.asarray(z_p, dtype=float).ravel(), t)
    return u_f


def rddpc_step(bundle: HankelBundle, ivset: iv_mod.InstrumentSet, task: ControlTask,
               z_p: np.ndarray, lam: float, t: int = None, norm_order: int = 2,
               settings: Optional[SolverSettings] = None):
    """One plan of the projection-regularized controller; returns (u_f, g)."""
    if t is None:
        t = task.L_p
    planner = RddpcPlanner(bundle, ivset, task, lam, norm_order, settings)
    u_f, g, _ = planner.plan(np.asarray(z_p, dtype=float).ravel(), t)
    return u_f, g


def oracle_step(model: StateSpaceModel, kstate: KalmanState, task: ControlTask,
                t: int, settings: Optional[SolverSettings] = None) -> np.ndarray:
    """One certainty-equivalent plan from the current filtered state."""
    planner = OraclePlanner(model, task, settings)
    u_f, _ = planner.plan(kstate.x_hat, t)
    return u_f


class TightenedPlanner:
    """Direct instrument-tightened plan over the moment coefficient h.

    The behavioral coefficient is restricted to the instrument row space,
    ``g = Phi' h``, so the plan triple (z_p, u_f, y_f) = [Z_p; U_f; Y_f] g
    is tied through h. With reference-blind instruments the z_p-consistency
    rows pin h completely and the plan collapses onto the loop controller's
    own behavior; richer instruments restore the tracking freedom.
    """

    def __init__(self, bundle: HankelBundle, ivset: iv_mod.InstrumentSet, task: ControlTask,
                 settings: Optional[SolverSettings] = None):
        self.task = task
        self.settings = settings or SolverSettings()
        phiT = ivset.phi.T
        self.Zh = bundle.Z_p @ phiT
        self.Uh = bundle.U_f @ phiT
        self.Yh = bundle.Y_f @ phiT
        if task.is_unconstrained:
            P = 2.0 * (self.Yh.T @ task.Q @ self.Yh + self.Uh.T @ task.R @ self.Uh)
            self._eq = EqualityWorkspace(P, self.Zh)
            self._ws = None
        else:
            q_dim = phiT.shape[1]
            mLf = task.R.shape[0]
            pLf = task.Q.shape[0]
            P = 2.0 * (self.Yh.T @ task.Q @ self.Yh + self.Uh.T @ task.R @ self.Uh)
            rows = [self.Zh]
            l_parts = [np.zeros(self.Zh.shape[0])]
            u_parts = [np.zeros(self.Zh.shape[0])]
            ub_box = task.input_bounds()
            if ub_box is not None:
                rows.append(self.Uh)
                l_parts.append(ub_box[0])
                u_parts.append(ub_box[1])
            yb = task.output_bounds()
            if yb is not None:
                rows.append(self.Yh)
                l_parts.append(yb[0])
                u_parts.append(yb[1])
            self._n_z = self.Zh.shape[0]
            self._l = np.concatenate(l_parts)
            self._u = np.concatenate(u_parts)
            self._ws = GeneralQpWorkspace(P, np.vstack(rows), self._l, self._u, self.settings)
            self._eq = None

    def plan(self, z_p: np.ndarray, t: int):
        task = self.task
        y_r = task.y_ref_window(t)
        q = -2.0 * (self.Yh.T @ (task.Q @ y_r))
        if self._eq is not None:
            h = self._eq.solve(q, z_p)
            iters = 0
            status = "solved"
        else:
            l = self._l.copy()
            u = self._u.copy()
            l[:self._n_z] = z_p
            u[:self._n_z] = z_p
            sol = self._ws.solve(q, l, u)
            if sol.status is QpStatus.PRIMAL_INFEASIBLE:
                raise RuntimeError("tightened plan infeasible under the given boxes")
            h = sol.x
            iters = sol.iterations
            status = sol.status.value
        u_f = self.Uh @ h
        y_hat = self.Yh @ h
        dy = y_hat - y_r
        obj = float(dy @ task.Q @ dy + u_f @ task.R @ u_f)
        return u_f, y_hat, PlanInfo(objective=obj, iterations=iters, status=status)


def tightened_step(bundle: HankelBundle, ivset: iv_mod.InstrumentSet, task: ControlTask,
                   z_p: np.ndarray, t: int = None,
                   settings: Optional[SolverSettings] = None):
    """One direct instrument-tightened plan; returns (u_f, y_f_hat)."""
    if t is None:
        t = task.L_p
    planner = TightenedPlanner(bundle, ivset, task, settings)
    u_f, y_hat, _ = planner.plan(np.asarray(z_p, dtype=float).ravel(), t)
    return u_f, y_hat


@dataclass
class RunRecord:
    """One closed-loop experiment: full trajectory, cost, per-step logs."""

    trajectory: Trajectory
    warmup_len: int
    J: float
    variant: str
    status: str = "ok"
    seed: Optional[int] = None
    fingerprint: str = ""
    lam: Optional[float] = None
    snr_db: Optional[float] = None
    replicate: Optional[int] = None
    plan_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    plan_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_csv(self, path) -> None:
        """Per-step log: t, u, y, r channels, plan cost, solver iterations."""
        traj = self.trajectory
        m = traj.u.shape[1]
        p = traj.y.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = (["t"] + [f"u{i+1}" for i in range(m)] + [f"y{i+1}" for i in range(p)]
                      + [f"r{i+1}" for i in range(p)] + ["plan_cost", "solver_iterations"])
            writer.writerow(header)
            for t in range(traj.length):
                k = t - self.warmup_len
                cost = repr(float(self.plan_costs[k])) if 0 <= k < self.plan_costs.shape[0] else ""
                iters = str(int(self.plan_iterations[k])) if 0 <= k < self.plan_iterations.shape[0] else ""
                row = ([t] + [repr(float(v)) for v in traj.u[t]]
                       + [repr(float(v)) for v in traj.y[t]]
                       + [repr(float(v)) for v in traj.r[t]] + [cost, iters])
                writer.writerow(row)

    def sidecar(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "variant": self.variant,
            "seed": self.seed,
            "lam": self.lam,
            "snr_db": self.snr_db,
            "replicate": self.replicate,
            "J": self.J,
            "status": self.status,
            "warmup_len": self.warmup_len,
        }


def cost_index(record: RunRecord, Q: np.ndarray, R: np.ndarray) -> float:
    """Tracking cost over the controlled window using the per-step leading
    diagonal blocks of the stacked weights."""
    traj = record.trajectory
    p = traj.y.shape[1]
    m = traj.u.shape[1]
    Qs = np.atleast_2d(np.asarray(Q, dtype=float))[:p, :p]
    Rs = np.atleast_2d(np.asarray(R, dtype=float))[:m, :m]
    t0 = record.warmup_len
    if traj.r.shape[0] != traj.length:
        raise ValueError("record has no reference signal")
    dy = traj.y[t0:] - traj.r[t0:]
    uu = traj.u[t0:]
    return float(np.einsum("ti,ij,tj->", dy, Qs, dy) + np.einsum("ti,ij,tj->", uu, Rs, uu))


def receding_horizon_run(plant: StateSpaceModel, variant: ControllerVariant, task: ControlTask,
                         noise: np.ndarray, warmup_ctrl: ControllerModel,
                         bundle: Optional[HankelBundle] = None,
                         ivset: Optional[iv_mod.InstrumentSet] = None,
                         settings: Optional[SolverSettings] = None,
                         seed: Optional[int] = None, fingerprint: str = "",
                         snr_db: Optional[float] = None,
                         replicate: Optional[int] = None) -> RunRecord:
    """Run one closed-loop experiment of L_p warmup + N_c controlled steps.

    The first L_p samples are produced by the existing loop controller so
    the online window is filled realistically; from then on the variant
    plans at every step and only the first planned input is applied. The
    scheduled innovation sequence ``noise`` must cover all L_p + N_c steps.
    """
    L_p, N_c, L_f = task.L_p, task.N_c, task.L_f
    T = L_p + N_c
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 1:
        noise = noise[:, None]
    if noise.shape != (T, plant.p):
        raise ValueError(f"noise must have shape ({T}, {plant.p}), got {noise.shape}")
    ref = task.reference
    m, p = plant.m, plant.p
    u_log = np.zeros((T, m))
    y_log = np.zeros((T, p))
    plan_costs = np.full(N_c, np.nan)
    plan_iters = np.zeros(N_c, dtype=int)
    x = np.zeros(plant.n)
    xc = np.zeros(warmup_ctrl.n_c)
    loop_inv = feedback_loop_matrix(plant, warmup_ctrl)

    tag = variant.tag
    planner = None
    kstate = None
    if tag is VariantTag.ORACLE:
        if plant.K is None:
            raise ValueError("oracle variant requires the plant innovation gain K")
        planner = OraclePlanner(plant, task, settings)
        kstate = KalmanState(x_hat=np.zeros(plant.n))
    elif tag is VariantTag.RDDPC_IV:
        if bundle is None or ivset is None:
            raise ValueError("regularized variant requires a bundle and instrument set")
        planner = RddpcPlanner(bundle, ivset, task, variant.lam, variant.norm_order, settings)
    elif tag in VARIANT_IV:
        if ivset is None:
            raise ValueError(f"variant {tag.value} requires an instrument set")
        if ivset.omega is None:
            if bundle is None:
                raise ValueError("instrument set has no predictor; pass the bundle to fit one")
            iv_mod.predictor(bundle, ivset)
        planner = PredictorPlanner(ivset.omega, task, settings)
    elif tag is not VariantTag.LOOP_BASELINE:
        raise ValueError(f"unknown variant {tag}")

    status = "ok"
    t_reached = 0
    try:
        for t in range(L_p):
            u_t, y_t, x, xc = closed_loop_step(plant, warmup_ctrl, x, xc, ref[t], noise[t],
                                               loop_inv)
            u_log[t] = u_t
            y_log[t] = y_t
            if kstate is not None:
                kstate = kalman_update(plant, kstate, u_t, y_t)
            t_reached = t + 1
        for t in range(L_p, T):
            if tag is VariantTag.LOOP_BASELINE:
                u_t, y_t, x, xc = closed_loop_step(plant, warmup_ctrl, x, xc, ref[t], noise[t],
                                                   loop_inv)
            else:
                if tag is VariantTag.ORACLE:
                    u_f, info = planner.plan(kstate.x_hat, t)
                elif tag is VariantTag.RDDPC_IV:
                    z_p = stack_window(u_log[:t], y_log[:t], L_p)
                    u_f, _, info = planner.plan(z_p, t)
                else:
                    z_p = stack_window(u_log[:t], y_log[:t], L_p)
                    u_f, info = planner.plan(z_p, t)
                u_t = u_f[:m]
                plan_costs[t - L_p] = info.objective
                plan_iters[t - L_p] = info.iterations
                y_t, x = plant_step(plant, x, u_t, noise[t])
                if kstate is not None:
                    kstate = kalman_update(plant, kstate, u_t, y_t)
            u_log[t] = u_t
            y_log[t] = y_t
            t_reached = t + 1
    except Exception as exc:  # record the partial run, flagged failed
        status = f"failed: {exc}"
        u_log = u_log[:t_reached]
        y_log = y_log[:t_reached]

    traj = Trajectory(u=u_log, y=y_log, r=ref[:u_log.shape[0]], e=noise[:u_log.shape[0]])
    record = RunRecord(trajectory=traj, warmup_len=L_p, J=np.nan, variant=variant.label,
                       status=status, seed=seed, fingerprint=fingerprint, lam=variant.lam,
                       snr_db=snr_db, replicate=replicate,
                       plan_costs=plan_costs, plan_iterations=plan_iters)
    if status == "ok":
        record.J = cost_index(record, task.Q, task.R)
    return record
