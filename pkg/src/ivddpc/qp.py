"""Dense convex quadratic programming.

Problems are ``min 0.5 x'Px + q'x`` subject to linear equality constraints
and per-variable box bounds. The solver is a dense operator-splitting
iteration (ADMM with over-relaxation and a final polishing step) whose KKT
matrix is factorized once and reused across iterations; a workspace handle
exposes the same factorization for repeated solves that only change the
linear term and constraint offsets, which is the receding-horizon pattern.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg


class QpStatus(str, Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass(frozen=True)
class SolverSettings:
    """Operator-splitting parameters; defaults suit the control workloads."""

    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-8
    max_iter: int = 20000
    polish: bool = True
    check_interval: int = 25

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.alpha < 2:
            raise ValueError("relaxation factor must lie in (0, 2)")


@dataclass(frozen=True)
class QuadraticProgram:
    """min 0.5 x'Px + q'x  s.t.  Aeq x = beq,  lb <= x <= ub."""

    P: np.ndarray
    q: np.ndarray
    Aeq: Optional[np.ndarray] = None
    beq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        d = q.shape[0]
        if P.shape != (d, d):
            raise ValueError(f"P must be {d}x{d}, got {P.shape}")
        scale = max(1.0, float(np.abs(P).max()))
        if np.abs(P - P.T).max() > 1e-10 * scale:
            raise ValueError("P must be symmetric to 1e-10 relative tolerance")
        P = 0.5 * (P + P.T)
        Aeq = self.Aeq
        beq = self.beq
        if Aeq is not None:
            Aeq = np.atleast_2d(np.asarray(Aeq, dtype=float))
            beq = np.asarray(beq, dtype=float).ravel()
            if Aeq.shape[1] != d or beq.shape[0] != Aeq.shape[0]:
                raise ValueError("equality constraint dimensions are inconsistent")
        elif beq is not None:
            raise ValueError("beq given without Aeq")
        lb = np.full(d, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        ub = np.full(d, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if lb.shape[0] != d or ub.shape[0] != d:
            raise ValueError("bound dimensions do not match the variable count")
        if np.any(lb > ub):
            raise ValueError("lb must be elementwise <= ub")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "Aeq", Aeq)
        object.__setattr__(self, "beq", beq)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return self.q.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    y: Optional[np.ndarray] = None
    polished: bool = False


def _objective(P, q, x) -> float:
    return float(0.5 * x @ (P @ x) + q @ x)


class GeneralQpWorkspace:
    """Operator-splitting core on the form ``l <= A x <= u``.

    The structure (P, A) is fixed at construction and its KKT factorization
    cached; ``solve`` may be called repeatedly with new q, l, u. Equality
    rows (l == u) receive a stiffer penalty, as is standard.
    """

    def __init__(self, P: np.ndarray, A: np.ndarray, l: np.ndarray, u: np.ndarray,
                 settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        self.P = np.ascontiguousarray(P, dtype=float)
        self.A = np.ascontiguousarray(A, dtype=float)
        self.l = np.asarray(l, dtype=float).ravel().copy()
        self.u = np.asarray(u, dtype=float).ravel().copy()
        self.n = self.P.shape[0]
        self.mcon = self.A.shape[0]
        if self.A.shape != (self.mcon, self.n):
            raise ValueError("A must have shape (m, n)")
        if self.l.shape[0] != self.mcon or self.u.shape[0] != self.mcon:
            raise ValueError("bounds must match the constraint row count")
        s = self.settings
        rho = np.full(self.mcon, s.rho)
        eq_rows = np.isfinite(self.l) & np.isfinite(self.u) & (self.u - self.l < 1e-12)
        rho[eq_rows] = 1e3 * s.rho
        self.rho = rho
        self.rho_inv = np.reciprocal(rho) if self.mcon else rho
        if self.mcon:
            kkt = np.zeros((self.n + self.mcon, self.n + self.mcon))
            kkt[:self.n, :self.n] = self.P + s.sigma * np.eye(self.n)
            kkt[:self.n, self.n:] = self.A.T
            kkt[self.n:, :self.n] = self.A
            kkt[self.n:, self.n:] = -np.diag(self.rho_inv)
            self._kkt_lu = scipy.linalg.lu_factor(kkt, check_finite=False)
        else:
            self._kkt_lu = None

    def solve(self, q, l=None, u=None) -> QpSolution:
        s = self.settings
        q = np.asarray(q, dtype=float).ravel()
        if l is not None:
            self.l = np.asarray(l, dtype=float).ravel().copy()
        if u is not None:
            self.u = np.asarray(u, dtype=float).ravel().copy()
        if self.mcon == 0:
            x = scipy.linalg.lstsq(self.P, -q, check_finite=False)[0]
            r_dual = float(np.abs(self.P @ x + q).max(initial=0.0))
            return QpSolution(x=x, objective=_objective(self.P, q, x), status=QpStatus.SOLVED,
                              iterations=0, primal_residual=0.0, dual_residual=r_dual)
        n, mcon = self.n, self.mcon
        x = np.zeros(n)
        z = np.clip(np.zeros(mcon), self.l, self.u)
        y = np.zeros(mcon)
        status = QpStatus.MAX_ITER
        iterations = s.max_iter
        r_prim = r_dual = np.inf
        y_prev_check = y.copy()
        rhs = np.empty(n + mcon)
        for k in range(1, s.max_iter + 1):
            rhs[:n] = s.sigma * x - q
            rhs[n:] = z - self.rho_inv * y
            sol = scipy.linalg.lu_solve(self._kkt_lu, rhs, check_finite=False)
            x_t = sol[:n]
            z_t = z + self.rho_inv * (sol[n:] - y)
            x = s.alpha * x_t + (1.0 - s.alpha) * x
            z_relaxed = s.alpha * z_t + (1.0 - s.alpha) * z
            z_new = np.clip(z_relaxed + self.rho_inv * y, self.l, self.u)
            y = y + self.rho * (z_relaxed - z_new)
            z = z_new
            if k % s.check_interval == 0 or k == s.max_iter:
                Ax = self.A @ x
                r_prim = float(np.abs(Ax - z).max(initial=0.0))
                dual_vec = self.P @ x + q + self.A.T @ y
                r_dual = float(np.abs(dual_vec).max(initial=0.0))
                eps_prim = s.eps_abs + s.eps_rel * max(np.abs(Ax).max(initial=0.0),
                                                       np.abs(z).max(initial=0.0))
                eps_dual = s.eps_abs + s.eps_rel * max(np.abs(self.P @ x).max(initial=0.0),
                                                       np.abs(self.A.T @ y).max(initial=0.0),
                                                       np.abs(q).max(initial=0.0))
                if r_prim <= eps_prim and r_dual <= eps_dual:
                    status = QpStatus.SOLVED
                    iterations = k
                    break
                dy = y - y_prev_check
                if self._primal_infeasible(dy):
                    sol_out = QpSolution(x=x, objective=_objective(self.P, q, x),
                                         status=QpStatus.PRIMAL_INFEASIBLE, iterations=k,
                                         primal_residual=r_prim, dual_residual=r_dual, y=y.copy())
                    return sol_out
                y_prev_check = y.copy()
        solution = QpSolution(x=x, objective=_objective(self.P, q, x), status=status,
                              iterations=iterations, primal_residual=r_prim,
                              dual_residual=r_dual, y=y.copy())
        if s.polish and solution.status is QpStatus.SOLVED:
            self._polish(q, solution)
        return solution

    def _primal_infeasible(self, dy: np.ndarray) -> bool:
        s = self.settings
        norm_dy = np.abs(dy).max(initial=0.0)
        if norm_dy <= s.eps_infeas:
            return False
        dyn = dy / norm_dy
        if np.abs(self.A.T @ dyn).max(initial=0.0) > s.eps_infeas:
            return False
        dy_pos = np.maximum(dyn, 0.0)
        dy_neg = np.minimum(dyn, 0.0)
        # an unbounded bound can only certify infeasibility with zero weight
        if np.any(dy_pos[~np.isfinite(self.u)] > s.eps_infeas):
            return False
        if np.any(-dy_neg[~np.isfinite(self.l)] > s.eps_infeas):
            return False
        support = float(np.sum(self.u[np.isfinite(self.u)] * dy_pos[np.isfinite(self.u)])
                        + np.sum(self.l[np.isfinite(self.l)] * dy_neg[np.isfinite(self.l)]))
        return support < -s.eps_infeas

    def _polish(self, q: np.ndarray, solution: QpSolution) -> None:
        """Solve the KKT system of the detected active set and keep the
        refined point when it is feasible and at least as accurate."""
        y = solution.y
        act_tol = 1e-8 * max(1.0, np.abs(y).max(initial=0.0))
        eq_rows = np.isfinite(self.l) & np.isfinite(self.u) & (self.u - self.l < 1e-12)
        low = (y < -act_tol) & np.isfinite(self.l) & ~eq_rows
        up = (y > act_tol) & np.isfinite(self.u) & ~eq_rows
        active = eq_rows | low | up
        idx = np.flatnonzero(active)
        A_act = self.A[idx]
        b_act = np.where(eq_rows[idx] | low[idx], self.l[idx], self.u[idx])
        n_act = idx.shape[0]
        n = self.n
        delta = 1e-8
        kkt = np.zeros((n + n_act, n + n_act))
        kkt[:n, :n] = self.P + delta * np.eye(n)
        kkt[:n, n:] = A_act.T
        kkt[n:, :n] = A_act
        kkt[n:, n:] = -delta * np.eye(n_act)
        rhs = np.concatenate([-q, b_act])
        try:
            lu = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            return
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        # iterative refinement against the unregularized KKT system
        for _ in range(3):
            res = rhs.copy()
            res[:n] -= self.P @ sol[:n] + A_act.T @ sol[n:]
            res[n:] -= A_act @ sol[:n]
            sol = sol + scipy.linalg.lu_solve(lu, res, check_finite=False)
        x_pol = sol[:n]
        if not np.all(np.isfinite(x_pol)):
            return
        y_pol = np.zeros(self.mcon)
        y_pol[idx] = sol[n:]
        Ax = self.A @ x_pol
        viol_low = np.maximum(self.l - Ax, 0.0, where=np.isfinite(self.l), out=np.zeros(self.mcon))
        viol_up = np.maximum(Ax - self.u, 0.0, where=np.isfinite(self.u), out=np.zeros(self.mcon))
        r_prim = float(np.maximum(viol_low, viol_up).max(initial=0.0))
        r_dual = float(np.abs(self.P @ x_pol + q + self.A.T @ y_pol).max(initial=0.0))
        if r_prim <= max(solution.primal_residual, self.settings.eps_abs) and \
                r_dual <= max(solution.dual_residual, self.settings.eps_abs):
            solution.x = x_pol
            solution.y = y_pol
            solution.objective = _objective(self.P, q, x_pol)
            solution.primal_residual = r_prim
            solution.dual_residual = r_dual
            solution.polished = True


def _general_form(qp: QuadraticProgram):
    """Stack equality rows and the identity rows of box-bounded variables."""
    d = qp.dim
    rows = []
    l_parts = []
    u_parts = []
    if qp.Aeq is not None and qp.Aeq.shape[0] > 0:
        rows.append(qp.Aeq)
        l_parts.append(qp.beq)
        u_parts.append(qp.beq)
    boxed = np.flatnonzero(np.isfinite(qp.lb) | np.isfinite(qp.ub))
    if boxed.size:
        eye = np.zeros((boxed.size, d))
        eye[np.arange(boxed.size), boxed] = 1.0
        rows.append(eye)
        l_parts.append(qp.lb[boxed])
        u_parts.append(qp.ub[boxed])
    if not rows:
        return np.zeros((0, d)), np.zeros(0), np.zeros(0)
    return np.vstack(rows), np.concatenate(l_parts), np.concatenate(u_parts)


def solve(qp: QuadraticProgram, settings: Optional[SolverSettings] = None) -> QpSolution:
    """One-shot solve of a QuadraticProgram; see GeneralQpWorkspace for the
    repeated-solve interface."""
    A, l, u = _general_form(qp)
    ws = GeneralQpWorkspace(qp.P, A, l, u, settings)
    return ws.solve(qp.q)


class EqualityWorkspace:
    """Direct KKT factorization for ``min 0.5 x'Px + q'x s.t. Aeq x = beq``.

    Falls back to a least-squares KKT solve (minimum-norm minimizer) when
    the system is singular, which happens for rank-deficient P restricted
    to the feasible subspace.
    """

    def __init__(self, P: np.ndarray, Aeq: Optional[np.ndarray] = None):
        self.P = np.ascontiguousarray(P, dtype=float)
        self.n = self.P.shape[0]
        if Aeq is None:
            Aeq = np.zeros((0, self.n))
        self.Aeq = np.ascontiguousarray(Aeq, dtype=float)
        k = self.Aeq.shape[0]
        kkt = np.zeros((self.n + k, self.n + k))
        kkt[:self.n, :self.n] = self.P
        if k:
            kkt[:self.n, self.n:] = self.Aeq.T
            kkt[self.n:, :self.n] = self.Aeq
        self._kkt = kkt
        self._lu = None
        self._singular = False
        try:
            self._lu = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            self._singular = True

    def solve(self, q, beq=None) -> np.ndarray:
        q = np.asarray(q, dtype=float).ravel()
        k = self.Aeq.shape[0]
        if beq is None:
            beq = np.zeros(k)
        rhs = np.concatenate([-q, np.asarray(beq, dtype=float).ravel()])
        if not self._singular:
            sol = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
            x = sol[:self.n]
            resid = self._kkt @ sol - rhs
            scale = max(1.0, float(np.abs(rhs).max(initial=0.0)))
            if np.all(np.isfinite(x)) and np.abs(resid).max(initial=0.0) <= 1e-6 * scale:
                return x
            self._singular = True
        sol = scipy.linalg.lstsq(self._kkt, rhs, check_finite=False)[0]
        return sol[:self.n]


def solve_equality_ls(P, q, Aeq=None, beq=None) -> np.ndarray:
    """Exact minimizer of an equality-constrained convex quadratic."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return EqualityWorkspace(P, Aeq).solve(q, beq)
