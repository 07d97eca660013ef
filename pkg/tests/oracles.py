"""Independent reference implementations used to check the package.

Everything here is deliberately written from the definitions (per-sample
recursions, index arithmetic, KKT enumeration) without reusing the package's
own code paths.
"""
import numpy as np


def open_loop_by_recursion(A, B, C, D, K, u, e, x0):
    """Per-sample scalar-index state recursion of the innovation form."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    C = np.atleast_2d(C)
    D = np.atleast_2d(D)
    n = A.shape[0]
    m = B.shape[1]
    p = C.shape[0]
    K = np.zeros((n, p)) if K is None else np.atleast_2d(K)
    T = len(u)
    x = np.array(x0, dtype=float).reshape(n).copy()
    ys = np.zeros((T, p))
    for t in range(T):
        for i in range(p):
            acc = e[t][i]
            for j in range(n):
                acc += C[i, j] * x[j]
            for j in range(m):
                acc += D[i, j] * u[t][j]
            ys[t, i] = acc
        x_new = np.zeros(n)
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += A[i, j] * x[j]
            for j in range(m):
                acc += B[i, j] * u[t][j]
            for j in range(p):
                acc += K[i, j] * e[t][j]
            x_new[i] = acc
        x = x_new
    return ys


def lifted_closed_loop(A, B, C, D, K, Ac, Bc, Cc, Dc, r, e, x0=None, xc0=None):
    """Hand-built augmented (n+n_c) closed-loop system, error convention.

    u = (I + Dc D)^{-1} (Cc xc + Dc (r - C x - e)); states stacked [x; xc].
    """
    n = A.shape[0]
    nc = Ac.shape[0]
    p = C.shape[0]
    m = B.shape[1]
    Kmat = np.zeros((n, p)) if K is None else K
    Minv = np.linalg.inv(np.eye(m) + Dc @ D)
    Fx = -Minv @ Dc @ C          # u from x
    Fc = Minv @ Cc               # u from xc
    Fr = Minv @ Dc               # u from (r - e)... applied to r and -e alike
    # y = C x + D u + e
    Yx = C + D @ Fx
    Yc = D @ Fc
    Yr = D @ Fr
    A11 = A + B @ Fx
    A12 = B @ Fc
    A21 = Bc @ (-Yx)
    A22 = Ac - Bc @ Yc
    B1r = B @ Fr
    B2r = Bc @ (np.eye(p) - Yr)
    B1e = -B @ Fr + Kmat
    B2e = Bc @ (-(np.eye(p) - Yr))
    T = len(r)
    z = np.zeros(n + nc)
    if x0 is not None:
        z[:n] = x0
    if xc0 is not None:
        z[n:] = xc0
    us = np.zeros((T, m))
    ys = np.zeros((T, p))
    for t in range(T):
        x = z[:n]
        xc = z[n:]
        u = Fx @ x + Fc @ xc + Fr @ (r[t] - e[t])
        y = C @ x + D @ u + e[t]
        z = np.concatenate([A11 @ x + A12 @ xc + B1r @ r[t] + B1e @ e[t],
                            A21 @ x + A22 @ xc + B2r @ r[t] + B2e @ e[t]])
        us[t] = u
        ys[t] = y
    return us, ys


def closed_loop_dc_gain(A, B, C, D, Ac, Bc, Cc, Dc):
    """Steady state of the loop under a unit constant reference, by solving
    the equilibrium equations for (x, xc, u, y) directly."""
    n = A.shape[0]
    nc = Ac.shape[0]
    m = B.shape[1]
    p = C.shape[0]
    dim = n + nc + m + p
    M = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    ix = slice(0, n)
    ic = slice(n, n + nc)
    iu = slice(n + nc, n + nc + m)
    iy = slice(n + nc + m, dim)
    r = np.ones(p)
    # x = A x + B u
    M[ix, ix] = np.eye(n) - A
    M[ix, iu] = -B
    # xc = Ac xc + Bc (r - y)
    M[ic, ic] = np.eye(nc) - Ac
    M[ic, iy] = Bc
    rhs[ic] = Bc @ r
    # u = Cc xc + Dc (r - y)
    M[iu, iu] = np.eye(m)
    M[iu, ic] = -Cc
    M[iu, iy] = Dc
    rhs[iu] = Dc @ r
    # y = C x + D u
    M[iy, iy] = np.eye(p)
    M[iy, ix] = -C
    M[iy, iu] = -D
    sol = np.linalg.solve(M, rhs)
    return sol[iy]


def hankel_by_index(x, depth):
    """Entry-by-entry Hankel construction from the definition."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T, d = x.shape
    cols = T - depth + 1
    H = np.zeros((d * depth, cols))
    for j in range(cols):
        for k in range(depth):
            for i in range(d):
                H[k * d + i, j] = x[j + k, i]
    return H


def ls_predictor(Z_p, U_f, Y_f):
    """Plain least-squares multi-step predictor Y_f [Z_p; U_f]^+."""
    W = np.vstack([Z_p, U_f])
    return Y_f @ np.linalg.pinv(W)


def quartiles_by_sorting(values):
    """Median and quartiles via the same linear-interpolation rule numpy
    uses, recomputed from a sorted copy."""
    v = sorted(float(x) for x in values)
    n = len(v)

    def q(frac):
        pos = frac * (n - 1)
        lo = int(np.floor(pos))
        hi = int(np.ceil(pos))
        return v[lo] + (pos - lo) * (v[hi] - v[lo])

    return q(0.25), q(0.5), q(0.75)


def active_set_qp(P, q, Aeq=None, beq=None, lb=None, ub=None, tol=1e-10, max_pivots=500):
    """Exact primal active-set solve of a box+equality QP with PD Hessian.

    Starts from the equality-KKT point, then adds the most violated bound as
    an equality / drops the constraint with the most negative multiplier
    until the KKT conditions hold. Verifies optimality before returning.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    d = P.shape[0]
    q = np.asarray(q, dtype=float).ravel()
    if Aeq is None:
        Aeq = np.zeros((0, d))
        beq = np.zeros(0)
    Aeq = np.atleast_2d(np.asarray(Aeq, dtype=float))
    beq = np.asarray(beq, dtype=float).ravel()
    lb = np.full(d, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(d, np.inf) if ub is None else np.asarray(ub, dtype=float)

    active_lo = set()
    active_up = set()

    def kkt_solve():
        rows = [Aeq]
        vals = [beq]
        order = []
        for i in sorted(active_lo):
            e = np.zeros(d)
            e[i] = 1.0
            rows.append(e[None, :])
            vals.append(np.array([lb[i]]))
            order.append(("lo", i))
        for i in sorted(active_up):
            e = np.zeros(d)
            e[i] = 1.0
            rows.append(e[None, :])
            vals.append(np.array([ub[i]]))
            order.append(("up", i))
        A = np.vstack(rows)
        b = np.concatenate(vals)
        k = A.shape[0]
        kkt = np.block([[P, A.T], [A, np.zeros((k, k))]])
        rhs = np.concatenate([-q, b])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        return sol[:d], sol[d + Aeq.shape[0]:], order

    for _ in range(max_pivots):
        x, mults, order = kkt_solve()
        # drop an active bound whose multiplier has the wrong sign
        worst = None
        worst_val = -tol
        for (kind, i), mu in zip(order, mults):
            signed = -mu if kind == "lo" else mu
            if signed < worst_val:
                worst_val = signed
                worst = (kind, i)
        if worst is not None:
            kind, i = worst
            (active_lo if kind == "lo" else active_up).discard(i)
            continue
        # add the most violated inactive bound
        viol_lo = lb - x
        viol_up = x - ub
        cand = None
        cand_val = tol
        for i in range(d):
            if i not in active_lo and np.isfinite(lb[i]) and viol_lo[i] > cand_val:
                cand = ("lo", i)
                cand_val = viol_lo[i]
            if i not in active_up and np.isfinite(ub[i]) and viol_up[i] > cand_val:
                cand = ("up", i)
                cand_val = viol_up[i]
        if cand is None:
            grad = P @ x + q
            assert np.all(x >= lb - 1e-7) and np.all(x <= ub + 1e-7), "oracle infeasible"
            if Aeq.shape[0]:
                assert np.abs(Aeq @ x - beq).max() < 1e-7, "oracle equality violated"
            # stationarity on the free coordinates
            lam = np.linalg.lstsq(Aeq.T, -grad, rcond=None)[0] if Aeq.shape[0] else np.zeros(0)
            resid = grad + (Aeq.T @ lam if Aeq.shape[0] else 0.0)
            for i in range(d):
                if i in active_lo:
                    assert resid[i] >= -1e-6, "lower-bound multiplier sign"
                elif i in active_up:
                    assert resid[i] <= 1e-6, "upper-bound multiplier sign"
                else:
                    assert abs(resid[i]) < 1e-6, "free-coordinate stationarity"
            return x
        kind, i = cand
        (active_lo if kind == "lo" else active_up).add(i)
    raise RuntimeError("active-set oracle did not terminate")
