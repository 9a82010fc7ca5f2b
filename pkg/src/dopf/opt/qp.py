"""Mehrotra predictor-corrector interior point for convex box/equality QPs."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import (
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_ERROR,
    OPTIMAL,
    InfeasibleProblemError,
    NlpSolution,
    kkt_residuals,
    qp_problem,
)


def _check_consistent(A, b):
    """Raise if ``Ax = b`` has no solution (ignoring bounds)."""
    if A.shape[0] == 0:
        return
    x, *_ = np.linalg.lstsq(A.toarray(), b, rcond=None)
    resid = np.max(np.abs(A @ x - b))
    if resid > 1e-8 * (1.0 + np.max(np.abs(b))):
        raise InfeasibleProblemError(
            f"equality constraints are inconsistent (residual {resid:.3e})")


class _KKT:
    """Quasidefinite KKT matrix ``[[H + diag(sigma) + reg, A'], [A, -reg]]``
    assembled once; only the leading diagonal changes between iterations.
    Small systems are factorized densely, larger ones with SuperLU."""

    DENSE_LIMIT = 100

    def __init__(self, H, A, reg):
        n, m = H.shape[0], A.shape[0]
        self.n = n
        base = sp.bmat([[H + sp.identity(n), A.T if m else None],
                        [A if m else None, -reg * sp.identity(m) if m else None]],
                       format="csc") if m else (H + sp.identity(n)).tocsc()
        base.sort_indices()
        self.hdiag = H.diagonal() + reg
        self.dense = n + m <= self.DENSE_LIMIT
        if self.dense:
            self.K = base.toarray()
            self.idx = np.arange(n)
        else:
            self.K = base
            pos = np.empty(n, dtype=int)
            for j in range(n):
                lo, hi = base.indptr[j], base.indptr[j + 1]
                pos[j] = lo + np.searchsorted(base.indices[lo:hi], j)
            self.idx = pos

    def factor(self, sigma):
        if self.dense:
            self.K[self.idx, self.idx] = self.hdiag + sigma
            lu = sla.lu_factor(self.K, check_finite=False)
            return _DenseSolve(lu)
        self.K.data[self.idx] = self.hdiag + sigma
        return spla.splu(self.K)


class _DenseSolve:
    def __init__(self, lu):
        self.lu = lu

    def solve(self, rhs):
        return sla.lu_solve(self.lu, rhs, check_finite=False)


def solve_qp_box(H, g, lo, hi, A=None, b=None, *, tol=1e-8, max_iter=100,
                 check_consistency=True, layout=None) -> NlpSolution:
    """Globally solve ``min 1/2 x'Hx + g'x  s.t.  Ax = b, lo <= x <= hi``.

    ``H`` must be positive semidefinite.  Variables with ``lo == hi`` are
    fixed and eliminated.  Infinite bounds are allowed.

    Raises
    ------
    InfeasibleProblemError
        If the equality system is inconsistent.  Bound infeasibility is
        reported as ``status="infeasible"``.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("lo > hi")
    Hs = sp.csr_matrix(H, shape=(n, n))
    if A is None:
        As = sp.csr_matrix((0, n))
        b = np.zeros(0)
    else:
        As = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float)
    m = As.shape[0]

    fixed = np.isfinite(lo) & (hi - lo <= 1e-14 * np.maximum(1.0, np.abs(lo)))
    free = np.flatnonzero(~fixed)
    x_fix = np.where(fixed, lo, 0.0)
    # Reduce: objective and equality right-hand side absorb the fixed part.
    Hf = Hs[free][:, free].tocsc()
    gf = g[free] + (Hs @ x_fix)[free]
    Af = As[:, free].tocsc()
    bf = b - As @ x_fix
    if check_consistency:
        _check_consistent(Af, bf)

    l, u = lo[free], hi[free]
    hl, hh = np.isfinite(l), np.isfinite(u)
    nf = free.size

    # Interior starting point.
    x = np.zeros(nf)
    both = hl & hh
    x = np.where(both, 0.5 * (l + u), x)
    x = np.where(hl & ~hh, l + 1.0, x)
    x = np.where(hh & ~hl, u - 1.0, x)
    sl = np.where(hl, x - np.where(hl, l, 0), 1.0)
    su = np.where(hh, np.where(hh, u, 0) - x, 1.0)
    zl = np.where(hl, 1.0, 0.0)
    zu = np.where(hh, 1.0, 0.0)
    y = np.zeros(m)
    n_bounds = int(hl.sum() + hh.sum())

    reg = 1e-10
    kkt = _KKT(Hf, Af, reg)
    status, message = MAX_ITER, "iteration limit reached"
    it = 0
    l0 = np.where(hl, l, 0.0)
    u0 = np.where(hh, u, 0.0)

    def residuals(x, y, zl, zu):
        rd = Hf @ x + gf - zl + zu
        if m:
            rd = rd + Af.T @ y
        rp = Af @ x - bf if m else np.zeros(0)
        return rd, rp

    def step_to_boundary(v, dv, frac):
        neg = dv < 0
        if not neg.any():
            return 1.0
        return min(1.0, frac * float(np.min(-v[neg] / dv[neg])))

    # Slacks are iterated on their own so that they never underflow to zero
    # the way ``x - lo`` can once x sits on a large bound.
    while True:
        rd, rp = residuals(x, y, zl, zu)
        r_l = np.where(hl, x - l0 - sl, 0.0)
        r_u = np.where(hh, u0 - x - su, 0.0)
        comp = np.concatenate([(zl * sl)[hl], (zu * su)[hh]])
        mu = float(comp.mean()) if n_bounds else 0.0
        e_d = float(np.max(np.abs(rd), initial=0.0))
        e_p = max(float(np.max(np.abs(rp), initial=0.0)),
                  float(np.max(np.abs(r_l), initial=0.0)),
                  float(np.max(np.abs(r_u), initial=0.0)))
        e_c = float(comp.max(initial=0.0))
        if e_d <= tol and e_p <= tol and e_c <= tol:
            status, message = OPTIMAL, "converged"
            break
        if it >= max_iter:
            break
        if max(zl.max(initial=0.0), zu.max(initial=0.0)) > 1e14 or \
                np.max(np.abs(x), initial=0.0) > 1e14:
            status, message = INFEASIBLE, "iterates diverged"
            break

        sigma_diag = np.where(hl, zl / sl, 0.0) + np.where(hh, zu / su, 0.0)
        try:
            lu = kkt.factor(sigma_diag)
        except (RuntimeError, np.linalg.LinAlgError):
            status, message = NUMERICAL_ERROR, "singular KKT matrix"
            break

        def direction(t_l, t_u):
            # t_* are the target complementarity products.
            rx = (-rd + np.where(hl, (t_l - zl * r_l) / sl - zl, 0.0)
                  - np.where(hh, (t_u - zu * r_u) / su - zu, 0.0))
            sol = lu.solve(np.concatenate([rx, -rp]))
            dx, dy = sol[:nf], sol[nf:]
            dsl = np.where(hl, dx + r_l, 0.0)
            dsu = np.where(hh, r_u - dx, 0.0)
            dzl = np.where(hl, (t_l - zl * sl - zl * dsl) / sl, 0.0)
            dzu = np.where(hh, (t_u - zu * su - zu * dsu) / su, 0.0)
            return dx, dy, dsl, dsu, dzl, dzu

        def step_len(d, frac):
            dx, dy, dsl, dsu, dzl, dzu = d
            a_p = min(step_to_boundary(sl[hl], dsl[hl], frac),
                      step_to_boundary(su[hh], dsu[hh], frac))
            a_d = min(step_to_boundary(zl[hl], dzl[hl], frac),
                      step_to_boundary(zu[hh], dzu[hh], frac))
            return a_p, a_d

        zero = np.zeros(nf)
        d = direction(zero, zero)
        if n_bounds:
            a_p, a_d = step_len(d, 1.0)
            _, _, dsl, dsu, dzl, dzu = d
            mu_aff = float(np.concatenate([((zl + a_d * dzl) * (sl + a_p * dsl))[hl],
                                           ((zu + a_d * dzu) * (su + a_p * dsu))[hh]]).mean())
            sig = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            t_l = np.where(hl, sig * mu - dsl * dzl, 0.0)
            t_u = np.where(hh, sig * mu - dsu * dzu, 0.0)
            d = direction(t_l, t_u)
            a_p, a_d = step_len(d, 0.995)
        else:
            a_p = a_d = 1.0
        dx, dy, dsl, dsu, dzl, dzu = d
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            status, message = NUMERICAL_ERROR, "non-finite Newton step"
            break
        x = x + a_p * dx
        sl = np.where(hl, sl + a_p * dsl, 1.0)
        su = np.where(hh, su + a_p * dsu, 1.0)
        y = y + a_d * dy
        zl = zl + a_d * dzl
        zu = zu + a_d * dzu
        it += 1

    xf = x_fix.copy()
    xf[free] = np.clip(x, l, u)
    z_lo = np.zeros(n)
    z_hi = np.zeros(n)
    z_lo[free] = zl
    z_hi[free] = zu
    if fixed.any():
        r = Hs @ xf + g
        if m:
            r = r + As.T @ y
        z_lo[fixed] = np.maximum(r[fixed], 0.0)
        z_hi[fixed] = np.maximum(-r[fixed], 0.0)
    prob = qp_problem(Hs, g, lo, hi, As if m else None, b if m else None, x0=xf)
    kkt = kkt_residuals(prob, xf, y, z_lo, z_hi)
    return NlpSolution(
        x=xf, y=y, z_lo=z_lo, z_hi=z_hi, status=status,
        objective=float(0.5 * xf @ (Hs @ xf) + g @ xf), iterations=it,
        kkt=kkt, message=message, mu=mu, layout=layout,
    )
