"""Primal-dual log-barrier interior-point method for smooth NLPs.

Newton steps on the barrier KKT system, inertia-correcting diagonal
regularization, fraction-to-boundary rule and Armijo backtracking on an
exact-penalty barrier merit function.  The barrier parameter follows the
Fiacco-McCormick schedule: each barrier subproblem is solved to
``kappa_eps * mu`` before ``mu`` is divided by ten.

Variables whose bounds coincide are removed from the Newton system and their
bound multipliers recovered afterwards.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .problem import (
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_ERROR,
    OPTIMAL,
    NlpProblem,
    NlpSolution,
    dense,
    kkt_residuals,
)

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000      # KKT dimension above which "auto" switches to sparse LU
KAPPA_EPS = 10.0
ETA_ARMIJO = 1e-4
KAPPA_SIGMA = 1e10
ALPHA_MIN = 1e-8        # accepted step below which restoration is tried
RHO_RESTORE = 1e3       # l1 weight on constraint violation during restoration
MAX_RESTORATIONS = 5


class _Reduced:
    """View of a problem restricted to its non-fixed variables."""

    def __init__(self, problem: NlpProblem):
        p = problem
        self.p = p
        scale = np.maximum(1.0, np.abs(p.lo))
        self.fixed = np.isfinite(p.lo) & (p.hi - p.lo <= 1e-14 * scale)
        self.free = np.flatnonzero(~self.fixed)
        self.all_free = not self.fixed.any()
        self.base = np.where(self.fixed, p.lo, 0.0)
        self.lo = p.lo[self.free]
        self.hi = p.hi[self.free]
        self.n = self.free.size
        self.m = p.m

    def full(self, x):
        if self.all_free:
            return x
        xf = self.base.copy()
        xf[self.free] = x
        return xf

    def f(self, x):
        return float(self.p.objective(self.full(x)))

    def grad(self, x):
        g = np.asarray(self.p.gradient(self.full(x)), dtype=float)
        return g if self.all_free else g[self.free]

    def c(self, x):
        return self.p.c(self.full(x))

    def jac(self, x):
        J = self.p.jac(self.full(x))
        if self.all_free:
            return J
        return J[:, self.free]

    def hess(self, x, y):
        W = self.p.hessian(self.full(x), y)
        if self.all_free:
            return W
        if sp.issparse(W):
            W = sp.csr_matrix(W)
            return W[self.free][:, self.free]
        W = np.asarray(W)
        return W[np.ix_(self.free, self.free)]


def _inertia(ldu, ipiv):
    """(positive, negative, zero) eigenvalue counts from a Bunch-Kaufman LDL'."""
    N = ldu.shape[0]
    pos = neg = zero = 0
    # Only exact zeros count: a relative threshold misreads the legitimately
    # tiny pivots produced by large barrier terms late in a solve.
    small = 1e-300
    k = 0
    while k < N:
        if ipiv[k] > 0:
            d = ldu[k, k]
            if abs(d) <= small:
                zero += 1
            elif d > 0:
                pos += 1
            else:
                neg += 1
            k += 1
        else:
            a, b, c = ldu[k, k], ldu[k + 1, k], ldu[k + 1, k + 1]
            det = a * c - b * b
            if abs(det) <= small * small:
                zero += 1
                if a + c > 0:
                    pos += 1
                else:
                    neg += 1
            elif det < 0:
                pos += 1
                neg += 1
            elif a > 0:
                pos += 2
            else:
                neg += 2
            k += 2
    return pos, neg, zero


class _DenseKKT:
    def __init__(self, W, J, sigma, dw, dc):
        n = sigma.size
        m = J.shape[0]
        K = np.empty((n + m, n + m))
        K[:n, :n] = W
        K[np.arange(n), np.arange(n)] += sigma + dw
        if m:
            K[n:, :n] = J
            K[:n, n:] = J.T
            K[n:, n:] = 0.0
            K[np.arange(n, n + m), np.arange(n, n + m)] = -dc
        self.n, self.m = n, m
        self.ldu, self.ipiv, info = lapack.dsytrf(K, lower=1)
        self.failed = info < 0
        pos, neg, zero = _inertia(self.ldu, self.ipiv)
        self.rank_deficient = m > 0 and neg < m
        self.singular = zero > 0 or info > 0
        self.inertia_ok = (pos == n and neg == m and zero == 0)

    def solve(self, rhs):
        x, info = lapack.dsytrs(self.ldu, self.ipiv, rhs, lower=1)
        return x


class _SparseKKT:
    """Sparse symmetric factorization with inertia from the pivot signs.

    With a small negative diagonal on the constraint block the KKT matrix is
    quasi-definite once the Hessian block is positive definite, so SuperLU
    restricted to symmetric diagonal pivoting acts as an LDL' factorization
    and Sylvester's law gives the inertia.  When SuperLU had to leave the
    diagonal, only the weaker curvature test is available.
    """

    DC_MIN = 1e-10

    def __init__(self, W, J, sigma, dw, dc):
        n = sigma.size
        m = J.shape[0]
        Wd = sp.csr_matrix(W) + sp.diags(sigma + dw)
        self.Wd = Wd
        if m:
            dce = max(dc, self.DC_MIN)
            K = sp.bmat([[Wd, sp.csr_matrix(J).T], [sp.csr_matrix(J), -dce * sp.identity(m)]],
                        format="csc")
        else:
            K = sp.csc_matrix(Wd)
        self.n, self.m = n, m
        self.failed = False
        self.singular = False
        self.rank_deficient = False
        self.inertia_ok = None
        try:
            self.lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options={"SymmetricMode": True})
        except RuntimeError:
            self.singular = True
            return
        if np.array_equal(self.lu.perm_r, self.lu.perm_c):
            d = self.lu.U.diagonal()
            if not np.all(np.isfinite(d)) or np.any(d == 0.0):
                self.singular = True
                return
            pos = int(np.count_nonzero(d > 0))
            self.inertia_ok = pos == n
            self.rank_deficient = m > 0 and (d.size - pos) < m

    def solve(self, rhs):
        return self.lu.solve(rhs)

    def curvature_ok(self, dx):
        if not dx.size:
            return True
        return float(dx @ (self.Wd @ dx)) >= 1e-12 * float(dx @ dx)


def _push_interior(x, lo, hi, push):
    """Move ``x`` strictly inside its bounds (IPOPT-style bound push)."""
    hl = np.isfinite(lo)
    hh = np.isfinite(hi)
    lo0 = np.where(hl, lo, 0.0)
    hi0 = np.where(hh, hi, 0.0)
    width = np.where(hl & hh, hi0 - lo0, np.inf)
    pl = np.minimum(push * np.maximum(1.0, np.abs(lo0)), push * width)
    ph = np.minimum(push * np.maximum(1.0, np.abs(hi0)), push * width)
    x = np.where(hl, np.maximum(x, lo0 + pl), x)
    x = np.where(hh, np.minimum(x, hi0 - ph), x)
    return x


def _max_step(v, dv, tau):
    """Largest alpha in (0, 1] keeping ``v + alpha dv >= (1 - tau) v``."""
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def solve(problem: NlpProblem, *, tol=1e-6, max_iter=200, mu_init=0.1, mu_min=None,
          bound_push=1e-2, tau=0.995, linear_solver="auto", y0=None,
          z_lo0=None, z_hi0=None, verbose=False, _restoration=True) -> NlpSolution:
    """Find a local KKT point of ``problem``.

    Parameters
    ----------
    problem : NlpProblem
    tol : float
        Unscaled tolerance on stationarity, feasibility and complementarity.
    max_iter : int
    mu_init : float
        Initial barrier parameter.  Smaller values suit warm starts.
    mu_min : float, optional
        Final barrier parameter, ``tol / 10`` by default.
    bound_push : float
        Relative distance by which ``x0`` is pushed inside its bounds.
    linear_solver : {"auto", "dense", "sparse"}
        Dense Bunch-Kaufman with inertia correction, or sparse LU with a
        curvature test.
    y0, z_lo0, z_hi0 : array, optional
        Warm-start multipliers (full-length).

    Returns
    -------
    NlpSolution
        ``status`` is ``"optimal"`` only when every KKT residual is at most
        ``tol``.  Solver trouble is reported through ``status`` and
        ``message``; nothing is raised.
    """
    P = problem
    R = _Reduced(P)
    n, m = R.n, R.m
    mu_min = tol / 10.0 if mu_min is None else mu_min
    mu = max(mu_init, mu_min)
    if linear_solver == "auto":
        linear_solver = "dense" if n + m <= DENSE_LIMIT else "sparse"
    KKT = _DenseKKT if linear_solver == "dense" else _SparseKKT

    lo, hi = R.lo, R.hi
    hl, hh = np.isfinite(lo), np.isfinite(hi)
    lo_f = np.where(hl, lo, 0.0)
    hi_f = np.where(hh, hi, 0.0)

    x = _push_interior(P.x0[R.free], lo, hi, bound_push)

    def slacks(x):
        return np.where(hl, x - lo_f, 1.0), np.where(hh, hi_f - x, 1.0)

    sl, su = slacks(x)
    zl = np.where(hl, mu / sl, 0.0)
    zu = np.where(hh, mu / su, 0.0)
    if z_lo0 is not None:
        zl = np.where(hl, np.maximum(np.asarray(z_lo0)[R.free], 1e-3 * mu / sl), 0.0)
    if z_hi0 is not None:
        zu = np.where(hh, np.maximum(np.asarray(z_hi0)[R.free], 1e-3 * mu / su), 0.0)

    f = R.f(x)
    g = R.grad(x)
    c = R.c(x)
    J = R.jac(x)
    if y0 is not None and m:
        y = np.asarray(y0, dtype=float).copy()
    else:
        y = np.zeros(m)
        if m:
            y = _least_squares_y(J, g - zl + zu, KKT)

    nu = max(1.0, float(np.max(np.abs(y), initial=0.0)) * 1.1)
    dw_last = 0.0
    trace = []
    phase = 0
    status, message = MAX_ITER, "iteration limit reached"
    ls_failures = 0
    restorations = 0
    it = 0

    def merit(x, f, c, mu, nu):
        sl, su = slacks(x)
        barrier = -mu * (np.sum(np.log(sl[hl])) + np.sum(np.log(su[hh])))
        return f + barrier + nu * float(np.sum(np.abs(c)))

    def errors(mu):
        Jy = (J.T @ y) if m else 0.0
        stat = g + np.asarray(Jy).ravel() - zl + zu
        e_stat = float(np.max(np.abs(stat))) if n else 0.0
        e_feas = float(np.max(np.abs(c))) if m else 0.0
        comp = 0.0
        if hl.any():
            comp = max(comp, float(np.max(np.abs(zl[hl] * sl[hl] - mu))))
        if hh.any():
            comp = max(comp, float(np.max(np.abs(zu[hh] * su[hh] - mu))))
        return max(e_stat, e_feas, comp)

    while True:
        sl, su = slacks(x)
        if errors(0.0) <= tol:
            status, message = OPTIMAL, "converged"
            break
        if it >= max_iter:
            break
        while mu > mu_min and errors(mu) <= KAPPA_EPS * mu:
            mu = max(mu_min, mu / 10.0)
            phase += 1
            nu = max(1.0, float(np.max(np.abs(y), initial=0.0)) * 1.1)

        W = R.hess(x, y)
        if linear_solver == "dense":
            W = dense(W)
            Jd = dense(J) if m else np.zeros((0, n))
        else:
            Jd = J if m else sp.csr_matrix((0, n))

        sigma = np.where(hl, zl / sl, 0.0) + np.where(hh, zu / su, 0.0)
        grad_bar = g - np.where(hl, mu / sl, 0.0) + np.where(hh, mu / su, 0.0)
        Jy = np.asarray(Jd.T @ y).ravel() if m else np.zeros(n)
        rhs = np.concatenate([-(grad_bar + Jy), -c])

        kkt, dx, dy, err = _regularized_step(KKT, W, Jd, sigma, mu, dw_last, rhs, n)
        if err:
            status, message = NUMERICAL_ERROR, err
            break
        dw_last = kkt.dw

        dzl = np.where(hl, mu / sl - zl - zl / sl * dx, 0.0)
        dzu = np.where(hh, mu / su - zu + zu / su * dx, 0.0)

        a_p = 1.0
        if hl.any():
            a_p = min(a_p, _max_step(sl[hl], dx[hl], tau))
        if hh.any():
            a_p = min(a_p, _max_step(su[hh], -dx[hh], tau))
        a_d = 1.0
        if hl.any():
            a_d = min(a_d, _max_step(zl[hl], dzl[hl], tau))
        if hh.any():
            a_d = min(a_d, _max_step(zu[hh], dzu[hh], tau))

        y_plus = y + dy
        cnorm = float(np.sum(np.abs(c)))
        nu = max(nu, 1.1 * float(np.max(np.abs(y_plus), initial=0.0)) + 1e-8)
        dphi = float(grad_bar @ dx) - nu * cnorm
        if dphi >= 0 and cnorm > 0:
            nu = (float(grad_bar @ dx) + 1.0) / (0.5 * cnorm) + nu
            dphi = float(grad_bar @ dx) - nu * cnorm
        phi0 = merit(x, f, c, mu, nu)

        alpha = a_p
        accepted = False
        for trial in range(40):
            xt = x + alpha * dx
            ft = R.f(xt)
            ct = R.c(xt)
            phit = merit(xt, ft, ct, mu, nu)
            if np.isfinite(phit) and phit <= phi0 + ETA_ARMIJO * alpha * min(dphi, 0.0):
                accepted = True
                break
            if trial == 0 and m:
                # Second-order correction against constraint curvature.
                soc = _second_order_step(kkt, rhs, n, alpha * c + ct)
                if soc is not None:
                    a_soc = 1.0
                    if hl.any():
                        a_soc = min(a_soc, _max_step(sl[hl], soc[hl], tau))
                    if hh.any():
                        a_soc = min(a_soc, _max_step(su[hh], -soc[hh], tau))
                    xs = x + a_soc * soc
                    fs, cs = R.f(xs), R.c(xs)
                    phis = merit(xs, fs, cs, mu, nu)
                    if np.isfinite(phis) and phis <= phi0 + ETA_ARMIJO * alpha * min(dphi, 0.0):
                        xt, ft, ct, phit = xs, fs, cs, phis
                        alpha = a_soc
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            ls_failures += 1
        else:
            ls_failures = 0
        cn = float(np.max(np.abs(c))) if m else 0.0
        if (_restoration and m and cn > tol and (not accepted or alpha < ALPHA_MIN)
                and restorations < MAX_RESTORATIONS):
            # Jammed against the bounds with the constraints unsatisfied.
            restorations += 1
            xr = _restore(R, x, mu, tol, linear_solver)
            cr = R.c(xr) if xr is not None else None
            if xr is None or float(np.max(np.abs(cr))) > 0.9 * cn:
                status, message = INFEASIBLE, "restoration failed: locally infeasible"
                break
            x, f, c = xr, R.f(xr), cr
            g, J = R.grad(x), R.jac(x)
            sl, su = slacks(x)
            zl = np.where(hl, mu / sl, 0.0)
            zu = np.where(hh, mu / su, 0.0)
            y = _least_squares_y(J, g - zl + zu, KKT)
            nu = max(1.0, float(np.max(np.abs(y), initial=0.0)) * 1.1)
            dw_last = 0.0
            ls_failures = 0
            it += 1
            if verbose:
                log.info("it %3d restoration: inf_pr %.2e -> %.2e", it, cn,
                         float(np.max(np.abs(c))))
            continue
        if ls_failures > 10:
            status = INFEASIBLE if cn > tol else NUMERICAL_ERROR
            message = "line search failed repeatedly"
            break

        trace.append({
            "iter": it, "phase": phase, "mu": mu, "alpha": alpha, "merit": phi0,
            "merit_new": phit, "accepted": accepted, "delta_w": kkt.dw,
            "inf_pr": float(np.max(np.abs(c))) if m else 0.0,
        })
        if verbose:
            log.info("it %3d mu %.1e alpha %.2e merit %.8e inf_pr %.2e dw %.1e",
                     it, mu, alpha, phi0, trace[-1]["inf_pr"], kkt.dw)

        x = xt
        f, c = ft, ct
        y = y + alpha * dy
        zl = zl + a_d * dzl
        zu = zu + a_d * dzu
        sl, su = slacks(x)
        # Keep multipliers close to the barrier centre.
        zl = np.where(hl, np.clip(zl, mu / (KAPPA_SIGMA * sl), KAPPA_SIGMA * mu / sl), 0.0)
        zu = np.where(hh, np.clip(zu, mu / (KAPPA_SIGMA * su), KAPPA_SIGMA * mu / su), 0.0)
        g = R.grad(x)
        J = R.jac(x)
        it += 1
        if not (np.all(np.isfinite(x)) and np.isfinite(f)):
            status, message = NUMERICAL_ERROR, "non-finite iterate"
            break

    return _finish(P, R, x, y, zl, zu, status, message, it, mu, trace)


def _regularized_step(KKT, W, J, sigma, mu, dw_last, rhs, n):
    dw, dc = 0.0, 0.0
    kkt = KKT(W, J, sigma, dw, dc)
    if kkt.singular:
        dc = 1e-8 * mu ** 0.25
    tries = 0
    while True:
        if tries or kkt.singular:
            kkt = KKT(W, J, sigma, dw, dc)
        ok = not kkt.singular and not kkt.failed
        if ok and kkt.inertia_ok is not None:
            ok = kkt.inertia_ok
        if ok:
            sol = kkt.solve(rhs)
            if not np.all(np.isfinite(sol)):
                ok = False
            elif kkt.inertia_ok is None and not kkt.curvature_ok(sol[:n]):
                ok = False
        if ok:
            kkt.dw = dw
            return kkt, sol[:n], sol[n:], None
        if dw == 0.0:
            dw = 1e-4 if dw_last == 0.0 else max(1e-20, dw_last / 3.0)
        else:
            dw *= 100.0 if dw_last == 0.0 else 8.0
        if (kkt.singular or kkt.rank_deficient) and dc == 0.0:
            dc = 1e-8 * mu ** 0.25
        tries += 1
        if dw > 1e40:
            return kkt, None, None, "KKT matrix could not be regularized"


def _second_order_step(kkt, rhs, n, c_soc):
    """Primal step for the Newton system with corrected constraint values."""
    r = rhs.copy()
    r[n:] = -c_soc
    sol = kkt.solve(r)
    if sol is None or not np.all(np.isfinite(sol)):
        return None
    return sol[:n]


def _restore(R, x, mu, tol, linear_solver):
    """Minimize ``rho ||c(x)||_1`` plus a scaled proximal term around ``x``.

    The elastic form ``c(x) - p + n = 0, p, n >= 0`` always has an interior
    point, so the barrier method cannot jam in it.  Returns the new ``x`` or
    ``None`` if the subproblem failed.
    """
    n, m = R.n, R.m
    zeta = np.sqrt(mu)
    d2 = 1.0 / np.maximum(1.0, np.abs(x)) ** 2
    xr = x.copy()
    c0 = R.c(x)
    # Closed-form start satisfying c - p + n = 0 on the central path.
    a = (mu - RHO_RESTORE * c0) / (2.0 * RHO_RESTORE)
    nn = a + np.sqrt(a * a + mu * c0 / (2.0 * RHO_RESTORE))
    nn = np.maximum(nn, 1e-12)
    pp = np.maximum(c0 + nn, 1e-12)
    eye = sp.identity(m, format="csr")
    zero_y = np.zeros(m)

    def obj(w):
        dx = w[:n] - xr
        return float(RHO_RESTORE * np.sum(w[n:]) + 0.5 * zeta * np.sum(d2 * dx * dx))

    def grad(w):
        return np.concatenate([zeta * d2 * (w[:n] - xr), np.full(2 * m, RHO_RESTORE)])

    def cons(w):
        return R.c(w[:n]) - w[n:n + m] + w[n + m:]

    def jac(w):
        return sp.hstack([sp.csr_matrix(R.jac(w[:n])), -eye, eye], format="csr")

    def hess(w, y):
        xw = w[:n]
        Wc = sp.csr_matrix(R.hess(xw, y)) - sp.csr_matrix(R.hess(xw, zero_y))
        Wx = Wc + sp.diags(zeta * d2)
        return sp.block_diag([Wx, sp.csr_matrix((2 * m, 2 * m))], format="csr")

    lo = np.concatenate([R.lo, np.zeros(2 * m)])
    hi = np.concatenate([R.hi, np.full(2 * m, np.inf)])
    prob = NlpProblem(n=n + 2 * m, objective=obj, gradient=grad, hessian=hess,
                      lo=lo, hi=hi, x0=np.concatenate([x, pp, nn]), m=m,
                      constraints=cons, jacobian=jac, name="restoration")
    sol = solve(prob, tol=max(tol, 1e-9), max_iter=200, mu_init=mu, bound_push=1e-8,
                linear_solver="sparse" if linear_solver == "sparse" else "auto",
                _restoration=False)
    log.debug("restoration: %s after %d iterations, sum(p + n) %.2e", sol.status,
              sol.iterations, float(np.sum(sol.x[n:])))
    if sol.status not in (OPTIMAL, MAX_ITER) or not np.all(np.isfinite(sol.x)):
        return None
    return sol.x[:n]


def _least_squares_y(J, r, KKT):
    """Multiplier estimate minimizing ``||r + J' y||``."""
    n = r.size
    m = J.shape[0]
    Jd = dense(J) if KKT is _DenseKKT else J
    try:
        k = KKT(sp.identity(n, format="csr") if KKT is _SparseKKT else np.eye(n),
                Jd, np.zeros(n), 0.0, 1e-10)
        if k.singular or k.failed:
            return np.zeros(m)
        sol = k.solve(np.concatenate([-r, np.zeros(m)]))
        y = sol[n:]
        if not np.all(np.isfinite(y)) or np.max(np.abs(y), initial=0.0) > 1e3:
            return np.zeros(m)
        return y
    except (np.linalg.LinAlgError, ValueError):
        return np.zeros(m)


def _finish(P, R, x, y, zl, zu, status, message, it, mu, trace):
    xf = R.full(x)
    z_lo = np.zeros(P.n)
    z_hi = np.zeros(P.n)
    z_lo[R.free] = zl
    z_hi[R.free] = zu
    if not R.all_free:
        g = np.asarray(P.gradient(xf), dtype=float)
        if P.m:
            g = g + np.asarray(P.jac(xf).T @ y).ravel()
        fx = R.fixed
        z_lo[fx] = np.maximum(g[fx], 0.0)
        z_hi[fx] = np.maximum(-g[fx], 0.0)
    kkt = kkt_residuals(P, xf, y, z_lo, z_hi)
    return NlpSolution(
        x=xf, y=y, z_lo=z_lo, z_hi=z_hi, status=status,
        objective=float(P.objective(xf)), iterations=it, kkt=kkt,
        message=message, mu=mu, layout=P.layout, trace=trace,
    )
