"""Network-side subproblem: multiperiod polar AC OPF with prosumer copies.

Per timestep the variables are, in order::

    v[non-slack], theta[non-slack], pg+, pg-, qg, p_hat[h]   (all p.u.)

and the equalities are the active then reactive balance at every bus,
``P_i(V) - gen_i + load_i = 0``.  The slack bus is held at ``1 /_ 0`` and its
voltage is not a variable.  Steps do not interact through the network, so a
multi-step problem is block diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..model import Case
from ..opt.problem import NlpProblem


class PowerFlow:
    """Bus injections ``S = V conj(Y V)`` and their first and second
    derivatives in polar coordinates, for a fixed admittance matrix."""

    def __init__(self, Y: np.ndarray):
        self.Y = np.asarray(Y, dtype=complex)
        self.YH = self.Y.conj().T
        self.n = self.Y.shape[0]

    def injections(self, vm, va):
        V = vm * np.exp(1j * va)
        return V * np.conj(self.Y @ V)

    def jacobian(self, vm, va):
        """``(S, dS/dVm, dS/dVa)`` with dense complex derivative matrices."""
        V = vm * np.exp(1j * va)
        I = self.Y @ V
        Vn = V / vm
        dS_dVm = V[:, None] * np.conj(self.Y * Vn[None, :])
        dS_dVm[np.diag_indices(self.n)] += np.conj(I) * Vn
        M = -self.Y * V[None, :]
        M[np.diag_indices(self.n)] += I
        dS_dVa = 1j * V[:, None] * np.conj(M)
        return V * np.conj(I), dS_dVm, dS_dVa

    def hessian(self, vm, va, lam_p, lam_q):
        """Second derivatives of ``lam_p' P + lam_q' Q``.

        Returns the real blocks ``(H_aa, H_av, H_vv)`` where ``a`` is angle
        and ``v`` magnitude, and ``H_av[i, j] = d2 / da_i dv_j``.
        """
        lam = lam_p - 1j * lam_q
        V = vm * np.exp(1j * va)
        I = self.Y @ V
        lv = lam * V
        C = lv[:, None] * np.conj(self.Y * V[None, :])
        D = self.YH * V[None, :]
        E = D * lam[None, :]
        E[np.diag_indices(self.n)] -= D @ lam
        E = np.conj(V)[:, None] * E
        F = C.copy()
        F[np.diag_indices(self.n)] -= lv * np.conj(I)
        inv = 1.0 / vm
        Gaa = E + F
        Gva = 1j * inv[:, None] * (E - F)
        Gvv = inv[:, None] * (C + C.T) * inv[None, :]
        return Gaa.real, Gva.T.real, Gvv.real


@dataclass(frozen=True)
class NetworkVars:
    """Index map of a network (sub)problem.

    Every index array has a leading axis over ``steps``; ``v`` and ``theta``
    cover the non-slack buses listed in ``buses`` (bus positions), ``p_hat``
    covers prosumers in case order.  ``p_hat`` is ``None`` in the
    centralized problem, where the copies are substituted out.
    """

    steps: tuple
    buses: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    pg_plus: np.ndarray
    pg_minus: np.ndarray
    qg: np.ndarray
    p_hat: np.ndarray | None
    block: int
    offset: int
    s_base: float
    side: str = "network"

    @property
    def n(self) -> int:
        return self.block * len(self.steps)

    @classmethod
    def build(cls, case: Case, steps, copies=True, offset=0):
        steps = tuple(int(t) for t in steps)
        nb = case.n_buses
        nh = case.n_prosumers if copies else 0
        ns = nb - 1
        block = 2 * ns + 3 + nh
        base = offset + block * np.arange(len(steps))[:, None]
        v = base + np.arange(ns)[None, :]
        th = base + ns + np.arange(ns)[None, :]
        pg = offset + block * np.arange(len(steps)) + 2 * ns
        ph = base + 2 * ns + 3 + np.arange(nh)[None, :] if copies else None
        buses = np.array([i for i in range(nb) if i != case.slack], dtype=int)
        return cls(steps, buses, v, th, pg, pg + 1, pg + 2, ph, block, offset,
                   float(case.s_base))

    def voltages(self, x, case: Case):
        """Full ``(vm, va)`` arrays, shape ``(len(steps), n_buses)``."""
        k = len(self.steps)
        vm = np.ones((k, case.n_buses))
        va = np.zeros((k, case.n_buses))
        vm[:, self.buses] = x[self.v]
        va[:, self.buses] = x[self.theta]
        return vm, va


class _NetworkModel:
    """Shared evaluation of the power-flow part for a list of steps.

    ``inj`` is a callable ``(x, k) -> (p_inj, q_inj)`` giving per-bus net
    withdrawals (load minus prosumer injection, p.u.) at local step ``k``;
    ``inj_jac`` gives the constant derivative of the active withdrawals
    with respect to the flat variable vector at step ``k`` as
    ``(bus_rows, var_cols, values)``.
    """

    def __init__(self, case: Case, layout: NetworkVars):
        self.case = case
        self.L = layout
        self.pf = PowerFlow(case.admittance())
        self.nb = case.n_buses
        self.slack = case.slack
        self.ns = self.L.buses
        g = case.gen
        S = case.s_base
        self.c2 = g.c2 * S * S
        self.c1 = g.c1 * S
        self.c0 = g.c0

    def gen_cost(self, x):
        pg = x[self.L.pg_plus]
        return float(np.sum(self.c2 * pg * pg + self.c1 * pg + self.c0))

    def gen_grad(self, x, g):
        pg = x[self.L.pg_plus]
        g[self.L.pg_plus] += 2.0 * self.c2 * pg + self.c1

    def balance(self, x, withdraw_p, withdraw_q):
        """Stacked ``[P - gen + load, Q - gen + load]`` per step."""
        L = self.L
        vm, va = L.voltages(x, self.case)
        out = np.empty((len(L.steps), 2 * self.nb))
        for k in range(len(L.steps)):
            S = self.pf.injections(vm[k], va[k])
            P = S.real + withdraw_p[k]
            Q = S.imag + withdraw_q[k]
            P[self.slack] -= x[L.pg_plus[k]] - x[L.pg_minus[k]]
            Q[self.slack] -= x[L.qg[k]]
            out[k, :self.nb] = P
            out[k, self.nb:] = Q
        return out.ravel()

    def balance_jac_blocks(self, x):
        """Per step: dense ``(2 nb, 2 ns)`` derivative w.r.t. ``[v, theta]``."""
        L = self.L
        vm, va = L.voltages(x, self.case)
        blocks = []
        for k in range(len(L.steps)):
            _, dVm, dVa = self.pf.jacobian(vm[k], va[k])
            dVm = dVm[:, self.ns]
            dVa = dVa[:, self.ns]
            blocks.append(np.block([[dVm.real, dVa.real], [dVm.imag, dVa.imag]]))
        return blocks

    def balance_hess_blocks(self, x, y):
        """Per step: dense Hessian of ``y' c`` w.r.t. ``[v, theta]``."""
        L = self.L
        vm, va = L.voltages(x, self.case)
        yk = y.reshape(len(L.steps), 2 * self.nb)
        blocks = []
        ns = self.ns
        for k in range(len(L.steps)):
            Haa, Hav, Hvv = self.pf.hessian(vm[k], va[k], yk[k, :self.nb], yk[k, self.nb:])
            Haa = Haa[np.ix_(ns, ns)]
            Hav = Hav[np.ix_(ns, ns)]
            Hvv = Hvv[np.ix_(ns, ns)]
            blocks.append(np.block([[Hvv, Hav.T], [Hav, Haa]]))
        return blocks


def _as_matrix(a, shape, name):
    a = np.asarray(a, dtype=float)
    if a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}; expected {shape}")
    return a


def flat_start(case: Case, layout: NetworkVars, p_kw=None) -> np.ndarray:
    """``v = 1, theta = 0``, copies at the targets and the slack covering
    the net load."""
    x = np.zeros(layout.n)
    x[layout.v] = 1.0
    S = case.s_base
    idx = list(layout.steps)
    load = case.demand_matrix()[:, idx] - case.pv_matrix()[:, idx]
    if layout.p_hat is not None:
        p = load if p_kw is None else np.asarray(p_kw, dtype=float)[:, idx]
        x[layout.p_hat] = p.T / S
        load = p
    net = load.sum(axis=0) / S
    x[layout.pg_plus] = np.maximum(net, 0.0)
    x[layout.pg_minus] = np.maximum(-net, 0.0)
    return x


def network_bounds(case: Case, layout: NetworkVars):
    lo = np.full(layout.n, -np.inf)
    hi = np.full(layout.n, np.inf)
    S = case.s_base
    vmin = np.array([case.buses[i].v_min for i in layout.buses])
    vmax = np.array([case.buses[i].v_max for i in layout.buses])
    lo[layout.v] = vmin[None, :]
    hi[layout.v] = vmax[None, :]
    g = case.gen
    # pg = pg+ - pg- with both parts nonnegative, each within the gen range.
    lo[layout.pg_plus] = 0.0
    hi[layout.pg_plus] = max(g.p_max, 0.0) / S
    lo[layout.pg_minus] = 0.0
    hi[layout.pg_minus] = max(-g.p_min, 0.0) / S
    lo[layout.qg] = g.q_min / S
    hi[layout.qg] = g.q_max / S
    if layout.p_hat is not None:
        pmin = np.array([p.p_min for p in case.prosumers]) / S
        pmax = np.array([p.p_max for p in case.prosumers]) / S
        lo[layout.p_hat] = pmin[None, :]
        hi[layout.p_hat] = pmax[None, :]
    return lo, hi


def build_network_subproblem(case: Case, p, lam, rho, *, steps=None, x0=None) -> NlpProblem:
    """Network subproblem for fixed prosumer targets and duals.

    Parameters
    ----------
    case : Case
    p : array, shape (|H|, |T|)
        Prosumer net-power targets (kW, positive = import).
    lam : array, shape (|H|, |T|)
        Coupling duals, $ per kW of ``p_hat - p`` at each step.
    rho : float
        Penalty on ``(p_hat - p)^2`` in $ per kW^2.
    steps : sequence of int, optional
        Subset of timesteps to include (all by default).  The network is
        separable in time, so each step can be solved on its own.
    x0 : array, optional
        Warm start; flat start at the targets otherwise.

    Returns
    -------
    NlpProblem
        Objective in $, variables in p.u., layout :class:`NetworkVars`.
    """
    H, T = case.n_prosumers, case.horizon.n
    p = _as_matrix(p, (H, T), "p")
    lam = _as_matrix(lam, (H, T), "lam")
    rho = float(rho)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    steps = tuple(range(T)) if steps is None else tuple(int(t) for t in steps)
    if any(t < 0 or t >= T for t in steps):
        raise ValueError("step index out of range")

    L = NetworkVars.build(case, steps)
    M = _NetworkModel(case, L)
    S = case.s_base
    nb, K = case.n_buses, len(steps)
    idx = list(steps)
    p_t = p[:, idx].T                   # (K, H) kW
    lam_t = lam[:, idx].T
    pos = np.array([case.bus_index()[q.bus_id] for q in case.prosumers], dtype=int)
    q_load = np.zeros((K, nb))
    np.add.at(q_load, (slice(None), pos), case.q_matrix()[:, idx].T / S)
    p_zero = np.zeros((K, nb))

    def withdrawals(x):
        wp = p_zero.copy()
        np.add.at(wp, (slice(None), pos), x[L.p_hat])
        return wp

    def objective(x):
        d = S * x[L.p_hat] - p_t
        return M.gen_cost(x) + float(np.sum(0.5 * rho * d * d + lam_t * d))

    def gradient(x):
        g = np.zeros(L.n)
        M.gen_grad(x, g)
        d = S * x[L.p_hat] - p_t
        g[L.p_hat] = S * (rho * d + lam_t)
        return g

    def constraints(x):
        return M.balance(x, withdrawals(x), q_load)

    # Constant part of the Jacobian: generator and copy columns.
    rows, cols, vals = [], [], []
    for k in range(K):
        r0 = 2 * nb * k
        rows += [r0 + case.slack, r0 + case.slack, r0 + nb + case.slack]
        cols += [L.pg_plus[k], L.pg_minus[k], L.qg[k]]
        vals += [-1.0, 1.0, -1.0]
        rows += list(r0 + pos)
        cols += list(L.p_hat[k])
        vals += [1.0] * H
    J_const = sp.csr_matrix((vals, (rows, cols)), shape=(2 * nb * K, L.n))
    vt = [np.concatenate([L.v[k], L.theta[k]]) for k in range(K)]
    dense_out = K == 1

    def jacobian(x):
        blocks = M.balance_jac_blocks(x)
        if dense_out:
            J = J_const.toarray()
            J[:, vt[0]] += blocks[0]
            return J
        r, c, v = [], [], []
        for k, B in enumerate(blocks):
            rr, cc = np.nonzero(np.ones_like(B, dtype=bool))
            r.append(2 * nb * k + rr)
            c.append(vt[k][cc])
            v.append(B.ravel())
        Jv = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                           shape=J_const.shape)
        return Jv + J_const

    diag = np.zeros(L.n)
    diag[L.pg_plus] = 2.0 * M.c2
    diag[L.p_hat] = rho * S * S

    def hessian(x, y):
        blocks = M.balance_hess_blocks(x, y)
        if dense_out:
            W = np.diag(diag)
            W[np.ix_(vt[0], vt[0])] += blocks[0]
            return W
        r, c, v = [], [], []
        for k, B in enumerate(blocks):
            ii = vt[k]
            r.append(np.repeat(ii, ii.size))
            c.append(np.tile(ii, ii.size))
            v.append(B.ravel())
        W = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                          shape=(L.n, L.n))
        return W + sp.diags(diag)

    lo, hi = network_bounds(case, L)
    if x0 is None:
        x0 = flat_start(case, L, p)
    else:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (L.n,):
            raise ValueError(f"x0 has shape {x0.shape}; expected {(L.n,)}")
    return NlpProblem(
        n=L.n, objective=objective, gradient=gradient, hessian=hessian,
        lo=lo, hi=hi, x0=x0, m=2 * nb * K, constraints=constraints,
        jacobian=jacobian, layout=L, name=f"network[{case.name}]",
    )
