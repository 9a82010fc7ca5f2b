"""Centralized reference problem: network and every household in one NLP,
with the coupling copies substituted out (``p_hat = p``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..model import Case
from ..opt.problem import NlpProblem
from .network import NetworkVars, _NetworkModel, flat_start, network_bounds
from .prosumer import ProsumerVars, prosumer_constraints, prosumer_linear_cost


@dataclass(frozen=True)
class CentralVars:
    network: NetworkVars
    prosumers: tuple
    n: int
    s_base: float
    side: str = "central"


def build_centralized(case: Case) -> NlpProblem:
    """Multiperiod AC OPF over the network and all prosumer schedules.

    The objective is the feeder import cost plus every household bill.
    Equalities are the bus balances at every step followed by each
    household's balance and SoC rows.  The variable and constraint counts
    match :func:`dopf.cases.problem_size`.
    """
    T = case.horizon.n
    S = case.s_base
    nb, H = case.n_buses, case.n_prosumers
    NL = NetworkVars.build(case, range(T), copies=False)
    M = _NetworkModel(case, NL)
    off = NL.n
    PL = []
    for pr in case.prosumers:
        L = ProsumerVars.build(T, pr.battery is not None, S, offset=off)
        PL.append(L)
        off += L.n
    n = off
    layout = CentralVars(NL, tuple(PL), n, float(S))

    lo = np.zeros(n)
    hi = np.zeros(n)
    lo[:NL.n], hi[:NL.n] = network_bounds(case, NL)
    cost = np.zeros(n)
    A_rows, b_rows = [], []
    for pr, L in zip(case.prosumers, PL):
        A, b, l, h = prosumer_constraints(pr, case.horizon, S, L, n)
        sl = slice(L.offset, L.offset + L.n)
        lo[sl], hi[sl] = l[sl], h[sl]
        cost += prosumer_linear_cost(case.tariff, case.horizon, S, L, n)
        A_rows.append(A)
        b_rows.append(b)
    A_pro = sp.vstack(A_rows, format="csr") if A_rows else sp.csr_matrix((0, n))
    b_pro = np.concatenate(b_rows) if b_rows else np.zeros(0)
    m_net = 2 * nb * T

    pos = np.array([case.bus_index()[q.bus_id] for q in case.prosumers], dtype=int)
    pp = np.array([L.p_plus for L in PL]).reshape(H, T)
    pm = np.array([L.p_minus for L in PL]).reshape(H, T)
    q_load = np.zeros((T, nb))
    np.add.at(q_load, (slice(None), pos), case.q_matrix().T / S)

    def withdrawals(x):
        wp = np.zeros((T, nb))
        np.add.at(wp, (slice(None), pos), (x[pp] - x[pm]).T)
        return wp

    def objective(x):
        return M.gen_cost(x) + float(cost @ x)

    def gradient(x):
        g = cost.copy()
        M.gen_grad(x, g)
        return g

    def constraints(x):
        return np.concatenate([M.balance(x, withdrawals(x), q_load), A_pro @ x - b_pro])

    rows, cols, vals = [], [], []
    for k in range(T):
        r0 = 2 * nb * k
        rows += [r0 + case.slack] * 2 + [r0 + nb + case.slack]
        cols += [NL.pg_plus[k], NL.pg_minus[k], NL.qg[k]]
        vals += [-1.0, 1.0, -1.0]
        rows += list(r0 + pos) * 2
        cols += list(pp[:, k]) + list(pm[:, k])
        vals += [1.0] * H + [-1.0] * H
    J_net_const = sp.csr_matrix((vals, (rows, cols)), shape=(m_net, n))
    J_const = sp.vstack([J_net_const, A_pro], format="csr")
    vt = [np.concatenate([NL.v[k], NL.theta[k]]) for k in range(T)]
    nvt = vt[0].size
    jr = np.concatenate([2 * nb * k + np.repeat(np.arange(2 * nb), nvt) for k in range(T)])
    jc = np.concatenate([np.tile(vt[k], 2 * nb) for k in range(T)])
    hr = np.concatenate([np.repeat(vt[k], nvt) for k in range(T)])
    hc = np.concatenate([np.tile(vt[k], nvt) for k in range(T)])
    diag = np.zeros(n)
    diag[NL.pg_plus] = 2.0 * M.c2

    def jacobian(x):
        blocks = M.balance_jac_blocks(x)
        v = np.concatenate([B.ravel() for B in blocks])
        return sp.csr_matrix((v, (jr, jc)), shape=J_const.shape) + J_const

    def hessian(x, y):
        blocks = M.balance_hess_blocks(x, y[:m_net])
        v = np.concatenate([B.ravel() for B in blocks])
        return sp.csr_matrix((v, (hr, hc)), shape=(n, n)) + sp.diags(diag)

    x0 = np.zeros(n)
    x0[:NL.n] = flat_start(case, NL)
    for pr, L in zip(case.prosumers, PL):
        d = np.asarray(pr.demand) / S
        x0[L.p_plus] = np.maximum(d, 0.0)
    x0 = np.clip(x0, lo, hi)
    return NlpProblem(
        n=n, objective=objective, gradient=gradient, hessian=hessian,
        lo=lo, hi=hi, x0=x0, m=m_net + A_pro.shape[0], constraints=constraints,
        jacobian=jacobian, layout=layout, name=f"central[{case.name}]",
    )
