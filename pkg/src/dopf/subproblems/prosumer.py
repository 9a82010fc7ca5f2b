"""Prosumer-side subproblem: a convex QP over one household's schedule.

Variables are grouped by kind, each a block of ``|T|`` entries (p.u.)::

    p+, p-, p_pv[, p_ch, p_dis, soc]

The battery blocks exist only when the household owns a battery.  Energy
prices apply per kWh, so a step of ``dt`` hours at ``x`` p.u. costs
``price * dt * S_base * x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..model import Horizon, ProsumerProfile, Tariff
from ..opt.problem import NlpProblem, qp_problem
from ..opt.qp import solve_qp_box


@dataclass(frozen=True)
class ProsumerVars:
    p_plus: np.ndarray
    p_minus: np.ndarray
    p_pv: np.ndarray
    p_ch: np.ndarray | None
    p_dis: np.ndarray | None
    soc: np.ndarray | None
    n: int
    s_base: float
    offset: int = 0
    side: str = "prosumer"

    @classmethod
    def build(cls, T: int, has_battery: bool, s_base: float, offset=0):
        k = 6 if has_battery else 3
        blocks = [offset + T * j + np.arange(T) for j in range(k)]
        if not has_battery:
            blocks += [None, None, None]
        return cls(*blocks, n=k * T, s_base=float(s_base), offset=offset)


def _check_len(a, T, name):
    a = np.asarray(a, dtype=float).ravel()
    if a.size != T:
        raise ValueError(f"{name} has length {a.size}; expected {T}")
    return a


def prosumer_constraints(profile: ProsumerProfile, horizon: Horizon, s_base: float,
                         layout: ProsumerVars, n_total: int):
    """Equalities ``A x = b`` and bounds of one household.

    Rows: power balance per step, then the SoC recursion per step.  The
    end-of-horizon SoC floor ``soc_T >= soc_0`` is a bound.
    """
    T, dt, S = horizon.n, horizon.dt, s_base
    L = layout
    d = np.asarray(profile.demand, dtype=float) / S
    pv = np.asarray(profile.pv_available, dtype=float) / S
    bat = profile.battery
    t = np.arange(T)
    rows = [t, t, t]
    cols = [L.p_plus, L.p_minus, L.p_pv]
    vals = [np.ones(T), -np.ones(T), np.ones(T)]
    b = [d]
    lo = np.zeros(n_total)
    hi = np.zeros(n_total)
    idx = np.concatenate([L.p_plus, L.p_minus, L.p_pv])
    lo[idx] = 0.0
    hi[L.p_plus] = max(profile.p_max, 0.0) / S
    hi[L.p_minus] = max(-profile.p_min, 0.0) / S
    hi[L.p_pv] = pv
    if bat is not None:
        # Balance: p+ - p- + p_pv - p_ch + p_dis = d
        rows += [t, t]
        cols += [L.p_ch, L.p_dis]
        vals += [-np.ones(T), np.ones(T)]
        # soc_t - soc_{t-1} - eta_ch dt p_ch + dt / eta_dis p_dis = 0 (kWh in p.u.h)
        r = T + t
        rows += [r, r, r]
        cols += [L.soc, L.p_ch, L.p_dis]
        vals += [np.ones(T), -bat.eta_ch * dt * np.ones(T), dt / bat.eta_dis * np.ones(T)]
        rows.append(r[1:])
        cols.append(L.soc[:-1])
        vals.append(-np.ones(T - 1))
        rhs = np.zeros(T)
        rhs[0] = bat.soc_init / S
        b.append(rhs)
        lo[L.p_ch] = 0.0
        hi[L.p_ch] = bat.p_ch_max / S
        lo[L.p_dis] = 0.0
        hi[L.p_dis] = bat.p_dis_max / S
        lo[L.soc] = bat.soc_min / S
        hi[L.soc] = bat.soc_max / S
        lo[L.soc[-1]] = bat.soc_init / S
    m = T if bat is None else 2 * T
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m, n_total))
    return A, np.concatenate(b), lo, hi


def prosumer_linear_cost(tariff: Tariff, horizon: Horizon, s_base: float, layout: ProsumerVars,
                         n_total: int) -> np.ndarray:
    c = np.zeros(n_total)
    price = np.asarray(tariff.c_tou, dtype=float)
    c[layout.p_plus] = price * horizon.dt * s_base
    c[layout.p_minus] = -tariff.c_fit * horizon.dt * s_base
    return c


def build_prosumer_subproblem(profile: ProsumerProfile, horizon: Horizon, tariff: Tariff,
                              p_hat, lam, rho, *, s_base=100.0) -> NlpProblem:
    """Household subproblem for fixed network copies and duals.

    Minimizes the energy bill plus ``sum_t rho/2 (p_hat - p)^2 + lam (p_hat - p)``
    where ``p = p+ - p-`` in kW.

    Parameters
    ----------
    profile : ProsumerProfile
    horizon : Horizon
    tariff : Tariff
    p_hat, lam : array, shape (|T|,)
        Network copy of this household's net power (kW) and its duals.
    rho : float
        Penalty, $ per kW^2.
    s_base : float
        kVA base of the variables.

    Returns
    -------
    NlpProblem
        A convex QP; ``problem.qp`` holds ``(H, g, lo, hi, A, b, offset)``
        for :func:`dopf.opt.solve_qp_box`.
    """
    T = horizon.n
    p_hat = _check_len(p_hat, T, "p_hat")
    lam = _check_len(lam, T, "lam")
    for name in ("demand", "pv_available", "q_demand"):
        if len(getattr(profile, name)) != T:
            raise ValueError(f"profile.{name} does not match the horizon")
    rho = float(rho)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    S = float(s_base)
    L = ProsumerVars.build(T, profile.battery is not None, S)
    n = L.n
    A, b, lo, hi = prosumer_constraints(profile, horizon, S, L, n)
    g = prosumer_linear_cost(tariff, horizon, S, L, n)
    # rho/2 (p_hat - S(p+ - p-))^2 + lam (p_hat - S(p+ - p-))
    lin = -S * (rho * p_hat + lam)
    g[L.p_plus] += lin
    g[L.p_minus] -= lin
    w = rho * S * S
    r = np.concatenate([L.p_plus, L.p_plus, L.p_minus, L.p_minus])
    c = np.concatenate([L.p_plus, L.p_minus, L.p_plus, L.p_minus])
    v = np.concatenate([np.full(T, w), np.full(T, -w), np.full(T, -w), np.full(T, w)])
    Hq = sp.csr_matrix((v, (r, c)), shape=(n, n))
    offset = float(np.sum(0.5 * rho * p_hat ** 2 + lam * p_hat))
    x0 = np.clip(np.zeros(n), lo, hi)
    return qp_problem(Hq, g, lo, hi, A, b, x0=x0, name=f"prosumer[{profile.bus_id}]",
                      offset=offset, layout=L)


def solve_prosumer(problem: NlpProblem, *, tol=1e-8):
    """Solve a prosumer subproblem through the QP fast path.

    The household equalities always have a solution (the split and battery
    variables are free within their boxes), so the consistency pre-check is
    skipped.
    """
    H, g, lo, hi, A, b, offset = problem.qp
    sol = solve_qp_box(H, g, lo, hi, A, b, tol=tol, check_consistency=False,
                       layout=problem.layout)
    sol.objective += offset
    return sol
