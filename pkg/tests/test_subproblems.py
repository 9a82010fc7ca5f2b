from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import two_bus_case, two_bus_oracle
from dopf.admm import AdmmConfig, run_admm
from dopf.cases import build_case, scale_mix
from dopf.model import BatterySpec, Horizon, ProsumerProfile, Tariff
from dopf.opt import kkt_residuals, solve
from dopf.subproblems import (
    build_centralized,
    build_network_subproblem,
    build_prosumer_subproblem,
    extract_power_profile,
    solve_prosumer,
)
from dopf.subproblems.network import PowerFlow


def _flat_tariff(T, price=0.25, fit=0.07):
    return Tariff(tuple([price] * T), fit)


def test_network_zero_load_no_import(minimal2_t1):
    case = scale_mix(minimal2_t1, 0.0, 0.0)
    H, T = case.n_prosumers, case.horizon.n
    zero = np.zeros((H, T))
    P = build_network_subproblem(case, zero, zero, 0.0, steps=range(4))
    sol = solve(P)
    assert sol.ok
    L = sol.layout
    np.testing.assert_allclose(sol.x[L.pg_plus], 0.0, atol=1e-6)
    # with the copies held at the zero targets there is no flow at all
    sol = solve(build_network_subproblem(case, zero, zero, 1.0, steps=range(4)), tol=1e-9)
    np.testing.assert_allclose(sol.x[L.v], 1.0, atol=1e-7)
    np.testing.assert_allclose(sol.x[L.pg_plus] - sol.x[L.pg_minus], 0.0, atol=1e-6)


def test_network_large_rho_pins_copy():
    case = two_bus_case(load_kw=3.0)
    S = case.s_base
    rho = 1e6 / S ** 2                 # 1e6 $ per p.u.^2 expressed per kW^2
    P = build_network_subproblem(case, [[2.0]], [[0.0]], rho)
    sol = solve(P, tol=1e-9)
    assert sol.ok
    assert abs(sol.x[sol.layout.p_hat[0, 0]] - 0.02) <= 1e-4
    k = kkt_residuals(P, sol.x, sol.y, sol.z_lo, sol.z_hi)
    assert max(k["stationarity"], k["feasibility"], k["complementarity"]) <= 1e-6


def test_network_two_bus_matches_grid_search():
    case = two_bus_case(load_kw=3.0, g=5.0, b=-15.0)
    P = build_network_subproblem(case, [[3.0]], [[0.0]], 1e8 / case.s_base ** 2)
    sol = solve(P, tol=1e-10)
    assert sol.ok
    v, th, p1, q1 = two_bus_oracle(0.03, 0.0, 5.0, -15.0)
    L = sol.layout
    assert sol.x[L.pg_plus[0]] - sol.x[L.pg_minus[0]] == pytest.approx(p1, abs=1e-4)
    assert sol.x[L.v[0, 0]] == pytest.approx(v, abs=1e-4)


def test_network_rejects_bad_shapes(minimal2_t1):
    with pytest.raises(ValueError):
        build_network_subproblem(minimal2_t1, np.zeros((3, 48)), np.zeros((2, 48)), 1.0)
    with pytest.raises(ValueError):
        build_network_subproblem(minimal2_t1, np.zeros((2, 48)), np.zeros((2, 48)), -1.0)
    with pytest.raises(ValueError):
        build_network_subproblem(minimal2_t1, np.zeros((2, 48)), np.zeros((2, 48)), 1.0,
                                 steps=[48])


def test_prosumer_without_der_follows_demand(rng):
    T = 6
    hz = Horizon.uniform(T)
    d = tuple(rng.uniform(0.5, 3.0, T))
    prof = ProsumerProfile(bus_id=1, demand=d, pv_available=(0.0,) * T, q_demand=(0.0,) * T)
    for rho, lam in ((0.0, 0.0), (5.0, 1.0), (0.01, -3.0)):
        p_hat = rng.uniform(-5, 5, T)
        sol = solve_prosumer(build_prosumer_subproblem(
            prof, hz, _flat_tariff(T), p_hat, np.full(T, lam), rho))
        assert sol.ok
        np.testing.assert_allclose(extract_power_profile(sol), d, atol=1e-9)


def _battery_profile(T, demand=1.0, pv=None):
    bat = BatterySpec(p_ch_max=3.0, p_dis_max=3.0, soc_min=1.0, soc_max=10.0, soc_init=5.0)
    pv = (0.0,) * T if pv is None else tuple(pv)
    return ProsumerProfile(bus_id=1, demand=(demand,) * T, pv_available=pv,
                           q_demand=(0.0,) * T, battery=bat)


def _lp_oracle(prof, hz, tariff):
    """Minimum bill of one household as an LP in kW:
    variables [p+, p-, pv, ch, dis, soc] per step."""
    T, dt = hz.n, hz.dt
    b = prof.battery
    nv = 6 * T
    ix = lambda j, t: j * T + t  # noqa: E731
    c = np.zeros(nv)
    for t in range(T):
        c[ix(0, t)] = tariff.c_tou[t] * dt
        c[ix(1, t)] = -tariff.c_fit * dt
    A, rhs = [], []
    for t in range(T):
        row = np.zeros(nv)
        row[[ix(0, t), ix(2, t), ix(4, t)]] = 1.0
        row[[ix(1, t), ix(3, t)]] = -1.0
        A.append(row)
        rhs.append(prof.demand[t])
        row = np.zeros(nv)
        row[ix(5, t)] = 1.0
        row[ix(3, t)] = -b.eta_ch * dt
        row[ix(4, t)] = dt / b.eta_dis
        if t:
            row[ix(5, t - 1)] = -1.0
        A.append(row)
        rhs.append(b.soc_init if t == 0 else 0.0)
    bounds = ([(0, prof.p_max)] * T + [(0, -prof.p_min)] * T
              + [(0, v) for v in prof.pv_available] + [(0, b.p_ch_max)] * T
              + [(0, b.p_dis_max)] * T + [(b.soc_min, b.soc_max)] * (T - 1)
              + [(b.soc_init, b.soc_max)])
    res = linprog(c, A_eq=np.array(A), b_eq=rhs, bounds=bounds, method="highs")
    assert res.status == 0
    return res


def test_flat_tariff_battery_idles():
    T = 4
    hz = Horizon.uniform(T)
    prof = _battery_profile(T)
    tariff = _flat_tariff(T)
    sol = solve_prosumer(build_prosumer_subproblem(prof, hz, tariff, np.zeros(T), np.zeros(T),
                                                   0.0))
    assert sol.ok
    L = sol.layout
    S = L.s_base
    throughput = S * (sol.x[L.p_ch] + sol.x[L.p_dis]).sum()
    assert throughput <= 1e-6
    lp = _lp_oracle(prof, hz, tariff)
    assert lp.x[3 * T:5 * T].sum() <= 1e-9
    assert sol.objective == pytest.approx(lp.fun, abs=1e-7)


def test_prosumer_matches_lp_oracle_under_tou(rng):
    T = 8
    hz = Horizon.uniform(T)
    tariff = Tariff(tuple(rng.uniform(0.15, 0.4, T)), 0.07)
    prof = _battery_profile(T, demand=1.5, pv=rng.uniform(0, 4, T))
    sol = solve_prosumer(build_prosumer_subproblem(prof, hz, tariff, np.zeros(T), np.zeros(T),
                                                   0.0), tol=1e-10)
    assert sol.ok
    assert sol.objective == pytest.approx(_lp_oracle(prof, hz, tariff).fun, abs=1e-6)


def test_pv_surplus_is_sold_not_curtailed():
    hz = Horizon.uniform(1)
    prof = ProsumerProfile(bus_id=1, demand=(1.0,), pv_available=(3.0,), q_demand=(0.0,))
    sol = solve_prosumer(build_prosumer_subproblem(prof, hz, Tariff((0.3,), 0.07), [0.0], [0.0],
                                                   0.0))
    L = sol.layout
    S = L.s_base
    assert S * sol.x[L.p_minus[0]] == pytest.approx(2.0, abs=1e-6)
    assert S * sol.x[L.p_plus[0]] == pytest.approx(0.0, abs=1e-6)
    assert S * sol.x[L.p_pv[0]] == pytest.approx(3.0, abs=1e-6)


def test_prosumer_soc_telescopes_and_split_is_complementary():
    case = build_case("minimal-3", "T1", 5)
    hz, S = case.horizon, case.s_base
    r = np.random.default_rng(3)
    for prof in case.prosumers:
        p_hat = np.asarray(prof.demand) - np.asarray(prof.pv_available) + r.normal(0, 0.5, hz.n)
        sol = solve_prosumer(build_prosumer_subproblem(
            prof, hz, case.tariff, p_hat, r.normal(0, 0.01, hz.n), 0.02), tol=1e-10)
        assert sol.ok
        L = sol.layout
        assert np.max(np.minimum(sol.x[L.p_plus], sol.x[L.p_minus])) <= 1e-6
        b = prof.battery
        ch, dis, soc = S * sol.x[L.p_ch], S * sol.x[L.p_dis], S * sol.x[L.soc]
        net = hz.dt * (b.eta_ch * ch - dis / b.eta_dis)
        assert soc[-1] - b.soc_init == pytest.approx(net.sum(), abs=1e-9 * b.soc_max)
        np.testing.assert_allclose(np.diff(np.concatenate([[b.soc_init], soc])), net,
                                   atol=1e-12 * S)


def test_prosumer_input_validation():
    hz = Horizon.uniform(2)
    prof = ProsumerProfile(bus_id=1, demand=(1.0, 1.0), pv_available=(0.0, 0.0),
                           q_demand=(0.0, 0.0))
    with pytest.raises(ValueError):
        build_prosumer_subproblem(prof, hz, _flat_tariff(2), [0.0], [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        build_prosumer_subproblem(prof, hz, _flat_tariff(2), [0.0, 0.0], [0.0, 0.0], -1.0)


def test_centralized_zero_case_costs_c0():
    case = two_bus_case(load_kw=0.0)
    case = replace(case, prosumers=(replace(case.prosumers[0], q_demand=(0.0,)),))
    sol = solve(build_centralized(case), tol=1e-9)
    assert sol.ok
    assert sol.objective == pytest.approx(case.gen.c0 * case.horizon.n, abs=1e-8)


def test_centralized_matches_admm_limit():
    case = build_case("minimal-2", 4, 3)
    central = solve(build_centralized(case), tol=1e-9)
    assert central.ok
    res = run_admm(case, AdmmConfig(eps_abs=1e-7, wire_float32=False, k_max=2000))
    assert res.converged
    # battery schedules are not unique, so only the objective is compared
    assert res.objective == pytest.approx(central.objective, rel=1e-3)


def test_extract_power_profile_sign():
    hz = Horizon.uniform(1)
    for d, pv, expect in ((1.5, 0.0, 1.5), (0.0, 2.0, -2.0)):
        prof = ProsumerProfile(bus_id=1, demand=(d,), pv_available=(pv,), q_demand=(0.0,))
        sol = solve_prosumer(build_prosumer_subproblem(prof, hz, Tariff((0.3,), 0.07), [0.0],
                                                       [0.0], 0.0))
        assert extract_power_profile(sol)[0] == pytest.approx(expect, abs=1e-7)
        with pytest.raises(ValueError):
            extract_power_profile(sol, "network")


def test_centralized_power_flow_and_kkt(minimal2_t1):
    P = build_centralized(minimal2_t1)
    sol = solve(P, tol=1e-8)
    assert sol.ok
    k = kkt_residuals(P, sol.x, sol.y, sol.z_lo, sol.z_hi)
    assert max(k["stationarity"], k["feasibility"], k["complementarity"]) <= 1e-6
    # recompute bus injections independently from the admittance matrix
    case = minimal2_t1
    L = sol.layout.network
    Y = case.admittance()
    S = case.s_base
    pos = [case.bus_index()[p.bus_id] for p in case.prosumers]
    p = extract_power_profile(sol, "prosumer") / S
    q = case.q_matrix() / S
    worst = 0.0
    for t in range(case.horizon.n):
        vm, va = L.voltages(sol.x, case)
        V = vm[t] * np.exp(1j * va[t])
        Sinj = V * np.conj(Y @ V)
        load = np.zeros(case.n_buses, dtype=complex)
        load[pos] = p[:, t] + 1j * q[:, t]
        gen = np.zeros(case.n_buses, dtype=complex)
        gen[case.slack] = (sol.x[L.pg_plus[t]] - sol.x[L.pg_minus[t]]) + 1j * sol.x[L.qg[t]]
        worst = max(worst, np.max(np.abs(Sinj - gen + load)))
    assert worst <= 1e-6


def test_power_flow_injections_match_complex_formula(rng):
    case = build_case("minimal-4", 1, 0)
    pf = PowerFlow(case.admittance())
    vm = rng.uniform(0.95, 1.05, case.n_buses)
    va = rng.uniform(-0.1, 0.1, case.n_buses)
    V = vm * np.exp(1j * va)
    Sref = V * np.conj(case.admittance() @ V)
    np.testing.assert_allclose(pf.injections(vm, va), Sref, atol=1e-12)
    # P_i = sum_j V_i V_j (G cos + B sin) written out term by term
    G, B = case.admittance().real, case.admittance().imag
    d = va[:, None] - va[None, :]
    P = vm * ((G * np.cos(d) + B * np.sin(d)) @ vm)
    Q = vm * ((G * np.sin(d) - B * np.cos(d)) @ vm)
    np.testing.assert_allclose(pf.injections(vm, va).real, P, atol=1e-12)
    np.testing.assert_allclose(pf.injections(vm, va).imag, Q, atol=1e-12)
