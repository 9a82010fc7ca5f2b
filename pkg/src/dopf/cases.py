"""Deterministic synthetic cases shaped like 26- and 51-bus LV feeders.

Templates
---------
``"A"``
    26 buses, one 25-house feeder (trunk with single-bus laterals).
``"B"``
    51 buses, network A plus a second 25-house feeder from the same slack.
``"minimal-k"``
    ``k`` houses on a ``(k+1)``-bus chain, for desk-scale oracle checks.

Segment impedances are normalized per feeder so that the voltage drop seen by
the farthest house depends on the per-house load, not on the number of houses.
"""

from __future__ import annotations

import math
import re
from dataclasses import replace

import numpy as np

from .model import (
    BatterySpec,
    Bus,
    Case,
    CaseError,
    GeneratorCost,
    Horizon,
    Line,
    ProsumerProfile,
    Tariff,
    validate_case,
)

S_BASE_KVA = 100.0
V_BASE_V = 400.0
V_MIN, V_MAX = 0.94, 1.06

# Worst-path equivalent feeder impedance (p.u.), see _segment_impedance.
FEEDER_R = 0.75
FEEDER_X = 0.30

# With these values the unscaled case stays clear of every limit, demand
# scaled by 3 brings the far end to within a few mV of V_MIN, and doubling PV
# drives the midday feeder onto V_MAX (absorbed by curtailment).
BATTERY_SHARE = 0.6     # fraction of houses with a battery (templates A, B)
PV_KW_MIN, PV_KW_MAX = 5.0, 8.0
FEEDER_KW_PER_HOUSE = 8.0
C2_PER_HOUSE = 2e-3     # $/kW^2 per step, divided by the house count
C1 = 0.05               # $/kW per step
C0 = 0.10               # $ per step
C_FIT = 0.07            # $/kWh

POWER_FACTOR = 0.95
Q_RATIO = math.tan(math.acos(POWER_FACTOR))

_MINIMAL = re.compile(r"^minimal-(\d+)$")


def _tou_price(hour: float) -> float:
    if 15.0 <= hour < 21.0:
        return 0.45
    if 7.0 <= hour < 15.0 or 21.0 <= hour < 22.0:
        return 0.25
    return 0.15


def _gauss(t, mu, sigma):
    return np.exp(-0.5 * ((t - mu) / sigma) ** 2)


def demand_shape(hours: np.ndarray, scale=1.0, shift=0.0) -> np.ndarray:
    """Two-peak household demand (kW): a morning and a larger evening peak."""
    base = 0.35 + 0.15 * _gauss(hours, 13.0, 4.0)
    morning = 1.1 * _gauss(hours, 7.5 + shift, 1.0)
    evening = 2.4 * _gauss(hours, 19.0 + shift, 1.6)
    return scale * (base + morning + evening)


def pv_shape(hours: np.ndarray, peak_kw=4.0) -> np.ndarray:
    """Clear-sky PV bell (kW), exactly zero outside 06:00-19:00."""
    x = (hours - 12.5) / 6.5
    return peak_kw * np.where(np.abs(x) < 1.0, np.cos(0.5 * np.pi * x) ** 2, 0.0)


def _feeder_tree(n_houses: int, first_id: int, chain: bool):
    """Edges (parent, child) of a feeder hanging off bus 0."""
    edges = []
    if chain:
        prev = 0
        for b in range(first_id, first_id + n_houses):
            edges.append((prev, b))
            prev = b
        return edges
    n_trunk = (n_houses + 1) // 2
    trunk = list(range(first_id, first_id + n_trunk))
    prev = 0
    for b in trunk:
        edges.append((prev, b))
        prev = b
    for j, b in enumerate(range(first_id + n_trunk, first_id + n_houses)):
        edges.append((trunk[j % n_trunk], b))
    return edges


def _segment_impedance(edges) -> complex:
    """Uniform per-segment impedance for a feeder.

    The worst path-sum of (segment impedance x houses downstream) is pinned to
    ``FEEDER_R + j FEEDER_X``.
    """
    children = {}
    for a, b in edges:
        children.setdefault(a, []).append(b)

    def downstream(b):
        return 1 + sum(downstream(c) for c in children.get(b, ()))

    parent = {b: a for a, b in edges}
    weight = {b: downstream(b) for _, b in edges}
    worst = 0
    for b in parent:
        acc, node = 0, b
        while node in parent:
            acc += weight[node]
            node = parent[node]
        worst = max(worst, acc)
    return complex(FEEDER_R, FEEDER_X) / worst


def _lines(edges) -> list:
    z = _segment_impedance(edges)
    y = 1.0 / z
    return [Line(a, b, y.real, y.imag) for a, b in edges]


def _prosumers(house_buses, horizon: Horizon, rng, identical: bool, all_der: bool):
    hours = horizon.midpoints()
    n = len(house_buses)
    if identical:
        scale = np.ones(n)
        shift = np.zeros(n)
        pv_peak = np.full(n, 4.0)
        has_pv = np.ones(n, dtype=bool)
        has_bat = np.ones(n, dtype=bool)
        cap = np.full(n, 10.0)
    else:
        scale = rng.uniform(0.7, 1.3, n)
        shift = rng.uniform(-0.5, 0.5, n)
        pv_peak = rng.uniform(PV_KW_MIN, PV_KW_MAX, n)
        has_pv = np.ones(n, dtype=bool) if all_der else rng.random(n) < 0.8
        has_bat = np.ones(n, dtype=bool) if all_der else rng.random(n) < BATTERY_SHARE
        cap = rng.choice([5.0, 10.0, 13.5], n)

    out = []
    for k, bus in enumerate(house_buses):
        d = np.clip(demand_shape(hours, scale[k], shift[k]), 0.0, 5.0)
        pv = pv_shape(hours, pv_peak[k]) if has_pv[k] else np.zeros_like(hours)
        bat = None
        if has_bat[k]:
            c = float(cap[k])
            bat = BatterySpec(p_ch_max=5.0, p_dis_max=5.0, soc_min=0.1 * c,
                              soc_max=c, soc_init=0.5 * c)
        out.append(ProsumerProfile(
            bus_id=bus,
            demand=tuple(float(v) for v in d),
            pv_available=tuple(float(v) for v in pv),
            q_demand=tuple(float(v) for v in Q_RATIO * d),
            battery=bat,
        ))
    return tuple(out)


def build_case(template: str, horizon="T1", seed: int = 0, *, identical=False) -> Case:
    """Build a synthetic case.

    Parameters
    ----------
    template : {"A", "B", "minimal-k"}
        Network template; ``k >= 1`` is the number of houses.
    horizon : {"T1", "T2"}, int or Horizon
        Named horizon, a number of uniform steps over 24 h, or an explicit
        :class:`Horizon`.
    seed : int
        Seed for the per-house scaling, PV size and DER ownership draws.
    identical : bool
        Give every house the same demand, PV and battery (for size-scaling
        studies).

    Returns
    -------
    Case
        Validated, immutable case.  Same arguments give an equal case.
    """
    if isinstance(horizon, Horizon):
        hz = horizon
    elif isinstance(horizon, str):
        hz = Horizon.named(horizon)
    else:
        hz = Horizon.uniform(int(horizon))

    m = _MINIMAL.match(template)
    if template == "A":
        feeders, chain = [25], False
    elif template == "B":
        feeders, chain = [25, 25], False
    elif m:
        k = int(m.group(1))
        if k < 1:
            raise CaseError(f"minimal-k needs k >= 1; got {k}")
        feeders, chain = [k], True
    else:
        raise CaseError(f"unknown template {template!r}")

    edges, houses, next_id = [], [], 1
    for n_houses in feeders:
        fe = _feeder_tree(n_houses, next_id, chain)
        edges.append(fe)
        houses.extend(range(next_id, next_id + n_houses))
        next_id += n_houses
    lines = [ln for fe in edges for ln in _lines(fe)]
    buses = [Bus(0, V_MIN, V_MAX, is_slack=True)]
    buses += [Bus(i, V_MIN, V_MAX) for i in range(1, next_id)]

    n_h = len(houses)
    rng = np.random.default_rng(seed)
    prosumers = _prosumers(houses, hz, rng, identical, all_der=bool(m))
    cap = FEEDER_KW_PER_HOUSE * n_h
    gen = GeneratorCost(c2=C2_PER_HOUSE / n_h, c1=C1, c0=C0,
                        p_min=-cap, p_max=cap, q_min=-cap, q_max=cap)
    tariff = Tariff(tuple(_tou_price(h) for h in hz.midpoints()), C_FIT)
    case = Case(
        name=f"{template}/{_horizon_label(hz)}/seed{seed}" + ("/identical" if identical else ""),
        buses=tuple(buses),
        lines=tuple(lines),
        gen=gen,
        tariff=tariff,
        prosumers=prosumers,
        horizon=hz,
        s_base=S_BASE_KVA,
        v_base=V_BASE_V,
    )
    return validate_case(case)


def _horizon_label(hz: Horizon) -> str:
    for name in ("T1", "T2"):
        if hz == Horizon.named(name):
            return name
    return f"{hz.n}x{hz.dt:g}h"


def scale_mix(case: Case, alpha_d: float, alpha_pv: float) -> Case:
    """Scale every fixed demand by ``alpha_d`` and available PV by ``alpha_pv``.

    Reactive demand follows active demand so the power factor is preserved.
    """
    if alpha_d < 0 or alpha_pv < 0:
        raise CaseError("mix factors must be non-negative")
    if alpha_d == 1 and alpha_pv == 1:
        return case
    prosumers = tuple(
        replace(p,
                demand=tuple(alpha_d * v for v in p.demand),
                q_demand=tuple(alpha_d * v for v in p.q_demand),
                pv_available=tuple(alpha_pv * v for v in p.pv_available))
        for p in case.prosumers)
    return replace(case, prosumers=prosumers)


def problem_size(case: Case) -> dict:
    """Variable and equality-constraint counts of the centralized problem.

    With ``B`` buses, ``H`` houses, ``H_b`` of them with a battery and ``T``
    steps::

        n_vars = T * (2 (B - 1) + 3 + 3 H + 3 H_b)
        n_cons = T * (2 B + H + H_b)

    Network variables are magnitude and angle at each non-slack bus plus
    ``p_g+``, ``p_g-``, ``q_g``; each house has ``p+``, ``p-``, ``p_pv`` and,
    with a battery, ``p_ch``, ``p_dis``, ``soc``.  Constraints are the two
    power-flow balances per bus, one power balance per house and one
    state-of-charge recursion per battery.  The end-of-day state-of-charge
    floor is a variable bound and the coupling copies are substituted out,
    so neither is counted.  The network subproblem alone has
    ``T * (2 (B - 1) + 3 + H)`` variables and ``2 B T`` constraints.
    """
    T = case.horizon.n
    B = case.n_buses
    H = case.n_prosumers
    Hb = sum(p.battery is not None for p in case.prosumers)
    return {
        "n_vars": T * (2 * (B - 1) + 3 + 3 * H + 3 * Hb),
        "n_cons": T * (2 * B + H + Hb),
        "network_vars": T * (2 * (B - 1) + 3 + H),
        "network_cons": T * 2 * B,
    }
