"""Domain data model: horizons, buses, lines, tariffs, prosumers and cases.

All types are frozen dataclasses holding tuples, so a :class:`Case` can be
shared between threads and compared with ``==``.  Line admittances and bus
voltage limits are per-unit; prosumer powers are kept in kW (kWh for state of
charge) and converted with :func:`to_per_unit` when an optimization problem
is assembled.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

CASE_FORMAT = "dopf-case"
CASE_VERSION = 1


class CaseError(ValueError):
    """Raised when a case violates one of its structural invariants."""


@dataclass(frozen=True)
class Horizon:
    """Uniform discretization of the scheduling window.

    Parameters
    ----------
    steps : tuple of int
        Timestep indices ``0 .. n-1``.
    dt : float
        Interval length in hours.
    """

    steps: tuple
    dt: float

    def __post_init__(self):
        if len(self.steps) < 1:
            raise CaseError("horizon needs at least one timestep")
        if not self.dt > 0:
            raise CaseError(f"dt must be positive; got {self.dt}")
        if tuple(self.steps) != tuple(range(len(self.steps))):
            raise CaseError("horizon steps must be 0..n-1")

    @classmethod
    def uniform(cls, n_steps: int, hours: float = 24.0) -> "Horizon":
        if n_steps < 1:
            raise CaseError(f"n_steps must be >= 1; got {n_steps}")
        return cls(tuple(range(n_steps)), hours / n_steps)

    @classmethod
    def named(cls, name: str) -> "Horizon":
        """``T1`` is 48 half-hour steps, ``T2`` is 96 quarter-hour steps."""
        if name == "T1":
            return cls(tuple(range(48)), 0.5)
        if name == "T2":
            return cls(tuple(range(96)), 0.25)
        raise CaseError(f"unknown horizon {name!r}; expected 'T1' or 'T2'")

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def hours(self) -> float:
        return self.n * self.dt

    def midpoints(self) -> np.ndarray:
        """Clock time (hours) at the middle of every interval."""
        return (np.arange(self.n) + 0.5) * self.dt


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.94
    v_max: float = 1.06
    is_slack: bool = False


@dataclass(frozen=True)
class Line:
    """Series branch with admittance ``g + jb`` (p.u.)."""

    from_bus: int
    to_bus: int
    g: float
    b: float


@dataclass(frozen=True)
class GeneratorCost:
    """Feeder import cost at the slack bus; powers in kW / kvar."""

    c2: float
    c1: float
    c0: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class Tariff:
    c_tou: tuple
    c_fit: float


@dataclass(frozen=True)
class BatterySpec:
    p_ch_max: float
    p_dis_max: float
    soc_min: float
    soc_max: float
    soc_init: float
    eta_ch: float = 0.95
    eta_dis: float = 0.95


@dataclass(frozen=True)
class ProsumerProfile:
    """One household behind the meter.

    ``demand``, ``pv_available`` and ``q_demand`` are per-timestep sequences in
    kW / kvar.  Net power ``p = p_plus - p_minus`` is bounded by
    ``[p_min, p_max]``.
    """

    bus_id: int
    demand: tuple
    pv_available: tuple
    q_demand: tuple
    p_min: float = -20.0
    p_max: float = 20.0
    battery: Optional[BatterySpec] = None


@dataclass(frozen=True)
class Case:
    name: str
    buses: tuple
    lines: tuple
    gen: GeneratorCost
    tariff: Tariff
    prosumers: tuple
    horizon: Horizon
    s_base: float = 100.0
    v_base: float = 400.0

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_prosumers(self) -> int:
        return len(self.prosumers)

    @property
    def slack(self) -> int:
        """Position (not id) of the slack bus in ``buses``."""
        return next(i for i, b in enumerate(self.buses) if b.is_slack)

    def bus_index(self) -> dict:
        return {b.id: i for i, b in enumerate(self.buses)}

    def demand_matrix(self) -> np.ndarray:
        """Fixed demand, shape ``(|H|, |T|)``, kW."""
        return np.array([p.demand for p in self.prosumers], dtype=float).reshape(
            self.n_prosumers, self.horizon.n)

    def pv_matrix(self) -> np.ndarray:
        return np.array([p.pv_available for p in self.prosumers], dtype=float).reshape(
            self.n_prosumers, self.horizon.n)

    def q_matrix(self) -> np.ndarray:
        return np.array([p.q_demand for p in self.prosumers], dtype=float).reshape(
            self.n_prosumers, self.horizon.n)

    def admittance(self) -> np.ndarray:
        """Dense complex bus admittance matrix (p.u.)."""
        idx = self.bus_index()
        n = self.n_buses
        Y = np.zeros((n, n), dtype=complex)
        for ln in self.lines:
            i, j = idx[ln.from_bus], idx[ln.to_bus]
            y = complex(ln.g, ln.b)
            Y[i, i] += y
            Y[j, j] += y
            Y[i, j] -= y
            Y[j, i] -= y
        return Y


def to_per_unit(value, s_base: float):
    """Convert kW (or kvar, kWh) to per-unit on an ``s_base`` kVA base."""
    if not s_base > 0:
        raise CaseError(f"base power must be positive; got {s_base}")
    return value / s_base


def from_per_unit(value, s_base: float):
    if not s_base > 0:
        raise CaseError(f"base power must be positive; got {s_base}")
    return value * s_base


def validate_case(case: Case) -> Case:
    """Check every structural invariant of ``case`` and return it unchanged."""
    n_t = case.horizon.n
    if case.s_base <= 0 or case.v_base <= 0:
        raise CaseError("base power and voltage must be positive")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    slacks = [b for b in case.buses if b.is_slack]
    if len(slacks) != 1:
        raise CaseError(f"exactly one slack bus required; found {len(slacks)}")
    for b in case.buses:
        if not 0 < b.v_min < b.v_max:
            raise CaseError(f"bus {b.id}: need 0 < v_min < v_max")

    known = set(ids)
    adj = {i: set() for i in ids}
    for ln in case.lines:
        if ln.from_bus not in known or ln.to_bus not in known:
            raise CaseError(f"line {ln.from_bus}-{ln.to_bus} references unknown bus")
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"line {ln.from_bus}-{ln.to_bus} is a self loop")
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen = {slacks[0].id}
    queue = deque(seen)
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if seen != known:
        raise CaseError("network graph is not connected")

    g = case.gen
    if g.c2 < 0:
        raise CaseError("generator c2 must be non-negative")
    if not (g.p_min <= g.p_max and g.q_min <= g.q_max):
        raise CaseError("generator bounds out of order")

    if len(case.tariff.c_tou) != n_t:
        raise CaseError("c_tou length differs from horizon")
    if min(case.tariff.c_tou) <= case.tariff.c_fit:
        raise CaseError("c_tou must exceed c_fit at every timestep")

    slack_id = slacks[0].id
    for k, p in enumerate(case.prosumers):
        if p.bus_id not in known:
            raise CaseError(f"prosumer {k} on unknown bus {p.bus_id}")
        if p.bus_id == slack_id:
            raise CaseError(f"prosumer {k} sits on the slack bus")
        for name in ("demand", "pv_available", "q_demand"):
            seq = getattr(p, name)
            if len(seq) != n_t:
                raise CaseError(f"prosumer {k}: {name} has length {len(seq)}, expected {n_t}")
        if min(p.demand) < 0 or min(p.pv_available) < 0:
            raise CaseError(f"prosumer {k}: demand and PV must be non-negative")
        if not p.p_min <= 0 <= p.p_max:
            raise CaseError(f"prosumer {k}: net power bounds must bracket zero")
        bat = p.battery
        if bat is not None:
            if not bat.soc_min <= bat.soc_init <= bat.soc_max:
                raise CaseError(f"prosumer {k}: soc_init outside [soc_min, soc_max]")
            if bat.p_ch_max < 0 or bat.p_dis_max < 0:
                raise CaseError(f"prosumer {k}: battery power limits must be >= 0")
            if not (0 < bat.eta_ch <= 1 and 0 < bat.eta_dis <= 1):
                raise CaseError(f"prosumer {k}: efficiencies must lie in (0, 1]")
    return case


# -- JSON ---------------------------------------------------------------------

def case_to_dict(case: Case) -> dict:
    def prosumer(p: ProsumerProfile) -> dict:
        d = {
            "bus_id": p.bus_id,
            "demand": list(p.demand),
            "pv_available": list(p.pv_available),
            "q_demand": list(p.q_demand),
            "p_min": p.p_min,
            "p_max": p.p_max,
            "battery": None,
        }
        if p.battery is not None:
            d["battery"] = vars(p.battery).copy()
        return d

    return {
        "format": CASE_FORMAT,
        "version": CASE_VERSION,
        "name": case.name,
        "bases": {"s_base_kva": case.s_base, "v_base_v": case.v_base},
        "horizon": {"n_steps": case.horizon.n, "dt_hours": case.horizon.dt},
        "buses": [vars(b).copy() for b in case.buses],
        "lines": [vars(ln).copy() for ln in case.lines],
        "generator": vars(case.gen).copy(),
        "tariff": {"c_tou": list(case.tariff.c_tou), "c_fit": case.tariff.c_fit},
        "prosumers": [prosumer(p) for p in case.prosumers],
    }


def case_from_dict(doc: dict) -> Case:
    if doc.get("format") != CASE_FORMAT:
        raise CaseError(f"not a {CASE_FORMAT} document")
    if doc.get("version") != CASE_VERSION:
        raise CaseError(f"unsupported case version {doc.get('version')!r}")
    h = doc["horizon"]
    horizon = Horizon(tuple(range(int(h["n_steps"]))), float(h["dt_hours"]))

    def prosumer(d: dict) -> ProsumerProfile:
        bat = d.get("battery")
        return ProsumerProfile(
            bus_id=int(d["bus_id"]),
            demand=tuple(float(v) for v in d["demand"]),
            pv_available=tuple(float(v) for v in d["pv_available"]),
            q_demand=tuple(float(v) for v in d["q_demand"]),
            p_min=float(d["p_min"]),
            p_max=float(d["p_max"]),
            battery=BatterySpec(**bat) if bat else None,
        )

    case = Case(
        name=doc["name"],
        buses=tuple(Bus(**b) for b in doc["buses"]),
        lines=tuple(Line(**ln) for ln in doc["lines"]),
        gen=GeneratorCost(**doc["generator"]),
        tariff=Tariff(tuple(float(v) for v in doc["tariff"]["c_tou"]),
                      float(doc["tariff"]["c_fit"])),
        prosumers=tuple(prosumer(p) for p in doc["prosumers"]),
        horizon=horizon,
        s_base=float(doc["bases"]["s_base_kva"]),
        v_base=float(doc["bases"]["v_base_v"]),
    )
    return validate_case(case)


def save_case(case: Case, path) -> None:
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=1)


def load_case(path) -> Case:
    with open(path) as fh:
        return case_from_dict(json.load(fh))
