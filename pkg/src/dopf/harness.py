"""Experiment harness: tolerance, energy-mix and size sweeps at desk scale.

Each sweep runs ADMM once per grid point and produces a :class:`SweepResult`
with one :class:`SweepRow` per point plus the full iteration histories.
:func:`emit_report` writes ``sweep.csv``, one ``history-<point>.csv`` per run
and SVG plots.
"""

from __future__ import annotations

import csv
import logging
import os
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .admm import CONVERGED, AdmmConfig, AdmmResult, run_admm, write_history_csv
from .cases import build_case, scale_mix
from .model import Case, load_case
from .opt import solve as nlp_solve
from .subproblems import build_centralized

log = logging.getLogger(__name__)

DEFAULT_TOLERANCES = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
DEFAULT_ALPHA_D = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DEFAULT_ALPHA_PV = (0.0, 0.5, 1.0, 1.5, 2.0)
DEFAULT_SIZES = (2, 4, 8, 16)
BOUND_TOL = 1e-6          # p.u. distance at which a limit counts as active
ASSUMED_LATENCY_MS = 100.0


class SweepError(RuntimeError):
    """A sweep could not finish; ``partial`` holds the rows completed so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class SweepSpec:
    """What to sweep.

    ``case`` is a template name (``"A"``, ``"B"``, ``"minimal-k"``) or a path
    to a case JSON file.  ``grid`` holds tolerances, ``(alpha_d, alpha_pv)``
    pairs or prosumer counts depending on ``kind``; ``None`` selects the
    default grid of that kind.  ``backend="remote"`` runs every point through
    UDP loopback agents, optionally impaired by ``latency_ms`` and ``loss``.
    """

    kind: str
    case: str = "A"
    horizon: object = "T1"
    grid: Optional[tuple] = None
    seed: int = 7
    eps_abs: float = 1e-4
    backend: str = "in-process"
    identical: bool = False
    k_max: int = 500
    central: bool = True
    latency_ms: float = 0.0
    loss: float = 0.0

    def __post_init__(self):
        if self.kind not in ("tolerance", "mix", "size"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if self.backend not in ("in-process", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")
        grid = self.grid
        if grid is None:
            if self.kind == "tolerance":
                grid = DEFAULT_TOLERANCES
            elif self.kind == "mix":
                grid = tuple((d, v) for d in DEFAULT_ALPHA_D for v in DEFAULT_ALPHA_PV)
            else:
                grid = DEFAULT_SIZES
        grid = tuple(tuple(float(a) for a in g) if isinstance(g, (tuple, list)) else g
                     for g in grid)
        if not grid:
            raise ValueError("sweep grid is empty")
        if self.kind == "tolerance":
            if any(not float(e) > 0 for e in grid):
                raise ValueError("tolerances must be positive")
            if list(grid) != sorted(grid, reverse=True):
                raise ValueError("tolerance grid must be sorted in descending order")
        elif self.kind == "mix":
            if any(len(g) != 2 or min(g) < 0 for g in grid):
                raise ValueError("mix grid entries are non-negative (alpha_d, alpha_pv) pairs")
        elif any(int(g) < 1 for g in grid):
            raise ValueError("sizes must be positive prosumer counts")
        object.__setattr__(self, "grid", grid)

    def admm_config(self, eps_abs=None) -> AdmmConfig:
        return AdmmConfig(eps_abs=self.eps_abs if eps_abs is None else eps_abs,
                          k_max=self.k_max)


@dataclass
class SweepRow:
    point: str
    status: str
    iterations: int
    eps_abs: float
    alpha_d: float
    alpha_pv: float
    n_prosumers: int
    n_steps: int
    n_vars: int
    r_norm: float
    s_norm: float
    eps_pri: float
    eps_dual: float
    objective: float
    central_objective: float
    gap_pct: float
    r_max_w: float
    r_mean_w: float
    t_9a_ms: float
    t_9b_ms: float
    t_9b_max_ms: float
    t_9c_ms: float
    t_transport_ms: float
    bytes_up: int
    bytes_down: int
    latency_share: float
    latency_share_100ms: float
    undervoltage: bool
    overvoltage: bool
    feeder_limit: bool

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


SWEEP_COLUMNS = [f.name for f in fields(SweepRow)]


@dataclass
class SweepResult:
    spec: Optional[SweepSpec]
    rows: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(not r.converged for r in self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


# ----------------------------------------------------------------------------
# Running single points


def load_spec_case(spec: SweepSpec, n_prosumers=None) -> Case:
    name = spec.case
    if os.path.exists(name):
        return load_case(name)
    if n_prosumers is not None:
        name = f"minimal-{int(n_prosumers)}"
    return build_case(name, spec.horizon, spec.seed, identical=spec.identical)


def central_objective(case: Case) -> float:
    """Objective of the centralized solve, NaN if it did not converge."""
    sol = nlp_solve(build_centralized(case), max_iter=300)
    if not sol.ok:
        log.warning("centralized solve of %s: %s", case.name, sol.message)
        return float("nan")
    return float(sol.objective)


def active_limits(case: Case, result: AdmmResult) -> dict:
    """Which network limits the final network solution sits on."""
    flags = {"undervoltage": False, "overvoltage": False, "feeder_limit": False}
    vm = result.voltages
    if vm is None:
        return flags
    load_buses = [i for i, b in enumerate(case.buses) if not b.is_slack]
    vmin = np.array([case.buses[i].v_min for i in load_buses])
    vmax = np.array([case.buses[i].v_max for i in load_buses])
    v = vm[:, load_buses]
    flags["undervoltage"] = bool(np.any(v <= vmin + BOUND_TOL))
    flags["overvoltage"] = bool(np.any(v >= vmax - BOUND_TOL))
    pg = np.asarray(result.feeder_kw) / case.s_base
    g = case.gen
    flags["feeder_limit"] = bool(np.any(pg >= g.p_max / case.s_base - BOUND_TOL)
                                 or np.any(pg <= g.p_min / case.s_base + BOUND_TOL))
    return flags


def latency_share(history, latency_ms=None) -> float:
    """Share of iteration time spent in transport.

    Without ``latency_ms`` the measured transport time is compared with the
    measured compute time.  With it, the share is a deployment estimate: each
    iteration costs the network solve, the slowest single household solve
    (every household on its own device), the dual update and one assumed
    latency.
    """
    if not history:
        return float("nan")
    if latency_ms is None:
        compute = sum(h.t_9a_ms + h.t_9b_ms + h.t_9c_ms for h in history)
        tr = sum(h.t_transport_ms for h in history)
        return float(tr / (tr + compute)) if tr + compute > 0 else 0.0
    compute = sum(h.t_9a_ms + (h.t_9b_max_ms or h.t_9b_ms) + h.t_9c_ms for h in history)
    lat = float(latency_ms) * len(history)
    return lat / (lat + float(compute))


def run_remote(case: Case, cfg: AdmmConfig, *, latency_ms=0.0, loss=0.0, seed=0,
               timeouts=None) -> AdmmResult:
    """Run ADMM through an aggregator and one agent thread per prosumer,
    all on UDP loopback sockets."""
    from .runtime.agent import agent_run
    from .runtime.aggregator import aggregator_serve
    from .runtime.transport import LinkModel, UdpTransport, with_link_model

    def transport(offset):
        t = UdpTransport(("127.0.0.1", 0))
        if latency_ms or loss:
            t = with_link_model(t, LinkModel(latency_ms, loss, seed=seed + offset))
        return t

    handle = aggregator_serve(None, case, cfg, transport=transport(0), timeouts=timeouts)
    agents = [threading.Thread(
        target=agent_run, name=f"agent-{h}", daemon=True,
        args=(handle.address, case.prosumers[h], case.horizon, case.tariff),
        kwargs=dict(agent_id=h, s_base=case.s_base, transport=transport(1 + h),
                    timeouts=timeouts))
        for h in range(case.n_prosumers)]
    for a in agents:
        a.start()
    result = handle.wait()
    for a in agents:
        a.join(timeout=5.0)
    return result


def run_point(case: Case, cfg: AdmmConfig, spec: SweepSpec, point: str, *, central=None,
              alpha=(1.0, 1.0), eps_abs=None):
    """Run ADMM on one case and summarize it as a :class:`SweepRow`."""
    if spec.backend == "remote":
        res = run_remote(case, cfg, latency_ms=spec.latency_ms, loss=spec.loss, seed=spec.seed)
    else:
        res = run_admm(case, cfg)
    hist = res.history
    last = hist[-1] if hist else None
    if central is None and spec.central:
        central = central_objective(case)
    central = float("nan") if central is None else central
    gap = 100.0 * (res.objective - central) / abs(central) if central == central else float("nan")
    if res.state is not None:
        diff = np.abs(res.p_hat - res.p) * 1e3
        r_max, r_mean = float(diff.max()), float(diff.mean())
    else:
        r_max = r_mean = float("nan")
    from .cases import problem_size

    mean = (lambda name: float(np.mean([getattr(h, name) for h in hist])) if hist
            else float("nan"))
    row = SweepRow(
        point=point, status=res.status, iterations=res.iterations,
        eps_abs=cfg.eps_abs if eps_abs is None else eps_abs,
        alpha_d=float(alpha[0]), alpha_pv=float(alpha[1]),
        n_prosumers=case.n_prosumers, n_steps=case.horizon.n,
        n_vars=problem_size(case)["n_vars"],
        r_norm=last.r_norm if last else float("nan"),
        s_norm=last.s_norm if last else float("nan"),
        eps_pri=last.eps_pri if last else float("nan"),
        eps_dual=last.eps_dual if last else float("nan"),
        objective=float(res.objective), central_objective=central, gap_pct=gap,
        r_max_w=r_max, r_mean_w=r_mean,
        t_9a_ms=mean("t_9a_ms"), t_9b_ms=mean("t_9b_ms"),
        t_9b_max_ms=mean("t_9b_max_ms"), t_9c_ms=mean("t_9c_ms"),
        t_transport_ms=mean("t_transport_ms"),
        bytes_up=int(sum(h.bytes_up for h in hist)),
        bytes_down=int(sum(h.bytes_down for h in hist)),
        latency_share=latency_share(hist),
        latency_share_100ms=latency_share(hist, ASSUMED_LATENCY_MS),
        **active_limits(case, res),
    )
    return row, res


# ----------------------------------------------------------------------------
# Sweeps


def _label(value) -> str:
    if isinstance(value, tuple):
        return "mix-" + "-".join(f"{v:g}" for v in value)
    return f"{value:g}"


def run_tolerance_sweep(spec: SweepSpec) -> SweepResult:
    """ADMM once per tolerance, all compared with one centralized solve."""
    if spec.kind != "tolerance":
        spec = replace(spec, kind="tolerance", grid=None)
    case = load_spec_case(spec)
    central = central_objective(case) if spec.central else float("nan")
    out = SweepResult(spec)
    for eps in spec.grid:
        point = f"tol-{eps:g}"
        try:
            row, res = run_point(case, spec.admm_config(eps), spec, point, central=central,
                                 eps_abs=eps)
        except Exception as e:
            raise SweepError(f"{point}: {e}", out) from e
        out.rows.append(row)
        out.histories[point] = res.history
        log.info("%s: k=%d gap=%.3f%% r_max=%.3g W", point, row.iterations, row.gap_pct,
                 row.r_max_w)
    return out


def run_mix_sweep(spec: SweepSpec) -> SweepResult:
    """ADMM at a fixed tolerance over a grid of demand and PV scalings."""
    if spec.kind != "mix":
        spec = replace(spec, kind="mix", grid=None)
    base = load_spec_case(spec)
    out = SweepResult(spec)
    for alpha in spec.grid:
        point = _label(tuple(alpha))
        case = scale_mix(base, *alpha)
        try:
            row, res = run_point(case, spec.admm_config(), spec, point, alpha=alpha)
        except Exception as e:
            raise SweepError(f"{point}: {e}", out) from e
        out.rows.append(row)
        out.histories[point] = res.history
        log.info("%s: k=%d flags uv=%d ov=%d fl=%d", point, row.iterations, row.undervoltage,
                 row.overvoltage, row.feeder_limit)
    base_k = [r.iterations for r in out.rows
              if not (r.undervoltage or r.overvoltage or r.feeder_limit)]
    out.extra["baseline_mean_k"] = float(np.mean(base_k)) if base_k else float("nan")
    return out


def run_size_sweep(spec: SweepSpec) -> SweepResult:
    """ADMM on minimal-k feeders of growing size; reports the t_9a slope."""
    if spec.kind != "size":
        spec = replace(spec, kind="size", grid=None)
    out = SweepResult(spec)
    for n in spec.grid:
        point = f"size-{int(n)}"
        case = load_spec_case(spec, n_prosumers=int(n))
        try:
            row, res = run_point(case, spec.admm_config(), spec, point)
        except Exception as e:
            raise SweepError(f"{point}: {e}", out) from e
        out.rows.append(row)
        out.histories[point] = res.history
    sizes = out.column("n_prosumers").astype(float)
    if sizes.size >= 2:
        out.extra["t_9a_slope_ms"] = float(np.polyfit(sizes, out.column("t_9a_ms"), 1)[0])
        out.extra["t_9b_slope_ms"] = float(np.polyfit(sizes, out.column("t_9b_ms"), 1)[0])
        out.extra["t_9b_max_slope_ms"] = float(
            np.polyfit(sizes, out.column("t_9b_max_ms"), 1)[0])
    return out


def run_sweep(spec: SweepSpec) -> SweepResult:
    return {"tolerance": run_tolerance_sweep, "mix": run_mix_sweep,
            "size": run_size_sweep}[spec.kind](spec)


def find_undervoltage(case: Case, alpha_pv=1.0, lo=1.0, hi=4.0, max_steps=40):
    """Smallest demand scaling (to bisection accuracy) at which the
    centralized optimum sits on a lower voltage limit.

    Returns ``(alpha_d, solution)``, or ``(None, None)`` if the interval does
    not bracket the onset.  Beyond the onset the case quickly turns
    infeasible, because batteries are already fully used at the peak.
    """

    def probe(alpha):
        c = scale_mix(case, alpha, alpha_pv)
        P = build_centralized(c)
        sol = nlp_solve(P, max_iter=300)
        if not sol.ok:
            return "infeasible", sol
        L = P.layout.network
        vmin = min(b.v_min for b in c.buses if not b.is_slack)
        v = sol.x[L.v]
        return ("binding" if v.min() <= vmin + BOUND_TOL else "slack"), sol

    state, _ = probe(lo)
    if state != "slack":
        return None, None
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        state, sol = probe(mid)
        if state == "binding":
            return mid, sol
        if state == "slack":
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6:
            break
    return None, None


# ----------------------------------------------------------------------------
# Reports


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for row in result.rows:
            d = asdict(row)
            w.writerow({k: (repr(v) if isinstance(v, float) else int(v) if isinstance(v, bool)
                            else v) for k, v in d.items()})


def read_sweep_csv(path) -> list:
    types = {f.name: f.type for f in fields(SweepRow)}
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for k, v in rec.items():
                t = types[k]
                if t in ("bool", bool):
                    kw[k] = bool(int(v))
                elif t in ("int", int):
                    kw[k] = int(v)
                elif t in ("float", float):
                    kw[k] = float(v)
                else:
                    kw[k] = v
            rows.append(SweepRow(**kw))
    return rows


def _plots(result: SweepResult, out_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    kind = result.spec.kind if result.spec else "tolerance"
    rows = result.rows

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if kind == "tolerance":
        ax.semilogx(result.column("eps_abs"), result.column("iterations"), "o-")
        ax.invert_xaxis()
        ax.set_xlabel("eps_abs")
        name = "k-vs-tolerance.svg"
    elif kind == "mix":
        ad = sorted({r.alpha_d for r in rows})
        ap = sorted({r.alpha_pv for r in rows})
        grid = np.full((len(ap), len(ad)), np.nan)
        for r in rows:
            grid[ap.index(r.alpha_pv), ad.index(r.alpha_d)] = r.iterations
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(ad)), [f"{a:g}" for a in ad])
        ax.set_yticks(range(len(ap)), [f"{a:g}" for a in ap])
        for r in rows:
            mark = "".join(c for c, f in (("U", r.undervoltage), ("O", r.overvoltage),
                                          ("F", r.feeder_limit)) if f)
            if mark:
                ax.text(ad.index(r.alpha_d), ap.index(r.alpha_pv), mark, ha="center",
                        va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax, label="iterations")
        ax.set_xlabel("demand scaling alpha_d")
        ax.set_ylabel("PV scaling alpha_pv")
        name = "k-vs-mix.svg"
    else:
        ax.plot(result.column("n_prosumers"), result.column("t_9a_ms"), "o-", label="t_9a")
        ax.plot(result.column("n_prosumers"), result.column("t_9b_ms"), "s-", label="t_9b")
        ax.plot(result.column("n_prosumers"), result.column("t_9b_max_ms"), "d:",
                label="t_9b, one household")
        ax2 = ax.twinx()
        ax2.plot(result.column("n_prosumers"), result.column("iterations"), "k^--")
        ax2.set_ylabel("iterations")
        ax.set_xlabel("prosumers")
        ax.set_ylabel("mean time per iteration (ms)")
        ax.legend(loc="upper left")
        name = "time-vs-size.svg"
    if kind != "mix":
        ax.set_ylabel(ax.get_ylabel() or "iterations")
    fig.tight_layout()
    path = os.path.join(out_dir, name)
    fig.savefig(path)
    plt.close(fig)
    files.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for point, hist in result.histories.items():
        if hist:
            ax.semilogy([h.k for h in hist], [h.r_norm for h in hist], label=point)
    ax.set_xlabel("iteration k")
    ax.set_ylabel("primal residual norm (p.u.)")
    if len(result.histories) <= 10:
        ax.legend(fontsize=6)
    fig.tight_layout()
    path = os.path.join(out_dir, "residuals.svg")
    fig.savefig(path)
    plt.close(fig)
    files.append(path)
    return files


def emit_report(result: SweepResult, out_dir) -> list:
    """Write ``sweep.csv``, per-point histories and plots; return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    path = os.path.join(out_dir, "sweep.csv")
    write_sweep_csv(result, path)
    files.append(path)
    for point, hist in result.histories.items():
        p = os.path.join(out_dir, f"history-{point}.csv")
        write_history_csv(hist, p)
        files.append(p)
    if result.rows:
        files += _plots(result, out_dir)
    return files
