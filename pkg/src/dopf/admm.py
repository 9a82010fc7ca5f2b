"""Consensus ADMM between the network operator and the prosumers.

Each iteration solves the network subproblem for the copies ``p_hat``, hands
``(p_hat_h, lam_h, rho)`` to every prosumer, collects their net power ``p_h``
and updates the duals::

    lam <- lam + rho (p_hat - p)

The consensus bookkeeping runs in per-unit on the case base power: residuals
``r = p_hat - p`` and ``s = p - p_prev``, the duals and ``rho``.  The stopping
rule compares the residual norms with tolerances that mix an absolute and a
relative part, so ``eps_abs`` is a per-unit power.  ``rho`` is adapted by
residual balancing without rescaling ``lam``.  Subproblems and the wire see
kW, $/kW and $/kW^2.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np

from .model import Case
from .opt.ipm import solve as nlp_solve
from .subproblems.network import NetworkVars, build_network_subproblem
from .subproblems.prosumer import build_prosumer_subproblem, solve_prosumer

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
TRANSPORT_FAILURE = "transport_failure"
SOLVER_FAILURE = "solver_failure"


@dataclass(frozen=True)
class CouplingState:
    """Consensus state: network copies, prosumer copies, duals, penalty.

    Units are up to the caller; :func:`run_admm` keeps ``p_hat`` and ``p`` in
    per-unit power, ``lam`` in $ per p.u. and ``rho`` in $ per p.u.^2.
    """

    p_hat: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    rho: float

    def __post_init__(self):
        for name in ("p_hat", "p", "lam"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.p_hat.shape == self.p.shape == self.lam.shape):
            raise ValueError("p_hat, p and lam must share one shape")
        if not self.rho > 0:
            raise ValueError("rho must be positive")


@dataclass(frozen=True)
class AdmmConfig:
    """Algorithm settings.

    ``eps_rel`` defaults to ``10 * eps_abs``.  ``eps_abs`` and ``rho0`` are
    per-unit (p.u. power and $ per p.u.^2).
    ``workers`` bounds the in-process prosumer pool.  With ``wire_float32``
    the in-process backend rounds everything it exchanges to 32-bit floats,
    exactly as the remote transport does.
    """

    eps_abs: float = 1e-4
    eps_rel: Optional[float] = None
    rho0: float = 1.0
    mu: float = 10.0
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    k_max: int = 500
    adaptive_rho: bool = True
    backend: str = "in-process"
    workers: int = 4
    wire_float32: bool = True
    network_tol: float = 1e-7
    prosumer_tol: float = 1e-8

    def __post_init__(self):
        if self.eps_rel is None:
            object.__setattr__(self, "eps_rel", 10.0 * self.eps_abs)
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("eps_abs and eps_rel must be positive")
        if not self.mu > 1:
            raise ValueError("mu must exceed 1")
        if not (self.tau_incr > 1 and self.tau_decr > 1):
            raise ValueError("tau_incr and tau_decr must exceed 1")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")


@dataclass
class IterationRecord:
    k: int
    r_norm: float
    s_norm: float
    eps_pri: float
    eps_dual: float
    rho: float
    objective: float
    t_9a_ms: float
    t_9b_ms: float
    t_9c_ms: float
    bytes_up: int = 0
    bytes_down: int = 0
    t_transport_ms: float = 0.0
    r_max: float = 0.0
    t_9b_max_ms: float = 0.0


HISTORY_COLUMNS = ["k", "r_norm", "s_norm", "eps_pri", "eps_dual", "rho", "objective",
                   "t_9a_ms", "t_9b_ms", "t_9c_ms", "bytes_up", "bytes_down",
                   "t_transport_ms", "r_max", "t_9b_max_ms"]


class Residuals(NamedTuple):
    r_norm: float
    s_norm: float


class Tolerances(NamedTuple):
    eps_pri: float
    eps_dual: float


def dual_update(state: CouplingState) -> CouplingState:
    """``lam + rho (p_hat - p)``; everything else is carried over."""
    return replace(state, lam=state.lam + state.rho * (state.p_hat - state.p))


def residuals(state: CouplingState, p_prev) -> Residuals:
    """Norms of ``p_hat - p`` and ``p - p_prev`` (the latter not scaled by rho)."""
    p_prev = np.asarray(p_prev, dtype=float)
    if p_prev.shape != state.p.shape:
        raise ValueError("p_prev does not match the state shape")
    r = (state.p_hat - state.p).ravel()
    s = (state.p - p_prev).ravel()
    return Residuals(float(np.linalg.norm(r)), float(np.linalg.norm(s)))


def tolerances(state: CouplingState, n_coupling: int, eps_abs: float,
               eps_rel: Optional[float] = None) -> Tolerances:
    """Primal and dual feasibility tolerances.

    ``n_coupling`` is the number of coupling constraints, ``|H| |T|``.
    """
    if eps_rel is None:
        eps_rel = 10.0 * eps_abs
    base = math.sqrt(n_coupling) * eps_abs
    eps_pri = base + eps_rel * max(float(np.linalg.norm(state.p_hat)),
                                   float(np.linalg.norm(state.p)))
    eps_dual = base + eps_rel * float(np.linalg.norm(state.lam))
    return Tolerances(eps_pri, eps_dual)


def check_termination(r_norm, s_norm, eps_pri, eps_dual) -> bool:
    return bool(r_norm <= eps_pri and s_norm <= eps_dual)


def adapt_rho(rho: float, r_norm: float, s_norm: float, cfg: AdmmConfig) -> float:
    """Residual balancing: grow rho when the primal residual dominates,
    shrink it when the dual residual does."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if r_norm > cfg.mu * s_norm:
        return rho * cfg.tau_incr
    if s_norm > cfg.mu * r_norm:
        return rho / cfg.tau_decr
    return rho


def f32(a):
    """Round to the nearest 32-bit float and back."""
    return np.asarray(a, dtype=np.float32).astype(float)


# ----------------------------------------------------------------------------
# Prosumer backends


@dataclass
class RoundStats:
    t_solve_ms: float = 0.0
    t_solve_max_ms: float = 0.0     # longest single-household solve, CPU time
    t_transport_ms: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0


class BackendError(RuntimeError):
    """A prosumer could not be reached or failed to solve."""

    def __init__(self, message, agent_id=None, status=TRANSPORT_FAILURE):
        super().__init__(message)
        self.agent_id = agent_id
        self.status = status


def solve_household(profile, horizon, tariff, p_hat_h, lam_h, rho, s_base, tol=1e-8):
    """One prosumer solve, shared by the in-process backend and the agent."""
    prob = build_prosumer_subproblem(profile, horizon, tariff, p_hat_h, lam_h, rho,
                                     s_base=s_base)
    sol = solve_prosumer(prob, tol=tol)
    if not sol.ok:
        raise BackendError(f"prosumer solve failed: {sol.message}", status=SOLVER_FAILURE)
    L = sol.layout
    return s_base * (sol.x[L.p_plus] - sol.x[L.p_minus])


class InProcessBackend:
    """Solves every prosumer subproblem in a local thread pool."""

    name = "in-process"

    def __init__(self, case: Case, cfg: AdmmConfig):
        self.case = case
        self.cfg = cfg
        self.pool = ThreadPoolExecutor(max_workers=max(1, cfg.workers))
        from .runtime.wire import profile_frame_size, targets_frame_size

        T = case.horizon.n
        self._down = targets_frame_size(T)
        self._up = profile_frame_size(T)

    def round(self, k, p_hat, lam, rho):
        c = self.case
        if self.cfg.wire_float32:
            p_hat, lam, rho = f32(p_hat), f32(lam), float(np.float32(rho))
        t0 = time.perf_counter()

        def one(h):
            c0 = time.thread_time()
            try:
                p = solve_household(c.prosumers[h], c.horizon, c.tariff, p_hat[h], lam[h],
                                    rho, c.s_base, self.cfg.prosumer_tol)
            except BackendError as e:
                e.agent_id = h
                raise
            return p, 1e3 * (time.thread_time() - c0)

        done = list(self.pool.map(one, range(c.n_prosumers)))
        out = np.array([p for p, _ in done])
        if self.cfg.wire_float32:
            out = f32(out)
        H = c.n_prosumers
        stats = RoundStats(t_solve_ms=1e3 * (time.perf_counter() - t0),
                           t_solve_max_ms=max((ms for _, ms in done), default=0.0),
                           bytes_up=H * self._up, bytes_down=H * self._down)
        return out.reshape(p_hat.shape), stats

    def finish(self, status):
        self.pool.shutdown(wait=True)


# ----------------------------------------------------------------------------
# Network stage


class NetworkStage:
    """Solves the network subproblem one step at a time with warm starts.

    The network is separable across steps, so this gives the same optimum as
    the full multiperiod problem at a fraction of the linear-algebra cost.
    """

    def __init__(self, case: Case, tol=1e-7):
        self.case = case
        self.tol = tol
        T = case.horizon.n
        self.warm = [None] * T
        self.layouts = [NetworkVars.build(case, [t]) for t in range(T)]
        self.x = [None] * T
        self.iterations = 0

    def solve(self, p, lam, rho):
        c = self.case
        T, H = c.horizon.n, c.n_prosumers
        p_hat = np.empty((H, T))
        for t in range(T):
            w = self.warm[t]
            prob = build_network_subproblem(c, p, lam, rho, steps=[t],
                                            x0=None if w is None else w[0])
            if w is None:
                sol = nlp_solve(prob, tol=self.tol)
            else:
                sol = nlp_solve(prob, tol=self.tol, mu_init=1e-3, bound_push=1e-4,
                                y0=w[1], z_lo0=w[2], z_hi0=w[3])
                if not sol.ok:
                    prob = build_network_subproblem(c, p, lam, rho, steps=[t])
                    sol = nlp_solve(prob, tol=self.tol)
            if not sol.ok:
                raise BackendError(f"network subproblem at step {t} failed: "
                                   f"{sol.status} ({sol.message})", status=SOLVER_FAILURE)
            self.iterations += sol.iterations
            self.warm[t] = (sol.x, sol.y, sol.z_lo, sol.z_hi)
            self.x[t] = sol.x
            L = sol.layout
            p_hat[:, t] = c.s_base * sol.x[L.p_hat[0]]
        return p_hat

    def gen_cost(self):
        g = self.case.gen
        S = self.case.s_base
        total = 0.0
        for L, x in zip(self.layouts, self.x):
            pg = S * x[L.pg_plus[0]]
            total += g.c2 * pg * pg + g.c1 * pg + g.c0
        return float(total)

    def snapshot(self):
        """Voltage magnitudes ``(T, B)``, feeder import ``pg+ - pg-`` (kW)."""
        c = self.case
        T = c.horizon.n
        vm = np.ones((T, c.n_buses))
        pg = np.zeros(T)
        for t, (L, x) in enumerate(zip(self.layouts, self.x)):
            vm[t, L.buses] = x[L.v[0]]
            pg[t] = c.s_base * (x[L.pg_plus[0]] - x[L.pg_minus[0]])
        return vm, pg


def prosumer_bills(case: Case, p) -> np.ndarray:
    """Energy bill of each household for net power ``p`` (kW)."""
    price = np.asarray(case.tariff.c_tou, dtype=float)
    dt = case.horizon.dt
    return dt * (np.maximum(p, 0.0) @ price - case.tariff.c_fit * np.maximum(-p, 0.0).sum(axis=1))


# ----------------------------------------------------------------------------
# Driver


@dataclass
class AdmmResult:
    status: str
    state: CouplingState
    history: list
    objective: float
    iterations: int
    message: str = ""
    failed_agent: Optional[int] = None
    voltages: Optional[np.ndarray] = None
    feeder_kw: Optional[np.ndarray] = None
    wall_s: float = 0.0
    s_base: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def p_hat(self):
        """Network copies (kW)."""
        return self.s_base * self.state.p_hat

    @property
    def p(self):
        """Prosumer net power (kW)."""
        return self.s_base * self.state.p

    @property
    def lam(self):
        """Duals in $ per kW of mismatch per step."""
        return self.state.lam / self.s_base

    @property
    def r_max(self) -> float:
        """Largest coupling mismatch (kW)."""
        return float(np.max(np.abs(self.p_hat - self.p)))


def make_backend(case, cfg):
    if cfg.backend == "in-process":
        return InProcessBackend(case, cfg)
    raise ValueError(f"backend {cfg.backend!r} needs an explicit backend object")


def run_admm(case: Case, cfg: AdmmConfig = None, backend=None, *, callback=None) -> AdmmResult:
    """Run consensus ADMM to the stopping rule or ``k_max``.

    Parameters
    ----------
    case : Case
    cfg : AdmmConfig, optional
    backend : object, optional
        Anything with ``round(k, p_hat, lam, rho) -> (p, RoundStats)`` and
        ``finish(status)``; an in-process pool by default.
    callback : callable, optional
        Called with each :class:`IterationRecord`.

    Returns
    -------
    AdmmResult
        ``history`` always holds one record per completed iteration.  On
        ``max_iter`` the returned state is the iterate that came closest to
        the stopping rule.
    """
    cfg = AdmmConfig() if cfg is None else cfg
    own_backend = backend is None
    if backend is None:
        backend = make_backend(case, cfg)
    H, T = case.n_prosumers, case.horizon.n
    n_coupling = H * T
    stage = NetworkStage(case, cfg.network_tol)

    S = case.s_base
    p = case.demand_matrix().copy()         # kW, as the subproblems want it
    lam = np.zeros((H, T))                  # $ per p.u.
    rho = float(cfg.rho0)                   # $ per p.u.^2
    history = []
    best = None
    status, message, failed = MAX_ITER, "iteration limit reached", None
    state = CouplingState(p / S, p / S, lam, rho)
    t_start = time.perf_counter()

    try:
        for k in range(1, cfg.k_max + 1):
            lam_kw, rho_kw = lam / S, rho / S ** 2
            t0 = time.perf_counter()
            p_hat = stage.solve(p, lam_kw, rho_kw)
            t1 = time.perf_counter()
            p_new, stats = backend.round(k, p_hat, lam_kw, rho_kw)
            t2 = time.perf_counter()
            state = dual_update(CouplingState(p_hat / S, p_new / S, lam, rho))
            res = residuals(state, p / S)
            tol = tolerances(state, n_coupling, cfg.eps_abs, cfg.eps_rel)
            objective = stage.gen_cost() + float(prosumer_bills(case, p_new).sum())
            t3 = time.perf_counter()
            rec = IterationRecord(
                k=k, r_norm=res.r_norm, s_norm=res.s_norm, eps_pri=tol.eps_pri,
                eps_dual=tol.eps_dual, rho=rho, objective=objective,
                t_9a_ms=1e3 * (t1 - t0), t_9b_ms=stats.t_solve_ms,
                t_9c_ms=1e3 * (t3 - t2), t_9b_max_ms=stats.t_solve_max_ms,
                bytes_up=stats.bytes_up,
                bytes_down=stats.bytes_down, t_transport_ms=stats.t_transport_ms,
                r_max=float(np.max(np.abs(p_hat - p_new))),
            )
            history.append(rec)
            if callback is not None:
                callback(rec)
            log.debug("k=%d r=%.3e/%.3e s=%.3e/%.3e rho=%g", k, rec.r_norm, rec.eps_pri,
                      rec.s_norm, rec.eps_dual, rho)
            score = max(rec.r_norm / rec.eps_pri, rec.s_norm / rec.eps_dual)
            if best is None or score < best[0]:
                best = (score, state, objective, stage.snapshot())
            if check_termination(rec.r_norm, rec.s_norm, rec.eps_pri, rec.eps_dual):
                status, message = CONVERGED, f"converged in {k} iterations"
                best = (score, state, objective, stage.snapshot())
                break
            p, lam = p_new, state.lam
            if cfg.adaptive_rho:
                rho = adapt_rho(rho, rec.r_norm, rec.s_norm, cfg)
    except BackendError as e:
        status, message, failed = e.status, str(e), e.agent_id
    finally:
        backend.finish(status)

    if best is None:
        vm, pg = (None, None)
        objective = float("nan")
    else:
        _, state, objective, (vm, pg) = best
    return AdmmResult(
        status=status, state=state, s_base=S, history=history, objective=objective,
        iterations=len(history), message=message, failed_agent=failed,
        voltages=vm, feeder_kw=pg, wall_s=time.perf_counter() - t_start,
        extra={"network_ipm_iterations": stage.iterations, "own_backend": own_backend},
    )


# ----------------------------------------------------------------------------
# History I/O


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for rec in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in asdict(rec).items()})


def read_history_csv(path) -> list:
    types = {f.name: f.type for f in fields(IterationRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                kw[k] = int(v) if types[k] in ("int", int) else float(v)
            out.append(IterationRecord(**kw))
    return out
