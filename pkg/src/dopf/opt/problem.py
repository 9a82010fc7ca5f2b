"""Problem and solution containers shared by the NLP and QP solvers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
NUMERICAL_ERROR = "numerical_error"


class InfeasibleProblemError(ValueError):
    """The linear equality system has no solution."""


@dataclass
class NlpProblem:
    """Smooth program ``min f(x) s.t. c(x) = 0, lo <= x <= hi``.

    Callbacks
    ---------
    objective(x) -> float
    gradient(x) -> (n,) array
    constraints(x) -> (m,) array
    jacobian(x) -> (m, n) dense array or sparse matrix
    hessian(x, y) -> (n, n) Hessian of ``f(x) + y @ c(x)``, dense or sparse

    ``layout`` carries whatever index map the builder wants to hand back to
    callers (it is copied onto the solution).
    """

    n: int
    objective: Callable
    gradient: Callable
    hessian: Callable
    lo: np.ndarray
    hi: np.ndarray
    x0: np.ndarray
    m: int = 0
    constraints: Optional[Callable] = None
    jacobian: Optional[Callable] = None
    layout: Any = None
    name: str = ""
    qp: Any = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).reshape(self.n)
        self.hi = np.asarray(self.hi, dtype=float).reshape(self.n)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.n)
        if np.any(self.lo > self.hi):
            bad = int(np.argmax(self.lo > self.hi))
            raise ValueError(f"bound {bad}: lo > hi")
        if self.m and (self.constraints is None or self.jacobian is None):
            raise ValueError("m > 0 requires constraints and jacobian callbacks")

    def c(self, x):
        if not self.m:
            return np.zeros(0)
        return np.asarray(self.constraints(x), dtype=float)

    def jac(self, x):
        if not self.m:
            return np.zeros((0, self.n))
        return self.jacobian(x)


@dataclass
class NlpSolution:
    x: np.ndarray
    y: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    status: str
    objective: float
    iterations: int
    kkt: dict
    message: str = ""
    mu: float = 0.0
    layout: Any = None
    trace: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def dense(a) -> np.ndarray:
    if sp.issparse(a):
        return a.toarray()
    return np.asarray(a, dtype=float)


def kkt_residuals(problem: NlpProblem, x, y, z_lo, z_hi) -> dict:
    """Unscaled first-order residuals of a primal-dual point."""
    g = np.asarray(problem.gradient(x), dtype=float)
    if problem.m:
        g = g + np.asarray(problem.jac(x).T @ y).ravel()
    stat = g - z_lo + z_hi
    feas = problem.c(x)
    lo_fin = np.isfinite(problem.lo)
    hi_fin = np.isfinite(problem.hi)
    comp = 0.0
    if lo_fin.any():
        comp = max(comp, float(np.max(np.abs(z_lo[lo_fin] * (x[lo_fin] - problem.lo[lo_fin])))))
    if hi_fin.any():
        comp = max(comp, float(np.max(np.abs(z_hi[hi_fin] * (problem.hi[hi_fin] - x[hi_fin])))))
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "feasibility": float(np.max(np.abs(feas))) if feas.size else 0.0,
        "complementarity": comp,
        "min_bound_multiplier": float(min(z_lo.min(initial=0.0), z_hi.min(initial=0.0))),
    }


def qp_problem(H, g, lo, hi, A=None, b=None, x0=None, name="qp", offset=0.0,
               layout=None) -> NlpProblem:
    """Wrap ``min 1/2 x'Hx + g'x + offset s.t. Ax = b, lo <= x <= hi`` as an
    NlpProblem.  The raw data is kept on ``problem.qp`` for the QP solver."""
    g = np.asarray(g, dtype=float)
    n = g.size
    Hs = sp.csr_matrix(H)
    if A is None:
        A = sp.csr_matrix((0, n))
        b = np.zeros(0)
    As = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    m = As.shape[0]
    if x0 is None:
        x0 = np.clip(np.zeros(n), lo, hi)
    return NlpProblem(
        n=n,
        objective=lambda x: float(0.5 * x @ (Hs @ x) + g @ x + offset),
        gradient=lambda x: Hs @ x + g,
        hessian=lambda x, y: Hs,
        lo=lo, hi=hi, x0=x0, m=m,
        constraints=(lambda x: As @ x - b) if m else None,
        jacobian=(lambda x: As) if m else None,
        name=name,
        layout=layout,
        qp=(Hs, g, np.asarray(lo, dtype=float), np.asarray(hi, dtype=float),
            As if m else None, b if m else None, offset),
    )
