"""Central finite-difference checks for hand-coded NLP derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import NlpProblem, dense


@dataclass
class DerivativeReport:
    gradient_error: float
    jacobian_error: float
    hessian_error: float
    flagged: list = field(default_factory=list)
    threshold: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.gradient_error, self.jacobian_error, self.hessian_error)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold


def _rel(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def check_derivatives(problem: NlpProblem, x, *, h=1e-6, threshold=1e-5, y=None,
                      seed=0) -> DerivativeReport:
    """Compare gradient, Jacobian and Lagrangian Hessian callbacks with
    central differences at ``x``.

    Errors are relative, ``|a - b| / max(1, |a|, |b|)``.  The Hessian is
    checked for ``f + y'c`` with ``y`` drawn from a standard normal unless
    given.  Entries above ``threshold`` are listed in ``flagged`` as
    ``(kind, row, col)``.
    """
    p = problem
    x = np.asarray(x, dtype=float)
    n, m = p.n, p.m
    if y is None:
        y = np.random.default_rng(seed).standard_normal(m)

    g = np.asarray(p.gradient(x), dtype=float)
    J = dense(p.jac(x)) if m else np.zeros((0, n))
    W = dense(p.hessian(x, y))

    g_fd = np.empty(n)
    J_fd = np.empty((m, n))
    W_fd = np.empty((n, n))

    def lag_grad(z):
        gz = np.asarray(p.gradient(z), dtype=float)
        if m:
            gz = gz + dense(p.jac(z)).T @ y
        return gz

    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        g_fd[j] = (p.objective(x + e) - p.objective(x - e)) / (2 * h)
        if m:
            J_fd[:, j] = (p.c(x + e) - p.c(x - e)) / (2 * h)
        W_fd[:, j] = (lag_grad(x + e) - lag_grad(x - e)) / (2 * h)

    flagged = []
    eg = _rel(g, g_fd)
    flagged += [("gradient", int(i), 0) for i in np.flatnonzero(eg > threshold)]
    eJ = _rel(J, J_fd) if m else np.zeros((0, n))
    flagged += [("jacobian", int(i), int(j)) for i, j in zip(*np.nonzero(eJ > threshold))]
    eW = _rel(W, W_fd)
    flagged += [("hessian", int(i), int(j)) for i, j in zip(*np.nonzero(eW > threshold))]
    return DerivativeReport(
        gradient_error=float(eg.max(initial=0.0)),
        jacobian_error=float(eJ.max(initial=0.0)),
        hessian_error=float(eW.max(initial=0.0)),
        flagged=flagged,
        threshold=threshold,
    )
