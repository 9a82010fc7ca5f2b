"""Optimization kernel: interior-point NLP solver, convex QP fast path and
finite-difference derivative checks."""

from .derivatives import DerivativeReport, check_derivatives
from .ipm import solve
from .problem import (
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_ERROR,
    OPTIMAL,
    InfeasibleProblemError,
    NlpProblem,
    NlpSolution,
    kkt_residuals,
    qp_problem,
)
from .qp import solve_qp_box

__all__ = [
    "DerivativeReport", "INFEASIBLE", "InfeasibleProblemError", "MAX_ITER",
    "NUMERICAL_ERROR", "NlpProblem", "NlpSolution", "OPTIMAL", "check_derivatives",
    "kkt_residuals", "qp_problem", "solve", "solve_qp_box",
]
