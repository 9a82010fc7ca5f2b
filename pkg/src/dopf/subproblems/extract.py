"""Read coupling quantities back out of subproblem solutions."""

from __future__ import annotations

import numpy as np

from ..opt.problem import NlpSolution


def extract_power_profile(sol: NlpSolution, side: str = None) -> np.ndarray:
    """Net power in kW, positive for import.

    Parameters
    ----------
    sol : NlpSolution
        Optimal solution of a network, prosumer or centralized problem.
    side : {"network", "prosumer"}, optional
        Which copy to read.  A network solution only has ``p_hat`` and a
        prosumer solution only has ``p``; a centralized solution holds one
        profile that serves both sides.  Defaults to the solution's own side.

    Returns
    -------
    ndarray
        ``(|H|, len(steps))`` for network and centralized solutions,
        ``(|T|,)`` for a prosumer solution.

    Raises
    ------
    ValueError
        If the solution is not optimal or does not carry the requested side.
    """
    if not sol.ok:
        raise ValueError(f"refusing to read a {sol.status!r} solution")
    L = sol.layout
    if L is None or not hasattr(L, "side"):
        raise ValueError("solution has no subproblem layout")
    side = L.side if side is None else side
    if side not in ("network", "prosumer"):
        raise ValueError(f"unknown side {side!r}")
    x = sol.x
    if L.side == "network":
        if side != "network":
            raise ValueError("a network solution holds only the network copy")
        return L.s_base * x[L.p_hat].T
    if L.side == "prosumer":
        if side != "prosumer":
            raise ValueError("a prosumer solution holds only the prosumer copy")
        return L.s_base * (x[L.p_plus] - x[L.p_minus])
    rows = [L.s_base * (x[P.p_plus] - x[P.p_minus]) for P in L.prosumers]
    return np.array(rows).reshape(len(L.prosumers), -1)
