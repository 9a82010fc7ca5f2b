"""Network, prosumer and centralized problem builders."""

from .central import CentralVars, build_centralized
from .extract import extract_power_profile
from .network import NetworkVars, PowerFlow, build_network_subproblem
from .prosumer import ProsumerVars, build_prosumer_subproblem, solve_prosumer

__all__ = [
    "CentralVars",
    "NetworkVars",
    "PowerFlow",
    "ProsumerVars",
    "build_centralized",
    "build_network_subproblem",
    "build_prosumer_subproblem",
    "extract_power_profile",
    "solve_prosumer",
]
