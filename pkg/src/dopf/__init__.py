"""Distributed multiperiod AC optimal power flow with prosumer agents."""

from .admm import AdmmConfig, AdmmResult, run_admm
from .cases import build_case, problem_size, scale_mix
from .model import Case, load_case, save_case

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "AdmmResult", "Case", "build_case", "load_case", "problem_size",
    "run_admm", "save_case", "scale_mix",
]
