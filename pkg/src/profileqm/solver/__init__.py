from ._backend import BACKEND, get_kernel
from .sbw import (
    SbwProblem,
    WeightSolution,
    check_feasibility,
    classify_practices,
    kkt_residuals,
    practice_problems,
    solve_practices,
    solve_sbw,
)

__all__ = [
    "BACKEND",
    "SbwProblem",
    "WeightSolution",
    "check_feasibility",
    "classify_practices",
    "get_kernel",
    "kkt_residuals",
    "practice_problems",
    "solve_practices",
    "solve_sbw",
]
