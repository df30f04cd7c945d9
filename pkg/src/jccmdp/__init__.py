"""Bounds for joint chance-constrained constrained MDPs."""

from .chance import CopulaParams, RandomVectorSpec
from .costs import BoundReport, BoundResult, CostUncertainty, solve_random_costs
from .mdp import CmdpInstance, StationaryPolicy, solve_exact_cmdp
from .transitions import TransitionUncertainty, solve_random_tp

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "BoundResult", "CmdpInstance", "CopulaParams", "CostUncertainty",
    "RandomVectorSpec", "StationaryPolicy", "TransitionUncertainty", "solve_exact_cmdp",
    "solve_random_costs", "solve_random_tp",
]
