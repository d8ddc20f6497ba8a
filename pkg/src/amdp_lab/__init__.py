"""Average-cost MDP policy evaluation and policy mirror descent, with exact tabular oracles."""
from .core import (
    Policy,
    Regularizer,
    TabularAmdp,
    average_cost,
    differential_values,
    induced_state_action_kernel,
    induced_state_kernel,
    mixing_time,
    solve_optimal,
    stationary_distribution,
    stationary_info,
)
from .errors import AmdpError

__version__ = "0.1.0"

__all__ = [
    "AmdpError",
    "Policy",
    "Regularizer",
    "TabularAmdp",
    "average_cost",
    "differential_values",
    "induced_state_action_kernel",
    "induced_state_kernel",
    "mixing_time",
    "solve_optimal",
    "stationary_distribution",
    "stationary_info",
]
