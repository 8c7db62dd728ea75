"""Load pick-up optimization for distribution networks.

A mixed-integer linear model of network reconfiguration and service
restoration whose quadratic flow terms are replaced by piecewise-linear
over-approximations, tightened over several solve steps.
"""

from .backends import EnumerativeBackend, HighsBackend, Solution, make_backend
from .driver import RunReport, init_bounds, renew_bounds, run_multistep
from .io import load_network, write_report
from .metrics import ErrorIndices, error_indices
from .model import FeederBounds, build_model, count_model, expected_counts
from .network import Bus, Feeder, Mode, Network, RunConfig, validate_network
from .oracle import brute_force_optimum, check_forest, distflow_solve, validate_solution
from .pwl import PwlSpec, pwl_eval, pwl_value

__all__ = [
    "Bus", "Feeder", "Network", "Mode", "RunConfig", "validate_network",
    "PwlSpec", "pwl_eval", "pwl_value",
    "FeederBounds", "build_model", "count_model", "expected_counts",
    "Solution", "EnumerativeBackend", "HighsBackend", "make_backend",
    "ErrorIndices", "error_indices",
    "RunReport", "init_bounds", "renew_bounds", "run_multistep",
    "distflow_solve", "check_forest", "brute_force_optimum", "validate_solution",
    "load_network", "write_report",
]
