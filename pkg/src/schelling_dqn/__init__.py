"""Schelling segregation simulated with per-type deep Q-learning agents."""

from .grid_env import Action, Grid, Kind, RewardParams, init_grid, step_iteration
from .experiment import ExperimentConfig, run_simulation, run_sweep, write_outputs

__all__ = [
    "Action",
    "ExperimentConfig",
    "Grid",
    "Kind",
    "RewardParams",
    "init_grid",
    "run_simulation",
    "run_sweep",
    "step_iteration",
    "write_outputs",
]
__version__ = "0.1.0"
