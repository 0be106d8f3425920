"""Desk-scale federated graph collaborative filtering with value-based data selection."""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import run_experiment
from .federation import FedConfig, run_federation, setup_clients
from .graph import InteractionGraph, build_graph
from .rng import Rng

__all__ = [
    "__version__",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "FedConfig",
    "run_federation",
    "setup_clients",
    "InteractionGraph",
    "build_graph",
    "Rng",
]
