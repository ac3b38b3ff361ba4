"""Clustered vehicular federated learning: mobility-aware cluster-head
selection, V2V matching and similarity-based model splitting."""

from .config import ExperimentConfig, Seeds, load_config, preset
from .exceptions import ConfigurationError, DomainError, FormatError, VersionMismatchError
from .orchestrator import clustering_step, run_experiment, run_round, run_vanilla_baseline

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DomainError",
    "ExperimentConfig",
    "FormatError",
    "Seeds",
    "VersionMismatchError",
    "clustering_step",
    "load_config",
    "preset",
    "run_experiment",
    "run_round",
    "run_vanilla_baseline",
]
