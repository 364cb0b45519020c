"""Deterministic desk-scale simulator of clustered semi-supervised
federated learning over LEO satellite constellations."""

from .domain import (ConfigError, ExperimentConfig, SeededRng, RoundMetrics,
                     config_from_mapping, load_config, parse_config,
                     serialize_config, validate_config)
from .harness import RunResult, run_experiment, run_simulation

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "SeededRng", "RoundMetrics",
    "RunResult", "config_from_mapping", "load_config", "parse_config",
    "run_experiment", "run_simulation", "serialize_config", "validate_config",
    "__version__",
]
