"""Declarative experiment runner and command-line entry point."""

from .config import ConfigError, ExperimentConfig, parse_config, validate_config
from .runner import RunOutcome, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "RunOutcome", "parse_config", "run_experiment", "validate_config"]
