"""Experiment harness and CLI."""
from .config import ExperimentConfig, load_config, parse_config
from .experiments import RunRecord, run_experiment

__all__ = ["ExperimentConfig", "RunRecord", "load_config", "parse_config", "run_experiment"]
