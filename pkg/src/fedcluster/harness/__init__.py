"""Experiment configs, runners, reports and the command-line interface."""

from .config import ExperimentConfig, config_from_dict, default_config, load_config
from .experiments import run_experiment

__all__ = ["ExperimentConfig", "config_from_dict", "default_config", "load_config", "run_experiment"]
