"""Experiment orchestration: configs, recipes, run registry, reports and the CLI."""
from .config import ExperimentGrid, RunConfig, config_hash, load_config, parse_config
from .experiments import run_convergence_experiment, run_ldp_experiment
from .registry import RunRecord
from .report import emit_report

__all__ = [
    "ExperimentGrid",
    "RunConfig",
    "config_hash",
    "load_config",
    "parse_config",
    "run_convergence_experiment",
    "run_ldp_experiment",
    "RunRecord",
    "emit_report",
]
