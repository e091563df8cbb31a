"""Configuration, persistence, experiment runs and report emission."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .experiment import ExperimentReport, ReportRow, run_experiment
from .report import emit_report

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "ReportRow",
    "dump_config",
    "emit_report",
    "load_checkpoint",
    "load_config",
    "run_experiment",
    "save_checkpoint",
]
