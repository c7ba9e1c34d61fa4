"""Experiment orchestration: config parsing, the staged pipeline and report emission."""
from .config import ConfigError, ExperimentConfig, config_from_dict, dump_config, parse_config
from .pipeline import STAGE_NAMES, STAGES, Pipeline, StageError, run_experiment
from .report import FIGURES, ReportMetrics, emit_report

__all__ = [
    "ConfigError", "ExperimentConfig", "FIGURES", "Pipeline", "ReportMetrics", "STAGES",
    "STAGE_NAMES", "StageError", "config_from_dict", "dump_config", "emit_report",
    "parse_config", "run_experiment",
]
