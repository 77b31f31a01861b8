"""Spatial class-probability heatmaps from unreliable crowdsourced reports."""

from .core import (
    ConfigError,
    GridSpec,
    ModelConfig,
    ReportError,
    ReportParseError,
    ReportSet,
    bin_reports,
    grid_points,
    load_config,
    read_report_file,
    write_report_file,
)
from .model import FitState, HeatmapGrid, fit, incremental_update, load_state, lower_bound, predict, save_state

__all__ = [
    "ConfigError",
    "FitState",
    "GridSpec",
    "HeatmapGrid",
    "ModelConfig",
    "ReportError",
    "ReportParseError",
    "ReportSet",
    "bin_reports",
    "fit",
    "grid_points",
    "incremental_update",
    "load_config",
    "load_state",
    "lower_bound",
    "predict",
    "read_report_file",
    "save_state",
    "write_report_file",
]

__version__ = "0.1.0"
