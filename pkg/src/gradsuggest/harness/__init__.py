"""Experimental protocols, budget sweeps and reporting."""

from .config import ExperimentConfig, load_config, parse_config_text
from .protocol import (
    ExperimentContext,
    RoundReport,
    build_datasets,
    evaluate_dice,
    prepare,
    run_branches,
    run_experiment,
    run_round,
)
from .report import CSV_COLUMNS, emit_report, read_csv, render_svg, summarize, write_csv

__all__ = [
    "CSV_COLUMNS",
    "ExperimentConfig",
    "ExperimentContext",
    "RoundReport",
    "build_datasets",
    "emit_report",
    "evaluate_dice",
    "load_config",
    "parse_config_text",
    "prepare",
    "read_csv",
    "render_svg",
    "run_branches",
    "run_experiment",
    "run_round",
    "summarize",
    "write_csv",
]
