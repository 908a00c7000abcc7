"""Experiment harness: configs, runners, figure rendering, CLI."""

from .config import (
    ConfigError,
    DEFAULT_HESSIAN,
    ExperimentConfig,
    MetricTable,
    RunRecord,
    T_GRID,
    load_config,
    parse_arm,
    write_run,
)
from .experiments import (
    RUNNERS,
    alpha_ceiling,
    default_2d_task,
    run_closed_form,
    run_generalize_eval,
    run_nqm_meta_train,
    run_star_meta_train,
    run_stability_check,
    run_variance_sweep,
)
from .figures import render_figures

__all__ = [
    "ConfigError",
    "DEFAULT_HESSIAN",
    "ExperimentConfig",
    "MetricTable",
    "RunRecord",
    "T_GRID",
    "load_config",
    "parse_arm",
    "write_run",
    "RUNNERS",
    "alpha_ceiling",
    "default_2d_task",
    "run_closed_form",
    "run_generalize_eval",
    "run_nqm_meta_train",
    "run_star_meta_train",
    "run_stability_check",
    "run_variance_sweep",
    "render_figures",
]
