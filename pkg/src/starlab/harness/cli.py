"""Command-line entry points.

One subcommand per experiment. Every subcommand accepts the same flags and
follows the same exit-code contract: 0 success, 2 configuration problem,
3 the run itself succeeded but every arm diverged.
"""

from __future__ import annotations

import dataclasses
import sys
import time
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, load_config, write_run
from .experiments import RUNNERS
from .figures import render_figures


def _common_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON experiment config; defaults are used when omitted."),
        click.option("--seed", type=int, default=None, help="Override the config seed."),
        click.option("--out", "out_dir", type=click.Path(), default=None,
                     help="Output directory (default runs/<experiment>-seed<seed>)."),
        click.option("--threads", type=int, default=1, show_default=True,
                     help="Worker threads; results are identical for any value."),
        click.option("--no-figures", is_flag=True, default=False,
                     help="Skip figure rendering, emit only CSV/JSON."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _execute(experiment: str, config_path, seed, out_dir, threads, no_figures) -> None:
    try:
        if threads is None or threads < 1:
            raise ConfigError("--threads must be at least 1")
        if config_path is not None:
            cfg = load_config(config_path)
            if cfg.experiment != experiment:
                raise ConfigError(
                    f"config is for {cfg.experiment!r}, invoked as {experiment!r}"
                )
        else:
            cfg = ExperimentConfig(experiment=experiment)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
        resolved_out = (
            Path(cfg.out_dir)
            if cfg.out_dir
            else Path("runs") / f"{experiment}-seed{cfg.seed}"
        )
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)

    started = time.perf_counter()
    try:
        record = RUNNERS[experiment](cfg, threads=threads)
    except ValueError as exc:
        # Certificate assumption violations and malformed inputs surface as
        # ValueError from the library; for a config-driven run they mean the
        # config asked for something the math refuses.
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    record.wall_clock_s = time.perf_counter() - started

    write_run(record, resolved_out, threads)
    if not no_figures:
        render_figures(record, resolved_out)
    click.echo(f"wrote {resolved_out}")
    if record.all_diverged:
        click.echo("every arm diverged; outputs carry the divergence records", err=True)
        sys.exit(3)


@click.group()
def main() -> None:
    """Stability certificates, quadratic-model studies, and learned-optimizer
    meta-training at desk scale."""


@main.command("stability-check")
@_common_options
def stability_check(**kwargs) -> None:
    """Evaluate a stability certificate and emit the spectrum."""
    _execute("stability-check", **kwargs)


@main.command("nqm-closed-form")
@_common_options
def nqm_closed_form(**kwargs) -> None:
    """Closed-form expected-loss curves with a Monte Carlo cross-check."""
    _execute("nqm-closed-form", **kwargs)


@main.command("variance-sweep")
@_common_options
def variance_sweep(**kwargs) -> None:
    """Meta-gradient variance over the step-size grid and horizon grid."""
    _execute("variance-sweep", **kwargs)


@main.command("nqm-meta-train")
@_common_options
def nqm_meta_train(**kwargs) -> None:
    """ES meta-training of the linear optimizer on the quadratic benchmark."""
    _execute("nqm-meta-train", **kwargs)


@main.command("star-meta-train")
@_common_options
def star_meta_train(**kwargs) -> None:
    """Persistent-ES meta-training of the learned-optimizer arms."""
    _execute("star-meta-train", **kwargs)


@main.command("generalize-eval")
@_common_options
def generalize_eval(**kwargs) -> None:
    """Run trained optimizer checkpoints across the generalization suite."""
    _execute("generalize-eval", **kwargs)


if __name__ == "__main__":
    main()
