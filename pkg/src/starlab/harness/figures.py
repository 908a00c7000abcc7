"""Figure rendering for experiment runs.

Renders matplotlib PNGs next to the CSV output. Figures are a convenience
view of the emitted tables: they read only the RunRecord, so anything visible
in a figure is also present in a CSV.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .config import MetricTable, RunRecord

__all__ = ["render_figures"]


def _column(table: MetricTable, name: str) -> np.ndarray:
    idx = table.header.index(name)
    return np.array([row[idx] for row in table.rows])


def _strings(table: MetricTable, name: str) -> list[str]:
    idx = table.header.index(name)
    return [str(row[idx]) for row in table.rows]


def _save(fig, out_dir: Path, name: str, paths: list[Path]) -> None:
    path = out_dir / name
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)


def _fig_stability(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    table = record.tables["eigenvalues"]
    re = _column(table, "real")
    im = _column(table, "imag")
    fig, ax = plt.subplots(figsize=(5, 5))
    angles = np.linspace(0, 2 * np.pi, 256)
    ax.plot(np.cos(angles), np.sin(angles), color="gray", lw=1, label="unit circle")
    ax.scatter(re, im, color="crimson", zorder=3, label="eigenvalues of A")
    ax.axhline(0, color="lightgray", lw=0.5)
    ax.axvline(0, color="lightgray", lw=0.5)
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    verdict = record.reports["report"].get("empirical_verdict", "")
    certified = record.reports["report"].get("certified", "")
    ax.set_title(f"update-map spectrum (certified={certified}, {verdict})")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, out_dir, "fig_spectrum.png", paths)


def _fig_closed_form(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    table = record.tables["loss_vs_horizon"]
    mults = _column(table, "alpha_multiplier")
    horizons = _column(table, "horizon")
    losses = _column(table, "expected_loss")
    mc_mean = _column(table, "mc_mean")
    mc_err = _column(table, "mc_stderr")
    fig, ax = plt.subplots(figsize=(6, 4))
    for mult in sorted(set(mults)):
        mask = mults == mult
        ax.plot(horizons[mask], losses[mask], label=f"alpha mult {mult:g}")
        if np.isfinite(mc_mean[mask]).any():
            ax.errorbar(
                horizons[mask], mc_mean[mask], yerr=mc_err[mask],
                fmt=".", ms=3, lw=0.8, alpha=0.6,
            )
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("horizon T")
    ax.set_ylabel("expected mean loss")
    ax.set_title("closed form (lines) vs Monte Carlo (dots)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_dir, "fig_loss_vs_horizon.png", paths)


def _fig_variance(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    table = record.tables["variance"]
    alphas = _column(table, "alpha")
    horizons = _column(table, "horizon")
    traces = _column(table, "trace_variance")
    shown = [t for t in (1, 10, 50, 100, 1000) if t in set(horizons)]
    if not shown:
        shown = sorted(set(horizons))[:5]
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in shown:
        mask = horizons == t
        ax.plot(alphas[mask], traces[mask], label=f"T={int(t)}")
    ax.set_yscale("log")
    ax.set_xlabel("alpha")
    ax.set_ylabel("tr Var[meta-gradient]")
    ax.set_title("meta-gradient variance across the step-size range")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_dir, "fig_variance.png", paths)


def _curve_tables(record: RunRecord) -> dict[str, MetricTable]:
    return {n: t for n, t in record.tables.items() if n.startswith("curve_")}


def _fig_nqm_meta(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    curves = _curve_tables(record)
    arms = sorted({name.split("_seed")[0] for name in curves})
    fig, (ax_loss, ax_eig) = plt.subplots(1, 2, figsize=(11, 4))
    colors = plt.cm.viridis(np.linspace(0, 0.9, len(arms)))
    for color, arm in zip(colors, arms):
        arm_tables = [t for n, t in sorted(curves.items()) if n.startswith(arm + "_seed")]
        stack = np.stack([_column(t, "smoothed_loss") for t in arm_tables])
        steps = _column(arm_tables[0], "step")
        ax_loss.plot(steps, np.median(stack, axis=0), color=color, label=arm.removeprefix("curve_"))
        large = np.stack([_column(t, "eig_mag_large") for t in arm_tables])
        small = np.stack([_column(t, "eig_mag_small") for t in arm_tables])
        ax_eig.plot(steps, np.median(large, axis=0), color=color, ls=":")
        ax_eig.plot(steps, np.median(small, axis=0), color=color, ls="-")
    summary = record.tables["summary"]
    for oracle in _column(summary, "oracle_loss"):
        if np.isfinite(oracle):
            ax_loss.axhline(oracle, color="gray", lw=0.6, ls="--")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("meta-iteration")
    ax_loss.set_ylabel("smoothed meta-loss")
    ax_loss.set_title("meta-loss (dashed: descent-oracle optimum)")
    ax_loss.legend(fontsize=7)
    ax_eig.axhline(1.0, color="black", lw=0.8)
    ax_eig.set_xlabel("meta-iteration")
    ax_eig.set_ylabel("|eigenvalue| of A")
    ax_eig.set_title("dynamics spectrum (dotted: larger eigenvalue)")
    fig.tight_layout()
    _save(fig, out_dir, "fig_meta_train.png", paths)


def _fig_star_meta(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    curves = _curve_tables(record)
    arms = sorted({name.split("_seed")[0] for name in curves})
    fig, ax = plt.subplots(figsize=(6.5, 4))
    colors = plt.cm.tab10(np.linspace(0, 1, max(len(arms), 2)))
    for color, arm in zip(colors, arms):
        arm_tables = [t for n, t in sorted(curves.items()) if n.startswith(arm + "_seed")]
        stack = np.stack([_column(t, "smoothed_loss") for t in arm_tables])
        steps = _column(arm_tables[0], "step")
        for row in stack:
            ax.plot(steps, row, color=color, alpha=0.2, lw=0.7)
        ax.plot(steps, np.median(stack, axis=0), color=color, lw=1.8,
                label=arm.removeprefix("curve_"))
    ax.set_yscale("log")
    ax.set_xlabel("meta-iteration")
    ax.set_ylabel("smoothed meta-loss")
    ax.set_title("learned-optimizer meta-training (median over seeds)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_dir, "fig_meta_loss.png", paths)


def _fig_generalize(record: RunRecord, out_dir: Path, paths: list[Path]) -> None:
    curves = _curve_tables(record)
    summary = record.tables["summary"]
    tasks = sorted(set(_strings(summary, "task")))
    arm_labels = sorted(set(_strings(summary, "arm")))
    colors = dict(zip(arm_labels, plt.cm.tab10(np.linspace(0, 1, max(len(arm_labels), 2)))))
    n = len(tasks)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4), squeeze=False)
    for ax, task_name in zip(axes[0], tasks):
        for arm in arm_labels:
            prefix = f"curve_{task_name}_{arm}_seed"
            arm_tables = [t for name, t in sorted(curves.items()) if name.startswith(prefix)]
            for t in arm_tables:
                steps = _column(t, "step")
                if steps.size == 0:
                    continue
                ax.plot(steps, _column(t, "loss"), color=colors[arm], alpha=0.45, lw=0.8)
            ax.plot([], [], color=colors[arm], label=arm)
        ax.set_yscale("log")
        ax.set_title(task_name, fontsize=9)
        ax.set_xlabel("inner step")
    axes[0][0].set_ylabel("training loss")
    axes[0][0].legend(fontsize=7)
    fig.suptitle("trained optimizers across the generalization suite", fontsize=10)
    fig.tight_layout()
    _save(fig, out_dir, "fig_suite.png", paths)


_RENDERERS = {
    "stability-check": _fig_stability,
    "nqm-closed-form": _fig_closed_form,
    "variance-sweep": _fig_variance,
    "nqm-meta-train": _fig_nqm_meta,
    "star-meta-train": _fig_star_meta,
    "generalize-eval": _fig_generalize,
}


def render_figures(record: RunRecord, out_dir) -> list[Path]:
    """Render the experiment's figures into out_dir/figures."""
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    _RENDERERS[record.config.experiment](record, fig_dir, paths)
    return paths
