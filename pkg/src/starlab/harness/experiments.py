"""Experiment runners: each takes a resolved config and returns a RunRecord.

Runners never touch the filesystem or the clock; the CLI layer owns both.
Seeds for individual runs are derived from the config seed and stable string
labels, so adding an arm or reordering loops cannot silently reseed others.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import rng
from ..inner_opt import NominalConfig
from ..meta_es import MetaConfig, NqmFamily, TrainingRecord, meta_train
from ..nqm import (
    LinearOptimizerSpec,
    QuadraticTask,
    expected_loss,
    gradient_variance_profile,
    mc_expected_loss,
    minimize_expected_loss,
)
from ..stability import (
    RobustBoundSpec,
    certify_nominal,
    certify_preconditioned,
    certify_robust,
)
from ..star import FeatureConfig, load_params, params_from_flat
from ..tasks import default_meta_task, generalization_suite
from ..unroll import OptimizerArm, evaluate_training
from .config import (
    ConfigError,
    ExperimentConfig,
    GeneralizeEvalParams,
    MetricTable,
    RunRecord,
    parse_arm,
)

__all__ = [
    "default_2d_task",
    "alpha_ceiling",
    "run_stability_check",
    "run_closed_form",
    "run_variance_sweep",
    "run_nqm_meta_train",
    "run_star_meta_train",
    "run_generalize_eval",
    "RUNNERS",
]


def default_2d_task(hessian=None) -> QuadraticTask:
    """The 2-D quadratic benchmark: unit noise, zero-mean start, 10 I spread."""
    h = np.array(hessian if hessian is not None else ((1.11, 0.596), (0.596, 0.486)), dtype=float)
    dim = h.shape[0]
    return QuadraticTask(
        dim=dim,
        hessian=h,
        noise_cov=np.eye(dim),
        init_mean=np.zeros(dim),
        init_cov=10.0 * np.eye(dim),
    )


def alpha_ceiling(task: QuadraticTask) -> float:
    """Largest stable plain-SGD step size, 2 / lambda_max(H)."""
    return 2.0 / float(np.linalg.eigvalsh(task.hessian)[-1])


def _mult_label(mult: float) -> str:
    return repr(float(mult))


def default_features() -> FeatureConfig:
    return FeatureConfig(nominal=NominalConfig())


# ---------------------------------------------------------------------------
# stability-check


def run_stability_check(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    p = cfg.params
    hessian = np.array(p.hessian, dtype=float)
    dim = hessian.shape[0]
    task = QuadraticTask(
        dim=dim,
        hessian=hessian,
        noise_cov=np.eye(dim),
        init_mean=np.zeros(dim),
        init_cov=np.eye(dim),
    )
    precond = np.zeros((dim, dim)) if p.precond is None else np.array(p.precond, dtype=float)
    if p.certificate == "nominal":
        report = certify_nominal(task, LinearOptimizerSpec(alpha=p.alpha, precond_matrix=precond))
    elif p.certificate == "preconditioned":
        report = certify_preconditioned(
            task,
            LinearOptimizerSpec(alpha=p.alpha, precond_matrix=precond, preconditioned=True),
        )
    else:
        robust = RobustBoundSpec(base_precond=precond, upper_gains=np.array(p.upper_gains))
        report = certify_robust(task, robust, p.alpha)
    record = RunRecord(config=cfg)
    record.reports["report"] = report.to_dict()
    table = record.add_table(
        "eigenvalues", ("step", "real", "imag", "magnitude")
    )
    for i, eig in enumerate(report.eigenvalues):
        eig = complex(eig)
        table.rows.append((i, float(eig.real), float(eig.imag), float(abs(eig))))
    return record


# ---------------------------------------------------------------------------
# nqm-closed-form


def run_closed_form(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    p = cfg.params
    task = default_2d_task()
    scale = alpha_ceiling(task)
    record = RunRecord(config=cfg)
    table = record.add_table(
        "loss_vs_horizon",
        (
            "step", "alpha_multiplier", "alpha", "horizon", "expected_loss",
            "mc_mean", "mc_stderr", "mc_divergence_fraction",
        ),
    )
    step = 0
    any_finite = False
    zeros = np.zeros((task.dim, task.dim))
    for mult in p.alpha_multipliers:
        alpha = mult * scale
        spec = LinearOptimizerSpec(alpha=alpha, precond_matrix=zeros)
        for horizon in p.t_grid:
            loss = expected_loss(task, spec, horizon)
            any_finite = any_finite or np.isfinite(loss)
            if p.mc_seeds:
                est = mc_expected_loss(
                    task, spec, horizon, p.mc_seeds,
                    rng.derive_seed(cfg.seed, "closed-form-mc", _mult_label(mult), horizon),
                )
                mc_mean, mc_stderr, mc_div = est.mean, est.stderr, est.divergence_fraction
            else:
                mc_mean = mc_stderr = mc_div = float("nan")
            table.rows.append((step, mult, alpha, horizon, loss, mc_mean, mc_stderr, mc_div))
            step += 1
    record.all_diverged = not any_finite
    return record


# ---------------------------------------------------------------------------
# variance-sweep


def run_variance_sweep(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    p = cfg.params
    task = default_2d_task()
    scale = alpha_ceiling(task)
    alphas = np.linspace(0.0, p.alpha_max_multiplier * scale, p.n_alphas)
    horizons = list(p.t_grid)
    seed = rng.derive_seed(cfg.seed, "variance-sweep")
    zeros = np.zeros((task.dim, task.dim))

    def _one(alpha: float):
        spec = LinearOptimizerSpec(alpha=float(alpha), precond_matrix=zeros)
        return gradient_variance_profile(task, spec, horizons, p.n_seeds, seed, p.fd_step)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            profiles = list(pool.map(_one, alphas))
    else:
        profiles = [_one(a) for a in alphas]

    record = RunRecord(config=cfg)
    table = record.add_table(
        "variance",
        ("step", "alpha", "alpha_multiplier", "horizon", "trace_variance",
         "divergence_fraction", "n_used"),
    )
    step = 0
    for alpha, profile in zip(alphas, profiles):
        for horizon, est in zip(horizons, profile):
            table.rows.append(
                (
                    step, float(alpha), float(alpha / scale), horizon,
                    est.trace, est.divergence_fraction, est.n_used,
                )
            )
            step += 1
    record.divergence_counts["diverged_points"] = sum(
        1 for row in table.rows if row[5] > 0
    )
    record.all_diverged = all(row[6] < 2 for row in table.rows)
    return record


# ---------------------------------------------------------------------------
# nqm-meta-train


def _training_curve_rows(rec: TrainingRecord, with_eigs: bool):
    rows = []
    for row in rec.rows:
        base = (
            row.step, row.raw_loss, row.smoothed_loss, row.grad_norm,
            row.n_dropped, row.skipped,
        )
        if with_eigs:
            base = base + tuple(row.eig_mags)
        rows.append(base)
    return rows


def run_nqm_meta_train(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    p = cfg.params
    task = default_2d_task()
    scale = alpha_ceiling(task)
    meta_cfg = MetaConfig(
        sigma=p.sigma,
        truncation=p.horizon,
        horizon=p.horizon,
        n_pairs=p.n_pairs,
        meta_lr=p.meta_lr,
        weight_decay=0.0,
        grad_clip=p.grad_clip,
        meta_steps=p.meta_steps,
        ema=p.ema,
        checkpoint_every=p.checkpoint_every,
    )
    record = RunRecord(config=cfg)
    summary = record.add_table(
        "summary",
        ("step", "arm", "alpha", "oracle_loss", "median_final_smoothed",
         "min_final_smoothed", "total_dropped", "skipped_steps"),
    )
    header = (
        "step", "raw_loss", "smoothed_loss", "grad_norm", "dropped", "skipped",
        "eig_mag_large", "eig_mag_small",
    )
    all_skipped = True
    for idx, mult in enumerate(p.alpha_multipliers):
        label = _mult_label(mult)
        alpha = mult * scale
        family = NqmFamily(task=task, alpha=alpha)
        finals = []
        dropped = 0
        skipped = 0
        for si in range(p.n_seeds):
            rec = meta_train(
                family, "linear_nqm", meta_cfg,
                rng.derive_seed(cfg.seed, "nqm-arm", label, si),
            )
            table = record.add_table(f"curve_mult{label}_seed{si}", header)
            table.rows.extend(_training_curve_rows(rec, with_eigs=True))
            finals.append(rec.final_smoothed_loss)
            dropped += rec.total_dropped
            skipped += rec.skipped_steps
            all_skipped = all_skipped and rec.skipped_steps == len(rec.rows)
        _, oracle_loss = minimize_expected_loss(task, alpha, p.horizon, iters=p.oracle_iters)
        summary.rows.append(
            (
                idx, f"mult{label}", alpha, oracle_loss,
                float(np.median(finals)), float(np.min(finals)), dropped, skipped,
            )
        )
        record.divergence_counts[f"mult{label}_dropped_pairs"] = dropped
    record.all_diverged = all_skipped
    return record


# ---------------------------------------------------------------------------
# star-meta-train


def run_star_meta_train(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    p = cfg.params
    task = default_meta_task()
    features = default_features()
    record = RunRecord(config=cfg)
    summary = record.add_table(
        "summary",
        ("step", "arm", "kind", "weight_decay", "median_final_smoothed",
         "total_dropped", "skipped_steps"),
    )
    header = ("step", "raw_loss", "smoothed_loss", "grad_norm", "dropped", "skipped")
    all_skipped = True
    for idx, arm_label in enumerate(p.arms):
        kind, wd = parse_arm(arm_label)
        meta_cfg = MetaConfig(
            sigma=p.sigma,
            truncation=p.truncation,
            horizon=p.horizon,
            n_pairs=p.n_pairs,
            meta_lr=p.meta_lr,
            weight_decay=wd,
            grad_clip=p.grad_clip,
            meta_steps=p.meta_steps,
            ema=p.ema,
            checkpoint_every=p.checkpoint_every,
        )
        finals = []
        dropped = 0
        skipped = 0
        for si in range(p.n_seeds):
            run_seed = rng.derive_seed(cfg.seed, "star-arm", arm_label, si)
            rec = meta_train(
                task, kind, meta_cfg, run_seed, features=features, threads=threads
            )
            table = record.add_table(f"curve_{arm_label}_seed{si}", header)
            table.rows.extend(_training_curve_rows(rec, with_eigs=False))
            finals.append(rec.final_smoothed_loss)
            dropped += rec.total_dropped
            skipped += rec.skipped_steps
            all_skipped = all_skipped and rec.skipped_steps == len(rec.rows)
            template = OptimizerArm.build(kind, features, run_seed).template
            for ckpt_step, theta in rec.checkpoints:
                params = params_from_flat(template, theta)
                record.star_checkpoints[f"{arm_label}_seed{si}_step{ckpt_step}"] = params
            assert rec.theta_final is not None
            record.star_checkpoints[f"{arm_label}_seed{si}_final"] = params_from_flat(
                template, rec.theta_final
            )
        summary.rows.append(
            (idx, arm_label, kind, wd, float(np.median(finals)), dropped, skipped)
        )
        record.divergence_counts[f"{arm_label}_dropped_pairs"] = dropped
    record.all_diverged = all_skipped
    return record


# ---------------------------------------------------------------------------
# generalize-eval


def run_generalize_eval(cfg: ExperimentConfig, threads: int = 1) -> RunRecord:
    from pathlib import Path

    p: GeneralizeEvalParams = cfg.params
    if not p.source_run:
        raise ConfigError("generalize-eval needs source_run")
    ckpt_dir = Path(p.source_run) / "checkpoints"
    if not ckpt_dir.is_dir():
        raise ConfigError(f"no checkpoints directory under {p.source_run}")
    features = default_features()
    suite = generalization_suite(p.meta_horizon)

    arms: dict[str, list[OptimizerArm]] = {}
    for arm_label in p.arms:
        kind, _wd = parse_arm(arm_label)
        per_seed = []
        for si in range(p.n_seeds):
            path = ckpt_dir / f"{arm_label}_seed{si}_final.json"
            if not path.is_file():
                raise ConfigError(f"missing checkpoint: {path}")
            try:
                params = load_params(path, features)
            except ValueError as exc:
                raise ConfigError(f"cannot load {path}: {exc}") from exc
            if params.kind != kind:
                raise ConfigError(
                    f"checkpoint {path} holds kind {params.kind!r}, arm wants {kind!r}"
                )
            per_seed.append(OptimizerArm(kind=kind, features=features, template=params))
        arms[arm_label] = per_seed

    jobs = []
    for entry in suite:
        for arm_label in p.arms:
            for si in range(p.n_seeds):
                jobs.append((entry, arm_label, si))

    def _one(job):
        entry, arm_label, si = job
        horizon = entry.horizon * p.horizon_multiplier
        return evaluate_training(
            entry.task,
            arms[arm_label][si],
            None,
            horizon,
            rng.derive_seed(cfg.seed, "suite-eval", entry.name, arm_label, si),
            record_every=p.record_every,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(job) for job in jobs]

    record = RunRecord(config=cfg)
    summary = record.add_table(
        "summary",
        ("step", "task", "arm", "seed", "horizon", "steps_completed",
         "final_loss", "diverged"),
    )
    aggregate = record.add_table(
        "aggregate",
        ("step", "task", "arm", "divergence_fraction", "median_final_loss"),
    )
    by_task_arm: dict[tuple[str, str], list] = {}
    n_diverged = 0
    for idx, (job, res) in enumerate(zip(jobs, results)):
        entry, arm_label, si = job
        curve = record.add_table(
            f"curve_{entry.name}_{arm_label}_seed{si}", ("step", "loss", "diverged")
        )
        for s, loss in zip(res.steps, res.losses):
            curve.rows.append((int(s), float(loss), res.diverged))
        final = res.final_loss if not res.diverged else float("inf")
        summary.rows.append(
            (
                idx, entry.name, arm_label, si, res.horizon,
                res.steps_completed, final, res.diverged,
            )
        )
        by_task_arm.setdefault((entry.name, arm_label), []).append((res.diverged, final))
        n_diverged += int(res.diverged)
        count = record.divergence_counts.get(arm_label, 0)
        record.divergence_counts[arm_label] = count + int(res.diverged)
    for idx, ((task_name, arm_label), outcomes) in enumerate(sorted(by_task_arm.items())):
        div = float(np.mean([d for d, _f in outcomes]))
        finals = [f for _d, f in outcomes]
        aggregate.rows.append((idx, task_name, arm_label, div, float(np.median(finals))))
    record.all_diverged = n_diverged == len(jobs)
    return record


RUNNERS = {
    "stability-check": run_stability_check,
    "nqm-closed-form": run_closed_form,
    "variance-sweep": run_variance_sweep,
    "nqm-meta-train": run_nqm_meta_train,
    "star-meta-train": run_star_meta_train,
    "generalize-eval": run_generalize_eval,
}
