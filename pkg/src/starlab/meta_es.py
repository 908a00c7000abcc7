"""Meta-training loop: antithetic ES gradients, persistent ES over truncated
unrolls, and a clipped AdamW-style meta-optimizer.

Conventions shared by every estimator here:
  - a pair means one perturbation vector driving a +eps and a -eps evaluation;
  - evaluations that come back non-finite drop the whole pair from the
    estimate and are counted, never propagated;
  - all randomness is drawn from counter-based streams keyed on the caller's
    seed, so serial and threaded runs produce bitwise-identical numbers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import rng
from .inner_opt import NominalConfig
from .nqm import LinearOptimizerSpec, QuadraticTask, build_dynamics, expected_loss
from .star import FeatureConfig, params_to_flat
from .tasks import InnerTask
from .unroll import LoopState, OptimizerArm, init_loop, run_segment

__all__ = [
    "AllDivergedError",
    "DesyncError",
    "MetaConfig",
    "EsEstimate",
    "es_gradient",
    "PesParticle",
    "PesStepResult",
    "init_particles",
    "pes_gradient_step",
    "MetaOptState",
    "meta_step",
    "NqmFamily",
    "MetaStepRow",
    "TrainingRecord",
    "meta_train",
    "ema_smooth",
]


class AllDivergedError(RuntimeError):
    """Every antithetic pair of an ES step produced a non-finite loss."""


class DesyncError(RuntimeError):
    """PES particles disagree about their position within the episode."""


@dataclass(frozen=True)
class MetaConfig:
    """Knobs of the outer optimization loop.

    horizon is the total inner-step budget T of one episode and must be a
    multiple of truncation; segment losses are weighted 1/horizon so the
    episode meta-loss is the mean per-step training loss. weight_decay is the
    multiplier on meta_lr for decoupled decay of the update-MLP weights.
    """

    sigma: float = 0.01
    truncation: int = 50
    horizon: int = 2000
    n_pairs: int = 8
    meta_lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    meta_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema: float = 0.98
    checkpoint_every: int = 100

    def __post_init__(self) -> None:
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive")
        if self.truncation < 1 or self.horizon < self.truncation:
            raise ValueError("need 1 <= truncation <= horizon")
        if self.horizon % self.truncation != 0:
            raise ValueError("horizon must be divisible by truncation")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be at least 1")
        if not (self.meta_lr > 0 and np.isfinite(self.meta_lr)):
            raise ValueError("meta_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (self.grad_clip > 0):
            raise ValueError("grad_clip must be positive")
        if self.meta_steps < 1:
            raise ValueError("meta_steps must be at least 1")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")

    @property
    def segments_per_episode(self) -> int:
        return self.horizon // self.truncation


# ---------------------------------------------------------------------------
# plain antithetic ES


@dataclass(frozen=True)
class EsEstimate:
    gradient: np.ndarray
    mean_loss: float
    n_used: int
    n_dropped: int


def es_gradient(
    objective: Callable[[np.ndarray], float],
    theta: np.ndarray,
    sigma: float,
    n_pairs: int,
    seed: int,
) -> EsEstimate:
    """Antithetic evolution-strategies gradient estimate.

    grad = (1 / (2 sigma^2 n)) sum_i eps_i (f(theta + eps_i) - f(theta -
    eps_i)) with eps_i ~ N(0, sigma^2 I); n counts the pairs whose both
    evaluations were finite. mean_loss averages (f+ + f-)/2 over those pairs.
    """
    theta = np.asarray(theta, dtype=float)
    eps = sigma * rng.stream(seed, "es-perturb").standard_normal((n_pairs, theta.size))
    grad = np.zeros_like(theta)
    used = 0
    dropped = 0
    loss_sum = 0.0
    for i in range(n_pairs):
        up = float(objective(theta + eps[i]))
        down = float(objective(theta - eps[i]))
        if not (np.isfinite(up) and np.isfinite(down)):
            dropped += 1
            continue
        grad += eps[i] * (up - down)
        loss_sum += 0.5 * (up + down)
        used += 1
    if used == 0:
        raise AllDivergedError("all antithetic pairs diverged")
    grad /= 2.0 * sigma**2 * used
    return EsEstimate(gradient=grad, mean_loss=loss_sum / used, n_used=used, n_dropped=dropped)


# ---------------------------------------------------------------------------
# persistent ES over truncated unrolls


@dataclass
class PesParticle:
    """One antithetic pair's persistent state across truncation segments.

    accumulator sums every perturbation applied since the episode started;
    pos/neg are the opaque unroll payloads of the two perturbed trajectories.
    """

    accumulator: np.ndarray
    pos: Any
    neg: Any
    episode: int = 0
    segment: int = 0

    def check_sync(self) -> None:
        # Only meaningful when the payloads expose inner step counters; a
        # diverged side legitimately freezes, so it is exempt.
        pos, neg = self.pos, self.neg
        if isinstance(pos, LoopState) and isinstance(neg, LoopState):
            if not pos.diverged and not neg.diverged and pos.inner.step != neg.inner.step:
                raise DesyncError(
                    f"pair siblings at inner steps {pos.inner.step} != {neg.inner.step}"
                )


ReinitFn = Callable[[int, int], Any]
SegmentFn = Callable[[np.ndarray, Any, int, int], float]


def init_particles(n_pairs: int, dim: int, reinit: ReinitFn) -> list[PesParticle]:
    """Independent pos/neg payloads per pair, all at episode 0, segment 0."""
    return [
        PesParticle(accumulator=np.zeros(dim), pos=reinit(i, 0), neg=reinit(i, 0))
        for i in range(n_pairs)
    ]


@dataclass(frozen=True)
class PesStepResult:
    gradient: np.ndarray | None
    mean_loss: float
    n_used: int
    n_dropped: int


def pes_gradient_step(
    particles: Sequence[PesParticle],
    theta: np.ndarray,
    segment_unroll: SegmentFn,
    sigma: float,
    seed: int,
    segments_per_episode: int,
    reinit: ReinitFn,
    threads: int = 1,
) -> PesStepResult:
    """One persistent-ES step: unroll every pair a segment, update particles.

    segment_unroll(theta_vec, payload, pair, episode) advances a payload one
    truncation segment and returns its accumulated (weighted) segment loss.
    Fresh perturbations enter the accumulators before the estimate is formed;
    episode boundaries reset accumulators and rebuild payloads through
    reinit(pair, episode). Particle bookkeeping advances even on an
    all-dropped step (gradient None), otherwise diverged payloads would never
    reach their episode reset.
    """
    offsets = {(p.episode, p.segment) for p in particles}
    if len(offsets) != 1:
        raise DesyncError(f"particles at mixed episode offsets: {sorted(offsets)}")
    for particle in particles:
        particle.check_sync()
    theta = np.asarray(theta, dtype=float)
    n = len(particles)
    eps = sigma * rng.stream(seed, "pes-perturb").standard_normal((n, theta.size))

    losses = np.empty((n, 2))

    def _run(job: tuple[int, int]) -> float:
        i, side = job
        particle = particles[i]
        payload = particle.pos if side == 0 else particle.neg
        sign = 1.0 if side == 0 else -1.0
        return segment_unroll(theta + sign * eps[i], payload, i, particle.episode)

    jobs = [(i, side) for i in range(n) for side in (0, 1)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(job) for job in jobs]
    for (i, side), value in zip(jobs, results):
        losses[i, side] = value

    grad = np.zeros_like(theta)
    used = 0
    dropped = 0
    loss_sum = 0.0
    for i, particle in enumerate(particles):
        particle.accumulator += eps[i]
        up, down = losses[i]
        if np.isfinite(up) and np.isfinite(down):
            grad += particle.accumulator * (up - down)
            loss_sum += 0.5 * (up + down)
            used += 1
        else:
            dropped += 1
    for i, particle in enumerate(particles):
        particle.segment += 1
        if particle.segment == segments_per_episode:
            particle.episode += 1
            particle.segment = 0
            particle.accumulator[:] = 0.0
            particle.pos = reinit(i, particle.episode)
            particle.neg = reinit(i, particle.episode)
    if used == 0:
        return PesStepResult(gradient=None, mean_loss=float("inf"), n_used=0, n_dropped=dropped)
    return PesStepResult(
        gradient=grad / (2.0 * sigma**2 * used),
        mean_loss=loss_sum / used,
        n_used=used,
        n_dropped=dropped,
    )


# ---------------------------------------------------------------------------
# meta-optimizer


@dataclass(frozen=True)
class MetaOptState:
    """Adam moments plus counters; skipped tallies rejected gradients."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @staticmethod
    def zeros(dim: int) -> "MetaOptState":
        return MetaOptState(m=np.zeros(dim), v=np.zeros(dim))


def clip_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale grad to global L2 norm max_norm when it exceeds it."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def meta_step(
    theta: np.ndarray,
    grad_estimate: np.ndarray | None,
    opt_state: MetaOptState,
    cfg: MetaConfig,
    decay_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, MetaOptState]:
    """Clip, Adam with bias correction, then decoupled weight decay.

    theta' = theta - lr m_hat/(sqrt(v_hat)+eps) - lr wd (mask * theta); the
    mask restricts decay to the update-MLP weight subset and both terms use
    the pre-update theta. A None or non-finite gradient estimate skips the
    step entirely and is counted in the returned state.
    """
    if grad_estimate is None or not np.isfinite(grad_estimate).all():
        return theta, replace(opt_state, skipped=opt_state.skipped + 1)
    grad, _ = clip_global_norm(np.asarray(grad_estimate, dtype=float), cfg.grad_clip)
    step = opt_state.step + 1
    m = cfg.adam_beta1 * opt_state.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * opt_state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1**step)
    v_hat = v / (1.0 - cfg.adam_beta2**step)
    new_theta = theta - cfg.meta_lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    if cfg.weight_decay > 0.0:
        decayed = theta if decay_mask is None else decay_mask * theta
        new_theta = new_theta - cfg.meta_lr * cfg.weight_decay * decayed
    return new_theta, MetaOptState(m=m, v=v, step=step, skipped=opt_state.skipped)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class NqmFamily:
    """Quadratic task family whose optimizer is the linear rule alpha I + P."""

    task: QuadraticTask
    alpha: float
    preconditioned: bool = False


@dataclass(frozen=True)
class MetaStepRow:
    step: int
    raw_loss: float
    smoothed_loss: float
    grad_norm: float
    n_dropped: int
    skipped: bool
    eig_mags: tuple[float, ...] | None = None


@dataclass
class TrainingRecord:
    """Everything one meta-training run produced."""

    kind: str
    seed: int
    theta_init: np.ndarray
    rows: list[MetaStepRow] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)
    theta_final: np.ndarray | None = None

    @property
    def total_dropped(self) -> int:
        return sum(row.n_dropped for row in self.rows)

    @property
    def skipped_steps(self) -> int:
        return sum(1 for row in self.rows if row.skipped)

    @property
    def final_smoothed_loss(self) -> float:
        return self.rows[-1].smoothed_loss if self.rows else float("nan")


def ema_smooth(series, coefficient: float) -> np.ndarray:
    """Exponential smoothing y_t = c y_{t-1} + (1-c) x_t with y_0 = x_0."""
    if not 0.0 <= coefficient < 1.0:
        raise ValueError("coefficient must lie in [0, 1)")
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot smooth an empty series")
    out = np.empty_like(arr)
    out[0] = arr[0]
    for i in range(1, arr.size):
        out[i] = coefficient * out[i - 1] + (1.0 - coefficient) * arr[i]
    return out


class _Smoother:
    """EMA that seeds on the first finite value and ignores non-finite ones."""

    def __init__(self, coefficient: float) -> None:
        self.coefficient = coefficient
        self.value = float("nan")

    def update(self, x: float) -> float:
        if np.isfinite(x):
            if np.isnan(self.value):
                self.value = x
            else:
                self.value = self.coefficient * self.value + (1.0 - self.coefficient) * x
        return self.value


def _eig_magnitudes(task: QuadraticTask, spec: LinearOptimizerSpec) -> tuple[float, ...]:
    eigs = np.linalg.eigvals(build_dynamics(task, spec).transition)
    return tuple(sorted(np.abs(eigs), reverse=True))


def _train_linear(family: NqmFamily, cfg: MetaConfig, seed: int, p0) -> TrainingRecord:
    dim = family.task.dim
    theta = np.zeros(dim * dim) if p0 is None else np.asarray(p0, dtype=float).reshape(-1).copy()
    if theta.size != dim * dim:
        raise ValueError("p0 must match the task dimension")

    def objective(flat: np.ndarray) -> float:
        spec = LinearOptimizerSpec(
            alpha=family.alpha,
            precond_matrix=flat.reshape(dim, dim),
            preconditioned=family.preconditioned,
        )
        return expected_loss(family.task, spec, cfg.horizon)

    record = TrainingRecord(kind="linear_nqm", seed=seed, theta_init=theta.copy())
    record.checkpoints.append((0, theta.copy()))
    opt = MetaOptState.zeros(theta.size)
    smoother = _Smoother(cfg.ema)
    for step in range(1, cfg.meta_steps + 1):
        try:
            est = es_gradient(objective, theta, cfg.sigma, cfg.n_pairs, rng.derive_seed(seed, "es", step))
            grad, raw = est.gradient, est.mean_loss
            dropped, skipped = est.n_dropped, False
            grad_norm = float(np.linalg.norm(grad))
        except AllDivergedError:
            grad, raw = None, float("inf")
            dropped, skipped = cfg.n_pairs, True
            grad_norm = float("nan")
        theta, opt = meta_step(theta, grad, opt, cfg)
        spec = LinearOptimizerSpec(
            alpha=family.alpha,
            precond_matrix=theta.reshape(dim, dim),
            preconditioned=family.preconditioned,
        )
        record.rows.append(
            MetaStepRow(
                step=step,
                raw_loss=raw,
                smoothed_loss=smoother.update(raw),
                grad_norm=grad_norm,
                n_dropped=dropped,
                skipped=skipped,
                eig_mags=_eig_magnitudes(family.task, spec),
            )
        )
        if step % cfg.checkpoint_every == 0:
            record.checkpoints.append((step, theta.copy()))
    if record.checkpoints[-1][0] != cfg.meta_steps:
        record.checkpoints.append((cfg.meta_steps, theta.copy()))
    record.theta_final = theta
    return record


def _train_unrolled(
    task: InnerTask,
    kind: str,
    cfg: MetaConfig,
    seed: int,
    features: FeatureConfig,
    threads: int,
) -> TrainingRecord:
    arm = OptimizerArm.build(kind, features, seed)
    assert arm.template is not None
    theta = params_to_flat(arm.template)
    decay_mask = np.ones(theta.size)
    if arm.template.gate_learnable:
        decay_mask[-1] = 0.0  # the nominal-path gate constant never decays

    def reinit(pair: int, episode: int) -> LoopState:
        return init_loop(task, arm, rng.derive_seed(seed, "episode", pair, episode))

    def segment(theta_vec: np.ndarray, loop: LoopState, pair: int, episode: int) -> float:
        return run_segment(
            task,
            arm,
            theta_vec,
            loop,
            cfg.truncation,
            1.0 / cfg.horizon,
            (seed, "batch", pair, episode),
        )

    particles = init_particles(cfg.n_pairs, theta.size, reinit)
    record = TrainingRecord(kind=kind, seed=seed, theta_init=theta.copy())
    record.checkpoints.append((0, theta.copy()))
    opt = MetaOptState.zeros(theta.size)
    smoother = _Smoother(cfg.ema)
    scale = cfg.horizon / cfg.truncation  # segment losses back to per-step means
    for step in range(1, cfg.meta_steps + 1):
        result = pes_gradient_step(
            particles,
            theta,
            segment,
            cfg.sigma,
            rng.derive_seed(seed, "pes", step),
            cfg.segments_per_episode,
            reinit,
            threads=threads,
        )
        raw = result.mean_loss * scale if result.n_used else float("inf")
        grad_norm = (
            float(np.linalg.norm(result.gradient)) if result.gradient is not None else float("nan")
        )
        theta, opt = meta_step(theta, result.gradient, opt, cfg, decay_mask)
        record.rows.append(
            MetaStepRow(
                step=step,
                raw_loss=raw,
                smoothed_loss=smoother.update(raw),
                grad_norm=grad_norm,
                n_dropped=result.n_dropped,
                skipped=result.gradient is None,
            )
        )
        if step % cfg.checkpoint_every == 0:
            record.checkpoints.append((step, theta.copy()))
    if record.checkpoints[-1][0] != cfg.meta_steps:
        record.checkpoints.append((cfg.meta_steps, theta.copy()))
    record.theta_final = theta
    return record


def meta_train(
    task_family: NqmFamily | InnerTask,
    optimizer_kind: str,
    cfg: MetaConfig,
    seed: int,
    *,
    features: FeatureConfig | None = None,
    threads: int = 1,
    p0: np.ndarray | None = None,
) -> TrainingRecord:
    """Run the outer loop for one arm and return its full training record.

    linear_nqm pairs an NqmFamily with plain ES on the closed-form loss (a
    single segment per episode, so persistence adds nothing) and logs the
    dynamics-matrix eigenvalue magnitudes each step. The learned-optimizer
    kinds run persistent ES over truncated unrolls of the given inner task.
    """
    if optimizer_kind == "linear_nqm":
        if not isinstance(task_family, NqmFamily):
            raise ValueError("linear_nqm training needs an NqmFamily")
        return _train_linear(task_family, cfg, seed, p0)
    if optimizer_kind in ("star", "blackbox", "hyperparam"):
        if isinstance(task_family, NqmFamily):
            raise ValueError(f"{optimizer_kind} training needs an InnerTask")
        if features is None:
            features = FeatureConfig(nominal=NominalConfig())
        return _train_unrolled(task_family, optimizer_kind, cfg, seed, features, threads)
    raise ValueError(f"unknown optimizer kind: {optimizer_kind!r}")
