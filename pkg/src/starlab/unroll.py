"""Inner-loop engine: apply an optimizer arm to a task, segment by segment.

This is deliberately stateful and in-place for speed; a LoopState belongs to
exactly one caller (one PES particle or one evaluation run) and is advanced by
run_segment. Everything random flows through derived counter-based seeds, so
two LoopStates advanced with the same arguments stay bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .inner_opt import (
    GATE_SCALE,
    InnerState,
    hyperparam_controller_update,
    init_state,
    nominal_direction,
)
from .nqm import DIVERGENCE_LIMIT
from .star import (
    FeatureConfig,
    StarParams,
    blackbox_update,
    compute_features,
    compute_tensor_stats,
    init_star_params,
    mlp_forward,
    params_from_flat,
    star_update,
)
from .tasks import InnerTask

__all__ = ["OptimizerArm", "LoopState", "EvalResult", "init_loop", "run_segment", "evaluate_training"]

ARM_KINDS = ("star", "blackbox", "hyperparam", "nominal")


@dataclass(frozen=True)
class OptimizerArm:
    """An update rule plus the template carrying its learnable weights."""

    kind: str
    features: FeatureConfig
    template: StarParams | None = None

    def __post_init__(self) -> None:
        if self.kind not in ARM_KINDS:
            raise ValueError(f"unknown arm kind: {self.kind!r}")
        if self.kind != "nominal" and self.template is None:
            raise ValueError(f"arm kind {self.kind!r} needs a StarParams template")

    @staticmethod
    def build(kind: str, features: FeatureConfig, seed: int = 0) -> "OptimizerArm":
        template = None if kind == "nominal" else init_star_params(features, kind, seed)
        return OptimizerArm(kind=kind, features=features, template=template)


@dataclass
class LoopState:
    """Mutable inner-training state owned by a single unroll."""

    params: np.ndarray
    inner: InnerState
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    diverged: bool = False
    views: dict[str, np.ndarray] = field(default_factory=dict)
    layout: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self) -> None:
        offset = 0
        layout = []
        for name, shape in self.shapes:
            size = 1
            for d in shape:
                size *= int(d)
            self.views[name] = self.params[offset : offset + size].reshape(shape)
            layout.append((name, offset, offset + size))
            offset += size
        self.layout = tuple(layout)


def _flatten_like(
    grads: dict[str, np.ndarray], layout: tuple[tuple[str, int, int], ...], out: np.ndarray
) -> np.ndarray:
    for name, start, stop in layout:
        out[start:stop] = grads[name].reshape(-1)
    return out


def init_loop(task: InnerTask, arm: OptimizerArm, seed: int) -> LoopState:
    """Fresh task parameters and zeroed optimizer state."""
    shapes = task.shapes()
    init = task.init_params(seed)
    flat = np.concatenate([init[name].reshape(-1) for name, _shape in shapes])
    return LoopState(
        params=flat,
        inner=init_state(arm.features.nominal, flat.size),
        shapes=shapes,
    )


def run_segment(
    task: InnerTask,
    arm: OptimizerArm,
    theta: np.ndarray | None,
    loop: LoopState,
    n_steps: int,
    loss_weight: float,
    seed_parts: tuple,
) -> float:
    """Advance the loop n_steps and return the weighted segment loss.

    Batch seeds are derived from seed_parts plus the loop's step index, so the
    two antithetic siblings of a PES pair see identical data streams. A
    diverged loop contributes an infinite loss and is left untouched until its
    caller reinitializes it.
    """
    if loop.diverged:
        return float("inf")
    weights = arm.features
    nominal_cfg = weights.nominal
    kind = arm.kind
    if kind == "nominal":
        star_params = None
    else:
        assert arm.template is not None
        star_params = arm.template if theta is None else params_from_flat(arm.template, theta)
    grad_buf = np.empty_like(loop.params)
    total = 0.0
    start = loop.inner.step
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(start, start + n_steps):
            batch_seed = rng.derive_seed(*seed_parts, t)
            loss, grads = task.loss_and_grad(loop.views, batch_seed)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                loop.diverged = True
                return float("inf")
            total += loss_weight * loss
            grad_flat = _flatten_like(grads, loop.layout, grad_buf)
            if not np.isfinite(grad_flat).all():
                loop.diverged = True
                return float("inf")
            loop.inner = _ema_update(loop.inner, grad_flat, nominal_cfg)
            if kind == "nominal":
                delta = GATE_SCALE * nominal_direction(loop.inner, nominal_cfg)
            else:
                stats = compute_tensor_stats(loop.params, grad_flat, loop.shapes)
                feats = compute_features(
                    loop.inner, loop.params, grad_flat, stats, loop.inner.step, weights
                )
                if kind == "star":
                    delta = star_update(star_params, feats, loop.inner, weights)
                elif kind == "blackbox":
                    delta = blackbox_update(star_params, feats)
                else:
                    gate = mlp_forward(star_params, feats)[:, 0]
                    delta = hyperparam_controller_update(
                        loop.inner, nominal_cfg, gate, scale=star_params.gate_scale
                    )
            loop.params -= delta
            if not np.isfinite(loop.params).all():
                loop.diverged = True
                return float("inf")
    return total


def _ema_update(state: InnerState, grad: np.ndarray, cfg) -> InnerState:
    # Same recurrences as inner_opt.update_state, minus revalidation; the
    # caller has already checked the gradient.
    gammas = _ema_update._gammas.get(cfg.momentum_timescales)
    if gammas is None:
        gammas = np.array(cfg.momentum_timescales)[:, None]
        _ema_update._gammas[cfg.momentum_timescales] = gammas
    betas = _ema_update._betas.get(cfg.second_moment_timescales)
    if betas is None:
        betas = np.array(cfg.second_moment_timescales)[:, None]
        _ema_update._betas[cfg.second_moment_timescales] = betas
    return InnerState(
        momenta=gammas * state.momenta + (1.0 - gammas) * grad,
        second_moments=betas * state.second_moments + (1.0 - betas) * grad * grad,
        step=state.step + 1,
    )


_ema_update._gammas = {}  # type: ignore[attr-defined]
_ema_update._betas = {}  # type: ignore[attr-defined]


@dataclass(frozen=True)
class EvalResult:
    """Outcome of training a task with a fixed (already meta-trained) arm."""

    steps: np.ndarray
    losses: np.ndarray
    horizon: int
    steps_completed: int
    diverged: bool

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1]) if self.losses.size else float("inf")


def evaluate_training(
    task: InnerTask,
    arm: OptimizerArm,
    theta: np.ndarray | None,
    horizon: int,
    seed: int,
    record_every: int = 10,
) -> EvalResult:
    """Train the task for a full horizon and record strided losses.

    Stops at divergence; the recorded curve never contains non-finite values,
    the diverged flag plus steps_completed carry that information instead.
    """
    loop = init_loop(task, arm, rng.derive_seed(seed, "eval-init"))
    steps: list[int] = []
    losses: list[float] = []
    done = 0
    for block_start in range(0, horizon, record_every):
        block = min(record_every, horizon - block_start)
        seg = run_segment(
            task, arm, theta, loop, block, 1.0 / block, (seed, "eval-batch")
        )
        if loop.diverged:
            break
        done += block
        steps.append(done)
        losses.append(seg)
    return EvalResult(
        steps=np.array(steps, dtype=int),
        losses=np.array(losses),
        horizon=horizon,
        steps_completed=done,
        diverged=loop.diverged,
    )
