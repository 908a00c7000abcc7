"""Inner optimizer state: multi-timescale momenta and second moments.

This is the hand-designed core that learned optimizers are anchored to. State
updates are pure functions: every call returns a fresh InnerState and never
mutates its inputs, so unrolled training segments can be replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NominalConfig",
    "InnerState",
    "init_state",
    "update_state",
    "adam_direction",
    "aggmo_direction",
    "nominal_direction",
    "hyperparam_controller_update",
]

# Fixed output scale and exponent sensitivity of the magnitude gate.
GATE_SCALE = 1e-3
GATE_SENSITIVITY = 1e-3


@dataclass(frozen=True)
class NominalConfig:
    """Timescales and epsilon for the combined momentum/second-moment engine.

    The first entry of each timescale tuple is the primary one used wherever a
    single Adam-style moment pair is needed. combine selects how the nominal
    direction merges the timescales: "precond_aggmo" (default) averages
    bias-corrected momenta each divided by the primary second moment;
    "half_sum" averages the plain Adam and aggregated-momentum directions.
    """

    momentum_timescales: tuple[float, ...] = (0.1, 0.5, 0.9, 0.99, 0.999)
    # 0.999 first: the primary second moment must remember old gradient
    # magnitudes long enough to keep lagged momenta from overshooting when
    # recent gradients shrink.
    second_moment_timescales: tuple[float, ...] = (0.999, 0.99, 0.9)
    adam_eps: float = 1e-8
    combine: str = "precond_aggmo"

    def __post_init__(self) -> None:
        if not self.momentum_timescales or not self.second_moment_timescales:
            raise ValueError("timescale tuples must be non-empty")
        for value in self.momentum_timescales + self.second_moment_timescales:
            if not 0.0 <= value < 1.0:
                raise ValueError("timescales must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.combine not in ("precond_aggmo", "half_sum"):
            raise ValueError("combine must be 'precond_aggmo' or 'half_sum'")


@dataclass(frozen=True)
class InnerState:
    """Per-coordinate optimizer accumulators after `step` gradient updates.

    momenta has one row per momentum timescale, second_moments one row per
    second-moment timescale.
    """

    momenta: np.ndarray
    second_moments: np.ndarray
    step: int


def init_state(cfg: NominalConfig, n_coords: int) -> InnerState:
    """Fresh all-zero state for n_coords parameters."""
    return InnerState(
        momenta=np.zeros((len(cfg.momentum_timescales), n_coords)),
        second_moments=np.zeros((len(cfg.second_moment_timescales), n_coords)),
        step=0,
    )


def update_state(state: InnerState, grad: np.ndarray, cfg: NominalConfig) -> InnerState:
    """Fold one gradient into every momentum and second-moment accumulator.

    m <- gamma m + (1 - gamma) g and v <- beta v + (1 - beta) g^2 per
    timescale. Rejects non-finite gradients.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (state.momenta.shape[1],):
        raise ValueError("grad length does not match state")
    if not np.isfinite(grad).all():
        raise ValueError("grad must be finite")
    gammas = np.array(cfg.momentum_timescales)[:, None]
    betas = np.array(cfg.second_moment_timescales)[:, None]
    return InnerState(
        momenta=gammas * state.momenta + (1.0 - gammas) * grad,
        second_moments=betas * state.second_moments + (1.0 - betas) * grad * grad,
        step=state.step + 1,
    )


def _require_started(state: InnerState, what: str) -> None:
    if state.step < 1:
        raise ValueError(f"{what} undefined before the first gradient (step 0)")


_CORRECTIONS: dict[tuple[tuple[float, ...], int], np.ndarray] = {}


def _correction_factors(timescales: tuple[float, ...], step: int) -> np.ndarray:
    """1 - c**step per timescale, cached; steps repeat across parallel loops."""
    key = (timescales, step)
    out = _CORRECTIONS.get(key)
    if out is None:
        out = 1.0 - np.array(timescales) ** step
        _CORRECTIONS[key] = out
    return out


def _primary_corrected(state: InnerState, cfg: NominalConfig) -> tuple[np.ndarray, np.ndarray]:
    m_hat = state.momenta[0] / _correction_factors(cfg.momentum_timescales, state.step)[0]
    v_hat = (
        state.second_moments[0] / _correction_factors(cfg.second_moment_timescales, state.step)[0]
    )
    return m_hat, v_hat


def adam_direction(state: InnerState, cfg: NominalConfig) -> np.ndarray:
    """Bias-corrected primary momentum over the primary second moment."""
    _require_started(state, "adam_direction")
    m_hat, v_hat = _primary_corrected(state, cfg)
    return m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def aggmo_direction(state: InnerState, cfg: NominalConfig) -> np.ndarray:
    """Average of bias-corrected momenta across all timescales."""
    _require_started(state, "aggmo_direction")
    factors = _correction_factors(cfg.momentum_timescales, state.step)
    corrected = state.momenta / factors[:, None]
    return corrected.mean(axis=0)


def nominal_direction(state: InnerState, cfg: NominalConfig) -> np.ndarray:
    """Descent direction combining all momentum timescales with the primary
    second-moment preconditioner.

    With a single momentum timescale the default mode reduces exactly to
    adam_direction.
    """
    _require_started(state, "nominal_direction")
    if cfg.combine == "half_sum":
        return 0.5 * adam_direction(state, cfg) + 0.5 * aggmo_direction(state, cfg)
    _, v_hat = _primary_corrected(state, cfg)
    return aggmo_direction(state, cfg) / (np.sqrt(v_hat) + cfg.adam_eps)


def hyperparam_controller_update(
    state: InnerState,
    cfg: NominalConfig,
    magnitude_head_output: float | np.ndarray,
    scale: float = GATE_SCALE,
    sensitivity: float = GATE_SENSITIVITY,
) -> np.ndarray:
    """Nominal direction with a learned per-coordinate step-size gate.

    Returns scale * exp(sensitivity * magnitude_head_output) * direction. The
    exponential gate is always positive: the controller can rescale the
    nominal step but never reverse it.
    """
    gate = scale * np.exp(sensitivity * np.asarray(magnitude_head_output, dtype=float))
    return gate * nominal_direction(state, cfg)
