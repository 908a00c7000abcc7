"""Learned optimizer updates built around a per-coordinate feature MLP.

Three update rules share one trunk architecture and differ only in their head
count: the full learned optimizer (three heads: blackbox magnitude, blackbox
exponent, nominal-step gate), the pure blackbox baseline (two heads), and the
step-size controller (one head). Head weights start at zero, so a freshly
initialized learned optimizer is exactly the scaled nominal optimizer and the
blackbox baseline is exactly a no-op; meta-training then deforms them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .inner_opt import InnerState, NominalConfig, _correction_factors, nominal_direction

__all__ = [
    "BETA_OUTPUT",
    "BETA_EXPONENT",
    "FeatureConfig",
    "TensorStats",
    "StarParams",
    "FeatureError",
    "HEAD_COUNTS",
    "compute_tensor_stats",
    "compute_features",
    "mlp_forward",
    "star_update",
    "blackbox_update",
    "init_star_params",
    "params_to_flat",
    "params_from_flat",
    "save_params",
    "load_params",
]

# Output scale and exponent sensitivity shared by all learned-update terms.
BETA_OUTPUT = 1e-3
BETA_EXPONENT = 1e-3

_HIDDEN = 4
HEAD_COUNTS = {"star": 3, "blackbox": 2, "hyperparam": 1}


class FeatureError(ValueError):
    """Raised when feature inputs are unusable; carries a coordinate index."""

    def __init__(self, message: str, coord_index: int):
        super().__init__(message)
        self.coord_index = coord_index


@dataclass(frozen=True)
class FeatureConfig:
    """Feature extraction settings, hashed into checkpoint fingerprints.

    feature_eps floors the second-moment square roots inside features;
    rms_floor floors the per-tensor column normalizer; precond_eps floors the
    preconditioner denominator of the learned blackbox term. step_taus are the
    horizons of the tanh(step / tau) encodings.
    """

    nominal: NominalConfig = NominalConfig()
    feature_eps: float = 1e-12
    rms_floor: float = 1e-8
    precond_eps: float = 1e-8
    step_taus: tuple[float, ...] = (
        1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4, 3e4, 1e5,
    )

    def __post_init__(self) -> None:
        if min(self.feature_eps, self.rms_floor, self.precond_eps) <= 0:
            raise ValueError("feature_eps, rms_floor and precond_eps must be positive")
        if not self.step_taus or min(self.step_taus) <= 0:
            raise ValueError("step_taus must be positive")

    @property
    def n_features(self) -> int:
        n_m = len(self.nominal.momentum_timescales)
        n_v = len(self.nominal.second_moment_timescales)
        return 1 + n_m + n_v + n_m * n_v + 2 + len(self.step_taus)

    def fingerprint(self) -> str:
        payload = {
            "momentum_timescales": list(self.nominal.momentum_timescales),
            "second_moment_timescales": list(self.nominal.second_moment_timescales),
            "adam_eps": self.nominal.adam_eps,
            "combine": self.nominal.combine,
            "feature_eps": self.feature_eps,
            "rms_floor": self.rms_floor,
            "precond_eps": self.precond_eps,
            "step_taus": list(self.step_taus),
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TensorStats:
    """Per-coordinate tensor-level context: gradient scale and parameter RMS.

    slices maps each named tensor to its (start, stop) range in the flat
    coordinate layout; feature normalization reuses it.
    """

    grad_scale: np.ndarray
    param_rms: np.ndarray
    slices: tuple[tuple[str, int, int], ...]


class _StatsPlan:
    """Precomputed layout for a fixed tuple of tensor shapes."""

    __slots__ = ("n", "starts", "sizes", "inv_sizes", "entries", "slices")

    def __init__(self, shapes: tuple[tuple[str, tuple[int, ...]], ...]) -> None:
        offset = 0
        sizes: list[int] = []
        entries: list[tuple[int, slice, tuple[int, ...] | None]] = []
        slices: list[tuple[str, int, int]] = []
        for idx, (name, shape) in enumerate(shapes):
            size = 1
            for d in shape:
                size *= int(d)
            entries.append((idx, slice(offset, offset + size), shape if len(shape) == 2 else None))
            slices.append((name, offset, offset + size))
            sizes.append(size)
            offset += size
        self.n = offset
        self.starts = np.array([sl.start for _i, sl, _sh in entries])
        self.sizes = np.array(sizes)
        self.inv_sizes = 1.0 / self.sizes
        self.entries = entries
        self.slices = tuple(slices)


_STATS_PLANS: dict[tuple, _StatsPlan] = {}


def _stats_plan(shapes) -> _StatsPlan:
    plan = _STATS_PLANS.get(shapes)
    if plan is None:
        plan = _StatsPlan(shapes)
        _STATS_PLANS[shapes] = plan
    return plan


def compute_tensor_stats(
    params: np.ndarray,
    grads: np.ndarray,
    shapes: tuple[tuple[str, tuple[int, ...]], ...],
) -> TensorStats:
    """Reduce each tensor to broadcast scale features.

    Matrix-shaped tensors get the factored row/column estimate of the squared
    gradient (row mean times column mean over total mean); vectors fall back
    to the plain tensor RMS. Parameter RMS is always the per-tensor scalar.
    """
    plan = _stats_plan(shapes)
    if plan.n != params.shape[0]:
        raise ValueError("tensor shapes do not cover the flat layout")
    g2 = grads * grads
    p2 = params * params
    g_totals = np.add.reduceat(g2, plan.starts) * plan.inv_sizes
    p_totals = np.add.reduceat(p2, plan.starts) * plan.inv_sizes
    param_rms = np.repeat(np.sqrt(p_totals), plan.sizes)
    grad_scale = np.zeros(plan.n)
    for idx, sl, mat_shape in plan.entries:
        if mat_shape is None:
            grad_scale[sl] = np.sqrt(g_totals[idx])
        elif g_totals[idx] > 0:
            sq = g2[sl].reshape(mat_shape)
            row = sq.mean(axis=1)
            col = sq.mean(axis=0)
            grad_scale[sl] = np.sqrt(np.outer(row, col) / g_totals[idx]).reshape(-1)
    return TensorStats(grad_scale=grad_scale, param_rms=param_rms, slices=plan.slices)


_FEATURE_LAYOUTS: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
_STEP_ROWS: dict[tuple, np.ndarray] = {}


def _feature_layout(slices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cached = _FEATURE_LAYOUTS.get(slices)
    if cached is None:
        starts = np.array([start for _name, start, _stop in slices])
        sizes = np.array([stop - start for _name, start, stop in slices])
        cached = (starts, sizes, 1.0 / sizes)
        _FEATURE_LAYOUTS[slices] = cached
    return cached


def _step_row(step: int, taus: tuple[float, ...]) -> np.ndarray:
    key = (step, taus)
    row = _STEP_ROWS.get(key)
    if row is None:
        row = np.tanh(step / np.array(taus))
        _STEP_ROWS[key] = row
    return row


def compute_features(
    state: InnerState,
    params: np.ndarray,
    grads: np.ndarray,
    stats: TensorStats,
    step: int,
    cfg: FeatureConfig,
) -> np.ndarray:
    """Assemble the per-coordinate feature matrix.

    Columns: parameter value, one momentum per timescale, one reciprocal-root
    second moment per timescale, all preconditioned momentum combinations, the
    two tensor-scale features, then the tanh step encodings. Every column
    except the step encodings is RMS-normalized per tensor with the floor from
    cfg; step encodings are bounded by construction and stay raw.
    """
    if not np.isfinite(grads).all():
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise FeatureError(f"non-finite gradient at coordinate {bad}", bad)
    if not np.isfinite(params).all():
        bad = int(np.flatnonzero(~np.isfinite(params))[0])
        raise FeatureError(f"non-finite parameter at coordinate {bad}", bad)
    n = params.shape[0]
    n_m = state.momenta.shape[0]
    n_v = state.second_moments.shape[0]
    n_body = 1 + n_m + n_v + n_m * n_v + 2
    body = np.empty((n_body, n))
    body[0] = params
    body[1 : 1 + n_m] = state.momenta
    recip = 1.0 / (np.sqrt(state.second_moments) + cfg.feature_eps)  # (n_v, n)
    body[1 + n_m : 1 + n_m + n_v] = recip
    precond = body[1 + n_m + n_v : n_body - 2]
    np.multiply(
        state.momenta[:, None, :],
        recip[None, :, :],
        out=precond.reshape(n_m, n_v, n),
    )
    body[n_body - 2] = stats.grad_scale
    body[n_body - 1] = stats.param_rms
    starts, sizes, inv_sizes = _feature_layout(stats.slices)
    rms = np.sqrt(np.add.reduceat(body * body, starts, axis=1) * inv_sizes)
    np.maximum(rms, cfg.rms_floor, out=rms)
    body /= np.repeat(rms, sizes, axis=1)
    out = np.empty((n, n_body + len(cfg.step_taus)))
    out[:, :n_body] = body.T
    out[:, n_body:] = _step_row(step, cfg.step_taus)
    return out  # (n, F)


@dataclass(frozen=True)
class StarParams:
    """Weights of the per-coordinate update MLP.

    Two hidden layers of width 4 with ReLU, then a linear head layer whose
    width depends on kind. gate_scale replaces the fixed output scale of the
    nominal-gate term when gate_learnable is set; it then travels in the flat
    parameter vector and is exposed to the meta-optimizer.
    """

    kind: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray
    feature_fingerprint: str
    gate_scale: float = BETA_OUTPUT
    gate_learnable: bool = False

    def __post_init__(self) -> None:
        if self.kind not in HEAD_COUNTS:
            raise ValueError(f"unknown params kind: {self.kind!r}")
        heads = HEAD_COUNTS[self.kind]
        n_features = self.w1.shape[0]
        expected = {
            "w1": (n_features, _HIDDEN),
            "b1": (_HIDDEN,),
            "w2": (_HIDDEN, _HIDDEN),
            "b2": (_HIDDEN,),
            "w_head": (_HIDDEN, heads),
            "b_head": (heads,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")

    @property
    def param_count(self) -> int:
        count = sum(
            arr.size for arr in (self.w1, self.b1, self.w2, self.b2, self.w_head, self.b_head)
        )
        return count + (1 if self.gate_learnable else 0)


def init_star_params(cfg: FeatureConfig, kind: str, seed: int) -> StarParams:
    """Random trunk, zero heads.

    Trunk weights are uniform with gain 1/sqrt(fan_in); trunk biases and the
    entire head layer start at zero, which pins the initial update to the
    nominal optimizer (or to a no-op for the blackbox baseline).
    """
    if kind not in HEAD_COUNTS:
        raise ValueError(f"unknown params kind: {kind!r}")
    gen = rng.stream(seed, "star-init", kind)
    n_features = cfg.n_features
    w1 = gen.uniform(-1.0, 1.0, size=(n_features, _HIDDEN)) / np.sqrt(n_features)
    w2 = gen.uniform(-1.0, 1.0, size=(_HIDDEN, _HIDDEN)) / np.sqrt(_HIDDEN)
    heads = HEAD_COUNTS[kind]
    return StarParams(
        kind=kind,
        w1=w1,
        b1=np.zeros(_HIDDEN),
        w2=w2,
        b2=np.zeros(_HIDDEN),
        w_head=np.zeros((_HIDDEN, heads)),
        b_head=np.zeros(heads),
        feature_fingerprint=cfg.fingerprint(),
    )


def mlp_forward(params: StarParams, features: np.ndarray) -> np.ndarray:
    """Head outputs for a batch of per-coordinate feature rows."""
    h = np.maximum(features @ params.w1 + params.b1, 0.0)
    h = np.maximum(h @ params.w2 + params.b2, 0.0)
    return h @ params.w_head + params.b_head


def star_update(
    params: StarParams,
    features: np.ndarray,
    state: InnerState,
    cfg: FeatureConfig,
) -> np.ndarray:
    """Full learned update: preconditioned blackbox term plus gated nominal.

    delta = beta (d / v) exp(beta m_b) + gate exp(beta m_g) nominal_direction
    where v is the bias-corrected primary second moment's square root plus
    precond_eps. Subtract delta from the parameters.
    """
    if params.kind != "star":
        raise ValueError("star_update needs params of kind 'star'")
    heads = mlp_forward(params, features)
    d, m_b, m_g = heads[:, 0], heads[:, 1], heads[:, 2]
    correction = _correction_factors(cfg.nominal.second_moment_timescales, state.step)[0]
    v = np.sqrt(state.second_moments[0] / correction) + cfg.precond_eps
    direction = nominal_direction(state, cfg.nominal)
    blackbox = BETA_OUTPUT * (d / v) * np.exp(BETA_EXPONENT * m_b)
    gated = params.gate_scale * np.exp(BETA_EXPONENT * m_g) * direction
    return blackbox + gated


def blackbox_update(params: StarParams, features: np.ndarray) -> np.ndarray:
    """Pure blackbox update: beta d exp(beta m), no nominal anchor, no
    preconditioner."""
    if params.kind != "blackbox":
        raise ValueError("blackbox_update needs params of kind 'blackbox'")
    heads = mlp_forward(params, features)
    return BETA_OUTPUT * heads[:, 0] * np.exp(BETA_EXPONENT * heads[:, 1])


_ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "w_head", "b_head")


def params_to_flat(params: StarParams) -> np.ndarray:
    """Pack the learnable weights into one vector for the meta-optimizer."""
    parts = [getattr(params, name).reshape(-1) for name in _ARRAY_FIELDS]
    if params.gate_learnable:
        parts.append(np.array([params.gate_scale]))
    return np.concatenate(parts)


def params_from_flat(template: StarParams, flat: np.ndarray) -> StarParams:
    """Rebuild StarParams from a flat vector using template shapes."""
    updates = {}
    offset = 0
    for name in _ARRAY_FIELDS:
        arr = getattr(template, name)
        updates[name] = flat[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    if template.gate_learnable:
        updates["gate_scale"] = float(flat[offset])
        offset += 1
    if offset != flat.size:
        raise ValueError("flat vector length does not match template")
    return replace(template, **updates)


def _to_json_dict(params: StarParams) -> dict:
    return {
        "format": "star-params-v1",
        "kind": params.kind,
        "feature_fingerprint": params.feature_fingerprint,
        "gate_scale": params.gate_scale,
        "gate_learnable": params.gate_learnable,
        "param_count": params.param_count,
        "arrays": {name: getattr(params, name).tolist() for name in _ARRAY_FIELDS},
    }


def save_params(params: StarParams, path) -> None:
    """Write a named-array JSON checkpoint with the feature fingerprint."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_to_json_dict(params), fh, sort_keys=True)
        fh.write("\n")


def load_params(path, cfg: FeatureConfig) -> StarParams:
    """Load a checkpoint, rejecting feature-config mismatches."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != "star-params-v1":
        raise ValueError(f"not a star params checkpoint: {path}")
    saved = blob["feature_fingerprint"]
    expected = cfg.fingerprint()
    if saved != expected:
        raise ValueError(
            f"checkpoint feature fingerprint {saved} does not match configured {expected}"
        )
    arrays = {name: np.array(blob["arrays"][name], dtype=float) for name in _ARRAY_FIELDS}
    return StarParams(
        kind=blob["kind"],
        feature_fingerprint=saved,
        gate_scale=float(blob["gate_scale"]),
        gate_learnable=bool(blob["gate_learnable"]),
        **arrays,
    )
