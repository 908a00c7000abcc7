"""Inner training tasks for meta-optimization.

A task exposes seeded parameter initialization and a pure loss_and_grad over
named parameter tensors. The quadratic adapter wraps the closed-form model so
learned optimizers can train on it like any other task; the toy MLP family
provides small softmax classifiers on synthetic datasets with exact manual
backpropagation (no autodiff dependency, gradients are unit-tested against
finite differences).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import rng
from .nqm import QuadraticTask, psd_factor

__all__ = [
    "InnerTask",
    "DatasetSpec",
    "make_dataset",
    "QuadraticInnerTask",
    "quadratic_task_adapter",
    "ToyMlpTask",
    "toy_mlp_task",
    "SuiteEntry",
    "generalization_suite",
    "default_meta_task",
]

MAX_DATASET_POINTS = 4096


@runtime_checkable
class InnerTask(Protocol):
    """Minimal contract an inner task exposes to the unroll engine."""

    name: str

    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]: ...

    def init_params(self, seed: int) -> dict[str, np.ndarray]: ...

    def loss_and_grad(
        self, params: dict[str, np.ndarray], batch_seed: int
    ) -> tuple[float, dict[str, np.ndarray]]: ...

    def fingerprint(self) -> str: ...


def _fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class QuadraticInnerTask:
    """Noisy quadratic wrapped as an inner task.

    Each batch_seed draws a fresh target xi; the loss is the half quadratic
    form and the gradient is exactly H (phi - xi).
    """

    task: QuadraticTask
    name: str = "noisy-quadratic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "_noise_factor", psd_factor(self.task.noise_cov))
        object.__setattr__(self, "_init_factor", psd_factor(self.task.init_cov))

    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return (("phi", (self.task.dim,)),)

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        draw = rng.stream(seed, "phi0").standard_normal(self.task.dim)
        factor = self._init_factor  # type: ignore[attr-defined]
        return {"phi": self.task.init_mean + factor @ draw}

    def loss_and_grad(
        self, params: dict[str, np.ndarray], batch_seed: int
    ) -> tuple[float, dict[str, np.ndarray]]:
        factor = self._noise_factor  # type: ignore[attr-defined]
        xi = factor @ rng.scratch_stream(batch_seed, "target").standard_normal(self.task.dim)
        diff = params["phi"] - xi
        grad = self.task.hessian @ diff
        return float(0.5 * diff @ grad), {"phi": grad}

    def fingerprint(self) -> str:
        return _fingerprint(
            {
                "kind": "quadratic",
                "dim": self.task.dim,
                "hessian": self.task.hessian.tolist(),
                "noise_cov": self.task.noise_cov.tolist(),
                "init_mean": self.task.init_mean.tolist(),
                "init_cov": self.task.init_cov.tolist(),
            }
        )


def quadratic_task_adapter(task: QuadraticTask) -> QuadraticInnerTask:
    """Expose a QuadraticTask through the inner-task interface."""
    return QuadraticInnerTask(task=task)


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic classification dataset description, fully seeded."""

    kind: str
    n_points: int
    n_classes: int
    input_dim: int = 2
    noise: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "rings"):
            raise ValueError("kind must be 'blobs' or 'rings'")
        if not 1 <= self.n_points <= MAX_DATASET_POINTS:
            raise ValueError(f"n_points must lie in [1, {MAX_DATASET_POINTS}]")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.input_dim < 2:
            raise ValueError("input_dim must be at least 2")


def make_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (points, labels) deterministically from the spec."""
    gen = rng.stream(spec.seed, "dataset", spec.kind)
    labels = np.arange(spec.n_points) % spec.n_classes
    points = spec.noise * gen.standard_normal((spec.n_points, spec.input_dim))
    if spec.kind == "blobs":
        angles = 2 * np.pi * labels / spec.n_classes
        points[:, 0] += 2.5 * np.cos(angles)
        points[:, 1] += 2.5 * np.sin(angles)
    else:
        theta = gen.uniform(0.0, 2 * np.pi, size=spec.n_points)
        radius = 1.0 + labels
        points[:, 0] += radius * np.cos(theta)
        points[:, 1] += radius * np.sin(theta)
    return points, labels


@dataclass(frozen=True)
class ToyMlpTask:
    """Softmax MLP classifier with exact manual reverse-mode gradients.

    layout gives layer widths from input to logits; nonlinearity applies to
    every hidden layer. Batches are sampled with replacement from the fixed
    dataset using the batch seed only.
    """

    layout: tuple[int, ...]
    nonlinearity: str
    dataset: DatasetSpec
    batch_size: int = 16
    name: str = "toy-mlp"

    def __post_init__(self) -> None:
        if len(self.layout) < 2:
            raise ValueError("layout needs at least input and output widths")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ValueError("nonlinearity must be 'relu' or 'tanh'")
        if self.layout[0] != self.dataset.input_dim:
            raise ValueError("layout input width must match dataset input_dim")
        if self.layout[-1] != self.dataset.n_classes:
            raise ValueError("layout output width must match dataset n_classes")
        data = make_dataset(self.dataset)
        object.__setattr__(self, "_data", data)
        object.__setattr__(self, "_batch_arange", np.arange(self.batch_size))

    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        out: list[tuple[str, tuple[int, ...]]] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layout[:-1], self.layout[1:])):
            out.append((f"w{i}", (fan_in, fan_out)))
            out.append((f"b{i}", (fan_out,)))
        return tuple(out)

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        gen = rng.stream(seed, "mlp-init")
        params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.layout[:-1], self.layout[1:])):
            params[f"w{i}"] = gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            params[f"b{i}"] = np.zeros(fan_out)
        return params

    def _activate(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.nonlinearity == "relu" else np.tanh(z)

    def loss_and_grad(
        self, params: dict[str, np.ndarray], batch_seed: int
    ) -> tuple[float, dict[str, np.ndarray]]:
        points, labels = self._data  # type: ignore[attr-defined]
        idx = rng.scratch_stream(batch_seed, "batch").integers(
            0, points.shape[0], size=self.batch_size
        )
        x = points[idx]
        y = labels[idx]
        n_layers = len(self.layout) - 1

        hidden = [x]
        pre: list[np.ndarray] = []
        for i in range(n_layers - 1):
            z = hidden[-1] @ params[f"w{i}"] + params[f"b{i}"]
            pre.append(z)
            hidden.append(self._activate(z))
        logits = hidden[-1] @ params[f"w{n_layers - 1}"] + params[f"b{n_layers - 1}"]

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        batch = self.batch_size
        rows = self._batch_arange  # type: ignore[attr-defined]
        loss = float(-np.log(probs[rows, y] + 1e-300).mean())

        d_logits = probs.copy()
        d_logits[rows, y] -= 1.0
        d_logits /= batch
        grads: dict[str, np.ndarray] = {}
        upstream = d_logits
        for i in range(n_layers - 1, -1, -1):
            grads[f"w{i}"] = hidden[i].T @ upstream
            grads[f"b{i}"] = upstream.sum(axis=0)
            if i > 0:
                upstream = upstream @ params[f"w{i}"].T
                if self.nonlinearity == "relu":
                    upstream = upstream * (pre[i - 1] > 0)
                else:
                    act = hidden[i]
                    upstream = upstream * (1.0 - act * act)
        return loss, grads

    def fingerprint(self) -> str:
        return _fingerprint(
            {
                "kind": "toy-mlp",
                "layout": list(self.layout),
                "nonlinearity": self.nonlinearity,
                "dataset": {
                    "kind": self.dataset.kind,
                    "n_points": self.dataset.n_points,
                    "n_classes": self.dataset.n_classes,
                    "input_dim": self.dataset.input_dim,
                    "noise": self.dataset.noise,
                    "seed": self.dataset.seed,
                },
                "batch_size": self.batch_size,
            }
        )


def toy_mlp_task(
    layout: tuple[int, ...],
    dataset: DatasetSpec,
    nonlinearity: str = "relu",
    batch_size: int = 16,
    name: str = "toy-mlp",
) -> ToyMlpTask:
    """Build a toy MLP classification task."""
    return ToyMlpTask(
        layout=tuple(layout),
        nonlinearity=nonlinearity,
        dataset=dataset,
        batch_size=batch_size,
        name=name,
    )


def default_meta_task() -> ToyMlpTask:
    """The task the desk-scale meta-training experiments run on."""
    return toy_mlp_task(
        layout=(2, 8, 8, 2),
        dataset=DatasetSpec(kind="blobs", n_points=512, n_classes=2, seed=7),
        nonlinearity="relu",
        name="mlp-base",
    )


@dataclass(frozen=True)
class SuiteEntry:
    """A generalization probe: a task plus the horizon it is evaluated at."""

    name: str
    task: InnerTask
    horizon: int

    def fingerprint(self) -> str:
        return _fingerprint(
            {"name": self.name, "task": self.task.fingerprint(), "horizon": self.horizon}
        )


def generalization_suite(meta_horizon: int = 2000) -> tuple[SuiteEntry, ...]:
    """Out-of-distribution battery around the meta-training task.

    Five probes: the meta-training task itself, a wider and deeper variant, a
    tanh variant, the same architecture on a ring dataset, and a long-horizon
    arm whose horizon is exactly five times the meta-training horizon.
    """
    base = default_meta_task()
    blobs = base.dataset
    rings = DatasetSpec(
        kind="rings",
        n_points=blobs.n_points,
        n_classes=blobs.n_classes,
        input_dim=blobs.input_dim,
        noise=0.15,
        seed=11,
    )
    entries = (
        SuiteEntry("mlp-base", base, meta_horizon),
        SuiteEntry(
            "mlp-wide-deep",
            toy_mlp_task((2, 16, 16, 16, 2), blobs, "relu", name="mlp-wide-deep"),
            meta_horizon,
        ),
        SuiteEntry(
            "mlp-tanh",
            toy_mlp_task(base.layout, blobs, "tanh", name="mlp-tanh"),
            meta_horizon,
        ),
        SuiteEntry(
            "mlp-rings",
            toy_mlp_task(base.layout, rings, "relu", name="mlp-rings"),
            meta_horizon,
        ),
        SuiteEntry("mlp-long-horizon", base, 5 * meta_horizon),
    )
    return entries
