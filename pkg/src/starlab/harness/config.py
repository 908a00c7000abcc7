"""Experiment configs, run records, and the emitters that put them on disk.

Every config is a frozen dataclass that round-trips losslessly through JSON
(tuples become lists and come back, floats keep full repr precision).

Metric tables always start with a strictly increasing step column, floats are
written with repr so a rerun with the same config and seed reproduces the CSV
byte for byte; anything time-dependent goes to meta.json and nowhere else.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..star import StarParams, save_params

__all__ = [
    "ConfigError",
    "T_GRID",
    "DEFAULT_HESSIAN",
    "StabilityCheckParams",
    "ClosedFormParams",
    "VarianceSweepParams",
    "NqmMetaTrainParams",
    "StarMetaTrainParams",
    "GeneralizeEvalParams",
    "ExperimentConfig",
    "MetricTable",
    "RunRecord",
    "write_run",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 2)."""


# Horizon grid and 2-D curvature used by all quadratic experiments unless a
# config overrides them.
T_GRID: tuple[int, ...] = (
    1, 2, 3, 4, 5, 10, 25, 50, 100, 150, 200, 250, 300, 400, 500,
    600, 700, 800, 900, 1000,
)
DEFAULT_HESSIAN: tuple[tuple[float, ...], ...] = ((1.11, 0.596), (0.596, 0.486))

STAR_ARMS: tuple[str, ...] = ("star_wd0.1", "star_wd0.5", "blackbox", "hyperparam")


def parse_arm(label: str) -> tuple[str, float]:
    """Split an arm label into (optimizer kind, weight-decay multiplier)."""
    if label in ("blackbox", "hyperparam"):
        return label, 0.0
    if label == "star":
        return "star", 0.0
    if label.startswith("star_wd"):
        try:
            return "star", float(label[len("star_wd"):])
        except ValueError as exc:
            raise ConfigError(f"bad arm label: {label!r}") from exc
    raise ConfigError(f"unknown optimizer arm: {label!r}")


def _matrix(rows) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(x) for x in row) for row in rows)


@dataclass(frozen=True)
class StabilityCheckParams:
    """Inputs for one certificate evaluation.

    precond is the symmetric bias matrix (base matrix P-tilde for the robust
    certificate); None means zero. upper_gains is required by and only
    meaningful for the robust certificate.
    """

    certificate: str = "nominal"
    hessian: tuple[tuple[float, ...], ...] = DEFAULT_HESSIAN
    alpha: float = 0.5
    precond: tuple[tuple[float, ...], ...] | None = None
    upper_gains: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.certificate not in ("nominal", "preconditioned", "robust"):
            raise ConfigError(f"unknown certificate: {self.certificate!r}")
        if self.certificate == "robust" and self.upper_gains is None:
            raise ConfigError("robust certificate needs upper_gains")
        object.__setattr__(self, "hessian", _matrix(self.hessian))
        if self.precond is not None:
            object.__setattr__(self, "precond", _matrix(self.precond))
        if self.upper_gains is not None:
            object.__setattr__(self, "upper_gains", tuple(float(g) for g in self.upper_gains))


@dataclass(frozen=True)
class ClosedFormParams:
    """Expected-loss curves over the horizon grid, with a Monte Carlo check.

    Alphas are expressed as multipliers of 2/lambda_max(H); mc_seeds=0 skips
    the sampled columns.
    """

    alpha_multipliers: tuple[float, ...] = (0.1, 0.3, 0.5, 0.9)
    t_grid: tuple[int, ...] = T_GRID
    mc_seeds: int = 200

    def __post_init__(self) -> None:
        if not self.alpha_multipliers:
            raise ConfigError("need at least one alpha multiplier")
        if self.mc_seeds not in (0,) and self.mc_seeds < 2:
            raise ConfigError("mc_seeds must be 0 or at least 2")
        object.__setattr__(
            self, "alpha_multipliers", tuple(float(m) for m in self.alpha_multipliers)
        )
        object.__setattr__(self, "t_grid", tuple(int(t) for t in self.t_grid))


@dataclass(frozen=True)
class VarianceSweepParams:
    """Trace of the meta-gradient variance over an alpha grid and horizons."""

    n_alphas: int = 50
    alpha_max_multiplier: float = 1.0
    t_grid: tuple[int, ...] = T_GRID
    n_seeds: int = 500
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.n_alphas < 2:
            raise ConfigError("n_alphas must be at least 2")
        if self.n_seeds < 2:
            raise ConfigError("n_seeds must be at least 2")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be positive")
        if not self.alpha_max_multiplier > 0:
            raise ConfigError("alpha_max_multiplier must be positive")
        object.__setattr__(self, "t_grid", tuple(int(t) for t in self.t_grid))


@dataclass(frozen=True)
class NqmMetaTrainParams:
    """ES training of the dense bias matrix on the closed-form loss."""

    alpha_multipliers: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
    n_seeds: int = 5
    horizon: int = 50
    meta_steps: int = 1000
    meta_lr: float = 1e-2
    sigma: float = 0.01
    n_pairs: int = 8
    grad_clip: float = 1.0
    ema: float = 0.95
    checkpoint_every: int = 100
    oracle_iters: int = 2000

    def __post_init__(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be at least 1")
        object.__setattr__(
            self, "alpha_multipliers", tuple(float(m) for m in self.alpha_multipliers)
        )


@dataclass(frozen=True)
class StarMetaTrainParams:
    """Persistent-ES training of the learned-optimizer arms on the toy MLP."""

    arms: tuple[str, ...] = STAR_ARMS
    n_seeds: int = 5
    meta_steps: int = 2000
    horizon: int = 2000
    truncation: int = 50
    sigma: float = 0.01
    n_pairs: int = 4
    meta_lr: float = 1e-4
    grad_clip: float = 1.0
    ema: float = 0.98
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be at least 1")
        if not self.arms:
            raise ConfigError("need at least one arm")
        for label in self.arms:
            parse_arm(label)
        object.__setattr__(self, "arms", tuple(str(a) for a in self.arms))


@dataclass(frozen=True)
class GeneralizeEvalParams:
    """Run trained checkpoints across the task suite at stretched horizons.

    source_run points at a star-meta-train output directory; its checkpoints/
    subdirectory must hold <arm>_seed<i>_final.json for every requested arm
    and seed. meta_horizon must match the horizon those arms were trained at.
    """

    source_run: str = ""
    arms: tuple[str, ...] = ("star_wd0.5", "blackbox")
    n_seeds: int = 5
    meta_horizon: int = 2000
    horizon_multiplier: int = 5
    record_every: int = 50

    def __post_init__(self) -> None:
        if not self.arms:
            raise ConfigError("need at least one arm")
        for label in self.arms:
            parse_arm(label)
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be at least 1")
        if self.horizon_multiplier < 1:
            raise ConfigError("horizon_multiplier must be at least 1")
        if self.record_every < 1:
            raise ConfigError("record_every must be at least 1")
        object.__setattr__(self, "arms", tuple(str(a) for a in self.arms))


_PARAM_TYPES = {
    "stability-check": StabilityCheckParams,
    "nqm-closed-form": ClosedFormParams,
    "variance-sweep": VarianceSweepParams,
    "nqm-meta-train": NqmMetaTrainParams,
    "star-meta-train": StarMetaTrainParams,
    "generalize-eval": GeneralizeEvalParams,
}

EXPERIMENT_IDS = tuple(_PARAM_TYPES)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment invocation: id, seed, parameter block, output home.

    out_dir is serialized for the record but excluded from the fingerprint so
    the same experiment landing in two directories is recognizably identical.
    """

    experiment: str
    seed: int = 0
    params: object = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.experiment not in _PARAM_TYPES:
            raise ConfigError(f"unknown experiment: {self.experiment!r}")
        expected = _PARAM_TYPES[self.experiment]
        if self.params is None:
            object.__setattr__(self, "params", expected())
        elif not isinstance(self.params, expected):
            raise ConfigError(
                f"params for {self.experiment} must be {expected.__name__}, "
                f"got {type(self.params).__name__}"
            )
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")

    def to_json_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "params": dataclasses.asdict(self.params),
            "out_dir": self.out_dir,
        }

    @staticmethod
    def from_json_dict(data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - {"experiment", "seed", "params", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigError("config is missing 'experiment'")
        experiment = data["experiment"]
        if experiment not in _PARAM_TYPES:
            raise ConfigError(f"unknown experiment: {experiment!r}")
        params_cls = _PARAM_TYPES[experiment]
        raw_params = data.get("params") or {}
        if not isinstance(raw_params, dict):
            raise ConfigError("'params' must be a JSON object")
        names = {f.name for f in dataclasses.fields(params_cls)}
        unknown = set(raw_params) - names
        if unknown:
            raise ConfigError(f"unknown parameters for {experiment}: {sorted(unknown)}")
        kwargs = {k: _tuplify(v) for k, v in raw_params.items()}
        try:
            params = params_cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad parameters for {experiment}: {exc}") from exc
        return ExperimentConfig(
            experiment=experiment,
            seed=int(data.get("seed", 0)),
            params=params,
            out_dir=data.get("out_dir"),
        )

    def fingerprint(self) -> str:
        payload = {
            "experiment": self.experiment,
            "seed": self.seed,
            "params": dataclasses.asdict(self.params),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json_dict(data)


# ---------------------------------------------------------------------------
# run records


@dataclass
class MetricTable:
    """One CSV worth of metrics; first column is a strictly increasing step."""

    name: str
    header: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def validate(self) -> None:
        if not self.header or self.header[0] != "step":
            raise ValueError(f"table {self.name}: first column must be 'step'")
        last = None
        for row in self.rows:
            if len(row) != len(self.header):
                raise ValueError(f"table {self.name}: row width != header width")
            step = row[0]
            if last is not None and step <= last:
                raise ValueError(f"table {self.name}: steps not strictly increasing")
            last = step


@dataclass
class RunRecord:
    """Everything an experiment produced, ready to be written out."""

    config: ExperimentConfig
    tables: dict[str, MetricTable] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    star_checkpoints: dict[str, StarParams] = field(default_factory=dict)
    divergence_counts: dict[str, int] = field(default_factory=dict)
    all_diverged: bool = False
    wall_clock_s: float = 0.0

    def add_table(self, name: str, header: tuple[str, ...]) -> MetricTable:
        if name in self.tables:
            raise ValueError(f"duplicate table: {name}")
        table = MetricTable(name=name, header=header)
        self.tables[name] = table
        return table


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    text = str(value)
    if any(ch in text for ch in ",\n\r\""):
        raise ValueError(f"cell value needs quoting, refusing: {text!r}")
    return text


def write_csv(path: Path, table: MetricTable) -> None:
    table.validate()
    lines = [",".join(table.header)]
    lines.extend(",".join(_format_cell(v) for v in row) for row in table.rows)
    path.write_text("\n".join(lines) + "\n", newline="\n")


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_run(record: RunRecord, out_dir: Path, threads: int) -> None:
    """Materialize a run: config, metrics, reports, checkpoints, meta.

    Everything except meta.json is a pure function of (config, seed), so a
    rerun overwrites with identical bytes. Wall clock and thread count live
    only in meta.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # out_dir is the file's own location; recording it would break byte
    # identity between reruns written to different directories.
    config_payload = record.config.to_json_dict()
    config_payload.pop("out_dir", None)
    (out_dir / "config.json").write_text(_json_text(config_payload))
    for name, table in sorted(record.tables.items()):
        write_csv(out_dir / f"{name}.csv", table)
    for name, payload in sorted(record.reports.items()):
        (out_dir / f"{name}.json").write_text(_json_text(payload))
    if record.star_checkpoints:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for name, params in sorted(record.star_checkpoints.items()):
            save_params(params, ckpt_dir / f"{name}.json")
    meta = {
        "config_fingerprint": record.config.fingerprint(),
        "experiment": record.config.experiment,
        "wall_clock_s": record.wall_clock_s,
        "threads": threads,
        "divergence_counts": record.divergence_counts,
        "all_diverged": record.all_diverged,
    }
    (out_dir / "meta.json").write_text(_json_text(meta))
