"""Experiment configuration: a single YAML file drives every run.

Every hyperparameter has an explicit key with a documented default; the
canonical JSON form of the science-relevant fields is hashed so that runs
land in a directory named after what was actually executed (execution
details such as the output directory or the worker count do not change
the hash).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import yaml

from .errors import ConfigurationError
from .model import PredictorConfig
from .stream import TaskSpec, TaskStream, default_benchmark
from .trainer import TRAINER_KINDS, HyperParams

EVAL_ROLES = ("working", "fast", "slow")


@dataclass(frozen=True)
class StreamConfig:
    """Where the task stream comes from.

    kind "synthetic" builds the rotation benchmark; kind "csv" takes one
    table per task.
    """

    kind: str = "synthetic"
    n_tasks: int = 8
    n_train: int = 2000
    n_test: int = 500
    seed: int = 7
    noise_scale: float = 1.0
    csv_paths: tuple[str, ...] = ()
    csv_stride: int = 1
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigurationError(f"unknown stream kind {self.kind!r}")
        if self.kind == "synthetic" and self.n_tasks < 1:
            raise ConfigurationError("n_tasks must be >= 1")
        if self.kind == "csv" and not self.csv_paths:
            raise ConfigurationError("csv stream needs at least one path")

    def build(self) -> TaskStream:
        if self.kind == "synthetic":
            return default_benchmark(n_train=self.n_train, n_test=self.n_test,
                                     seed=self.seed, noise_scale=self.noise_scale,
                                     n_tasks=self.n_tasks)
        specs = [
            TaskSpec(task_id=i, kind="csv", csv_path=p,
                     csv_stride=self.csv_stride,
                     test_fraction=self.test_fraction)
            for i, p in enumerate(self.csv_paths)
        ]
        return TaskStream(specs=specs, seed=self.seed)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything run_experiment needs, with validated invariants."""

    trainers: tuple[str, ...] = ("dualls",)
    seeds: tuple[int, ...] = (0,)
    buffer_total: int = 1000
    reservoir_fraction: float = 0.5
    hyper: HyperParams = field(default_factory=HyperParams)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    goals_k: int = 6
    eval_role: str = "slow"
    out_dir: str = "runs"
    workers: int = 1
    save_checkpoints: bool = False
    score_batch: int = 8
    composition_every: int = 25

    def __post_init__(self):
        if not self.trainers:
            raise ConfigurationError("at least one trainer kind is required")
        for kind in self.trainers:
            if kind not in TRAINER_KINDS:
                raise ConfigurationError(
                    f"unknown trainer kind {kind!r}; expected one of {TRAINER_KINDS}")
        if len(set(self.trainers)) != len(self.trainers):
            raise ConfigurationError("trainer kinds must be unique")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.buffer_total < 0:
            raise ConfigurationError("buffer_total must be >= 0")
        if not (0.0 <= self.reservoir_fraction <= 1.0):
            raise ConfigurationError("reservoir_fraction must be in [0, 1]")
        if self.goals_k < 1 or self.goals_k > self.predictor.n_cells:
            raise ConfigurationError(
                f"goals_k must be in [1, {self.predictor.n_cells}]")
        if self.eval_role not in EVAL_ROLES:
            raise ConfigurationError(
                f"eval_role must be one of {EVAL_ROLES}, got {self.eval_role!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.score_batch < 1:
            raise ConfigurationError("score_batch must be >= 1")
        if self.composition_every < 0:
            raise ConfigurationError("composition_every must be >= 0")
        if self.stream.kind == "synthetic":
            total_train = self.stream.n_tasks * self.stream.n_train
            if self.buffer_total > total_train // 2:
                raise ConfigurationError(
                    f"buffer_total {self.buffer_total} must stay well below the "
                    f"stream's {total_train} training samples (at most half)")

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainers"] = list(self.trainers)
        d["seeds"] = list(self.seeds)
        d["predictor"]["hidden"] = list(self.predictor.hidden)
        d["stream"]["csv_paths"] = list(self.stream.csv_paths)
        return d

    def config_hash(self) -> str:
        """12-hex digest of the canonical science-relevant fields."""
        d = self.to_dict()
        for runtime_key in ("out_dir", "workers", "save_checkpoints"):
            d.pop(runtime_key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        kwargs: dict[str, Any] = {}
        nested = {"hyper": HyperParams, "predictor": PredictorConfig,
                  "stream": StreamConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for name, sub_cls in nested.items():
            if name in raw:
                sub_raw = raw.pop(name) or {}
                sub_known = {f.name for f in fields(sub_cls)}
                sub_unknown = set(sub_raw) - sub_known
                if sub_unknown:
                    raise ConfigurationError(
                        f"unknown {name} keys: {sorted(sub_unknown)}")
                for key in ("hidden", "csv_paths"):
                    if key in sub_raw and isinstance(sub_raw[key], list):
                        sub_raw[key] = tuple(sub_raw[key])
                kwargs[name] = sub_cls(**sub_raw)
        for key in ("trainers", "seeds"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        kwargs.update(raw)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigurationError(f"bad config value: {e}") from e

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as f:
                raw = yaml.safe_load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config is not valid YAML: {e}") from e
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a mapping")
        return cls.from_dict(raw)

    def to_yaml(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)
