"""Run configuration: nested dataclasses, YAML round trip and stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .estimator import EstimatorConfig
from .evaluation import EvalConfig
from .losses import LossConfig

RUN_ROOT_ENV = "PHOTOSKETCH_RUN_ROOT"


@dataclass
class ScheduleConfig:
    encoder_epochs: int = 1300
    estimator_epochs: int = 1200
    estimator_lr: float = 0.003
    freeze_encoder: bool = True
    joint: bool = False
    synthetic_supervision: bool = False
    checkpoint_every: int = 50


@dataclass
class OptimConfig:
    optimizer: str = "sgd"  # sgd | adam
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256
    cosine: bool = True
    grad_clip: Optional[float] = 1.0  # global gradient-norm bound for the estimator phase; None disables


@dataclass
class DataConfig:
    corpus_root: Optional[str] = None
    benchmark: Optional[str] = None
    raw_annotations: Optional[str] = None
    exclude: Optional[str] = None
    categories: Optional[list[str]] = None  # restrict to these categories (desk scale)
    holdout_n: int = 0
    holdout_seed: int = 0
    max_photos: Optional[int] = None


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run_root: Optional[str] = None

    def validate(self) -> None:
        self.encoder.validate(self.optim.batch_size)
        self.loss.validate()
        self.eval.validate()
        if self.encoder.learning_rate <= 0 or self.schedule.estimator_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.schedule.encoder_epochs < 0 or self.schedule.estimator_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.optim.grad_clip is not None and self.optim.grad_clip <= 0:
            raise ValueError("optim.grad_clip must be positive or null")
        if self.optim.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optim.optimizer!r}")
        if self.estimator.stages and min(self.estimator.stages) < 1:
            raise ValueError("estimator stages are 1-based")

    def resolved_run_root(self) -> Path:
        return Path(os.environ.get(RUN_ROOT_ENV) or self.run_root or "runs")


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def _build(tp, value):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value or {})
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _build(args[0], value)
    if origin is tuple:
        return tuple(value)
    if origin is list:
        return list(value) if value is not None else None
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def from_dict(cls, data: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: _build(hints[k], v) for k, v in data.items()})


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML)."""
    for item in overrides or []:
        key, _, raw = item.partition("=")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = to_dict(RunConfig())
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        data = _merge(data, loaded)
    data = apply_overrides(data, overrides or [])
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def _merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def config_hash(cfg: Any) -> str:
    payload = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
