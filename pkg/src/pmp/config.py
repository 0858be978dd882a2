"""Run configuration (JSON), with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import KINDS, ModelConfig


@dataclass
class TaskConfig:
    type: str = "whereami"
    params: dict = field(default_factory=dict)


@dataclass
class ModelSection:
    d_node: int = 50
    d_msg: int = 50
    hidden: int = 32
    K: int = 4
    T: int = 5
    d_target: int = 16
    beta: float = 1.0
    temperature: float = 1.0
    samples: int = 5
    dense: bool = True
    global_read: str = "mean"


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0


@dataclass
class ScheduleConfig:
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    patience: int = 20
    log_wall_time: bool = False


@dataclass
class MixedConfig:
    """``policy``: ``uniform`` draws t_switch from 0..floor(T/2) per instance; ``fixed`` uses ``t_switch``."""

    enabled: bool = True
    policy: str = "uniform"
    t_switch: int = 0


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mixed: MixedConfig = field(default_factory=MixedConfig)
    baseline: str = "pmp"

    def validate(self) -> "RunConfig":
        if self.baseline not in KINDS:
            raise ValueError(f"baseline must be one of {KINDS}, got {self.baseline!r}")
        if self.task.type not in ("whereami", "puzzle", "community"):
            raise ValueError(f"unknown task type {self.task.type!r}")
        for key in ("epochs", "batch_size", "patience"):
            if getattr(self.schedule, key) < 1:
                raise ValueError(f"schedule.{key} must be positive")
        if self.optim.lr <= 0 or self.optim.clip_norm <= 0:
            raise ValueError("optim.lr and optim.clip_norm must be positive")
        if self.mixed.policy not in ("uniform", "fixed"):
            raise ValueError(f"mixed.policy must be 'uniform' or 'fixed', got {self.mixed.policy!r}")
        if not 0 <= self.mixed.t_switch <= self.model.T:
            raise ValueError("mixed.t_switch must lie in 0..T")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(kind=self.baseline, **dataclasses.asdict(self.model))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
