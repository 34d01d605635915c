"""Run configuration: a strict JSON schema for every command.

Every section maps onto a dataclass.  Unknown keys are rejected with the
offending dotted key named, so typos fail before any compute starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import DiffConfig
from .segnet import SegConfig
from .training import DiffTrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_frames: int = 8
    res: int = 32
    actions: tuple = ("push_left", "push_right", "pick_up", "put_down", "stir")
    count: int = 8

    def __post_init__(self):
        self.actions = tuple(self.actions)
        if self.n_frames < 1 or self.res < 16:
            raise ConfigError("world.n_frames must be >= 1 and world.res >= 16")


@dataclass
class InferConfig:
    ddim_steps: int = 20
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    segnet: SegConfig = field(default_factory=SegConfig)
    diffusion: DiffConfig = field(default_factory=DiffConfig)
    train_seg: TrainConfig = field(default_factory=TrainConfig)
    train_diff1: DiffTrainConfig = field(default_factory=DiffTrainConfig)
    train_diff2: DiffTrainConfig = field(default_factory=DiffTrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix} must be an object")
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown config key {prefix}.{k}" if prefix else f"unknown config key {k}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for k in data:
        if k not in _SECTIONS:
            raise ConfigError(f"unknown config key {k}")
    kwargs = {}
    for name, f in _SECTIONS.items():
        if name not in data:
            continue
        if name == "seed":
            if not isinstance(data[name], int):
                raise ConfigError("seed must be an integer")
            kwargs[name] = data[name]
        else:
            kwargs[name] = _build(f.default_factory, data[name], name)
    return RunConfig(**kwargs)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)
