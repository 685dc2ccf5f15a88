"""Run configuration: one YAML document with a section per component.

Unknown keys are rejected and every value is validated before any work
starts. ``dump(load(text))`` is stable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .benchmark_splits import SplitSpec
from .mask_sampler import SamplingStrategy, mask_counts
from .pointcloud_io import SynthConfig
from .task_targets import WindowConfig
from .voxel_grid import GridConfig

# initial learning rate for full-scale Waymo pre-training; the desk-scale
# default below is much larger because runs are a few hundred steps long
FULL_SCALE_LR = 5e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    weight_decay: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    r_p: float = 0.1
    r_s: float = 0.05
    strategy: str = "rfvs"
    seed: int = 0
    threads: int = 1
    point_hidden: int = 32
    dim: int = 32
    num_blocks: int = 2
    num_heads: int = 4
    ffn_mult: int = 2
    head_hidden: int = 32
    num_recon_points: int = 15

    def __post_init__(self):
        ints = ("epochs", "batch_size", "threads", "point_hidden", "dim", "num_heads",
                "ffn_mult", "head_hidden", "num_recon_points")
        for name in ints:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.lr_max < 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.weight_decay < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("weight_decay, alpha and beta must be non-negative")
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        SamplingStrategy.parse(self.strategy)
        mask_counts(1, self.r_p, self.r_s)


@dataclass(frozen=True)
class SynthRunConfig:
    """How many synthetic sequences and frames ``synth`` writes."""

    sequences: int = 3
    frames_per_sequence: int = 5
    scene: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.sequences < 1 or self.frames_per_sequence < 1:
            raise ValueError("sequences and frames_per_sequence must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    window: WindowConfig = field(default_factory=lambda: WindowConfig(4, 4, 1))
    train: TrainConfig = field(default_factory=TrainConfig)
    splits: SplitSpec = field(default_factory=SplitSpec)
    synth: SynthRunConfig = field(default_factory=SynthRunConfig)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path, defaults=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls() if defaults is None else defaults
    for name, value in data.items():
        default = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub, default)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            kwargs[name] = bool(value)
        elif isinstance(default, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{sub}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{sub}: expected a number, got {value!r}")
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def override(cfg: RunConfig, dotted: dict) -> RunConfig:
    """Apply ``{"train.r_p": 0.2, ...}`` style overrides with full validation."""
    data = to_dict(cfg)
    for key, value in dotted.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = value
    return from_dict(data)
