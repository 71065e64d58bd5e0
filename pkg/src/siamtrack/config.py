"""Experiment configuration: one YAML document composing every module's knobs.

Sections map 1:1 onto the dataclasses they configure; unknown keys are
rejected so typos fail fast, and the resolved config is echoed into every
run directory for reproducibility.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .decode import SelectConfig
from .geometry import CropSizes
from .model import BackboneConfig, LossWeights
from .perturb import SweepConfig
from .synthdata import SamplerConfig
from .trackeval import EvalConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneGroup:
    kind: str                         # easy | hard | drift
    count: int
    num_frames: int = 40
    tags: tuple = ()

    def __post_init__(self):
        if self.kind not in ("easy", "hard", "drift"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass(frozen=True)
class ScenesConfig:
    frame_width: int = 192
    frame_height: int = 160
    groups: tuple = (
        SceneGroup(kind="easy", count=10, tags=("train", "easy")),
        SceneGroup(kind="hard", count=5, tags=("train", "hard")),
        SceneGroup(kind="easy", count=6, tags=("eval", "easy")),
        SceneGroup(kind="hard", count=6, tags=("eval", "hard")),
        SceneGroup(kind="drift", count=4, tags=("eval", "drift")),
    )

    def frame_size(self) -> tuple:
        return (self.frame_width, self.frame_height)


@dataclass(frozen=True)
class ExperimentConfig:
    crops: CropSizes = field(default_factory=CropSizes)
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    select: SelectConfig = field(default_factory=SelectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTION_TYPES = {
    "crops": CropSizes,
    "scenes": ScenesConfig,
    "sampler": SamplerConfig,
    "model": BackboneConfig,
    "loss": LossWeights,
    "select": SelectConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "train": TrainConfig,
}


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        if cls is ScenesConfig and key == "groups":
            value = tuple(_from_dict(SceneGroup, g, f"{where}.groups[{i}]")
                          for i, g in enumerate(value))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    unknown = sorted(set(data) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            sections[name] = _from_dict(cls, data[name] or {}, name)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from e
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj
    return convert(cfg)


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Echo the fully-resolved config (defaults included) next to run outputs."""
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def override_train(cfg: ExperimentConfig, variant=None, seed=None,
                   total_steps=None) -> ExperimentConfig:
    train = cfg.train
    if variant is not None:
        train = replace(train, variant=variant)
    if seed is not None:
        train = replace(train, seed=seed)
    if total_steps is not None:
        train = replace(train, total_steps=total_steps)
    return replace(cfg, train=train)
