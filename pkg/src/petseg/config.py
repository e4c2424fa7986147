"""Experiment configuration: one YAML file capturing every stage's knobs.

Unknown keys are rejected so typos fail loudly instead of silently using a
default. CLI flags override file values (flags win).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .losses import LossWeights
from .nets import CoarseUNetConfig, RefinerConfig
from .training import OptimConfig, TrainLoopConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = "data"
    output_root: str = "runs"


@dataclass(frozen=True)
class SeedsConfig:
    global_seed: int = 0


@dataclass(frozen=True)
class PhantomCohortConfig:
    count: int = 40
    shape: tuple[int, int, int] = (96, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    n_lesions_range: tuple[int, int] = (1, 4)
    negative_fraction: float = 0.25
    lesion_radius_range: tuple[float, float] = (7.0, 14.0)
    lesion_suv_range: tuple[float, float] = (6.0, 20.0)
    include_hot_organs: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("phantom count must be >= 1")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ConfigError("negative_fraction must be in [0, 1]")
        lo, hi = self.n_lesions_range
        if not 0 <= lo <= hi:
            raise ConfigError("n_lesions_range must be a non-empty non-negative interval")


@dataclass(frozen=True)
class SplitConfig:
    k: int = 15
    test_fraction: float = 0.1
    n_members: int = 4
    train_folds_per_member: int | None = None


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = 0.5
    overlap: float = 0.5
    coarse_spacing_mm: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must be in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    phantom: PhantomCohortConfig = field(default_factory=PhantomCohortConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    coarse_net: CoarseUNetConfig = field(default_factory=CoarseUNetConfig)
    refiner_net: RefinerConfig = field(default_factory=RefinerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loop: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


_SECTION_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_SECTION_CLASSES = {
    "paths": PathsConfig,
    "seeds": SeedsConfig,
    "phantom": PhantomCohortConfig,
    "split": SplitConfig,
    "augment": AugmentConfig,
    "coarse_net": CoarseUNetConfig,
    "refiner_net": RefinerConfig,
    "optim": OptimConfig,
    "loop": TrainLoopConfig,
    "loss": LossWeights,
    "pipeline": PipelineConfig,
}


def _coerce(value: Any, target: Any) -> Any:
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    return value


def _build_section(cls, mapping: dict, section: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    kwargs = {k: _coerce(v, None) for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' config: {exc}") from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Build an ExperimentConfig from a YAML file; None loads pure defaults."""
    if path is None:
        return ExperimentConfig()
    payload = yaml.safe_load(Path(path).read_text())
    if payload is None:
        return ExperimentConfig()
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(payload) - set(_SECTION_CLASSES)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    kwargs = {
        name: _build_section(cls, payload[name], name)
        for name, cls in _SECTION_CLASSES.items()
        if name in payload
    }
    return ExperimentConfig(**kwargs)


def dump_config(config: ExperimentConfig) -> str:
    """YAML text of a config (tuples rendered as lists)."""

    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        if isinstance(obj, (list, dict, str, int, float, bool)) or obj is None:
            return obj
        return str(obj)

    return yaml.safe_dump(plain(config), sort_keys=False)
