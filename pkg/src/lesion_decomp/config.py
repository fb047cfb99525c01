"""Declarative run configuration.

A run is described by one YAML (or JSON) file whose top-level sections map
onto the package's config dataclasses::

    seed: 0
    out_dir: runs/default
    phantom:    PhantomSpec fields
    arch:       ArchConfig fields
    train:      TrainConfig fields (with a nested ``loss`` section)
    eval:       EvalSettings fields
    classifier: ClassifierConfig fields

Every field has a default; unknown keys are rejected with the offending key
path in the message.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .baselines import ClassifierConfig
from .errors import ConfigError
from .evaluation import DEFAULT_DICE_GRID, DEFAULT_N_THRESHOLDS
from .losses import LossConfig
from .model import ArchConfig
from .phantom import PhantomSpec
from .trainer import TrainConfig

ABLATIONS = ("no_normal_fidelity", "no_lesion_decoder", "no_discriminator")

# Desk-scale corpus: 400 normal + 200 lesioned for training, 50 normal and
# 100 annotated lesioned images held out for testing.
DEFAULT_PHANTOM = PhantomSpec(n_normal=450, n_lesioned=300, n_test_normal=50, n_test_lesioned=100)
DEFAULT_ARCH = ArchConfig(base_channels=16, depth=4, critic_channels=8, image_size=64)


@dataclass(frozen=True)
class EvalSettings:
    target_size: int = 64
    n_thresholds: int = DEFAULT_N_THRESHOLDS
    dice_grid: Tuple[float, ...] = DEFAULT_DICE_GRID
    ablations: Tuple[str, ...] = ABLATIONS
    save_heatmaps: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dice_grid", tuple(float(t) for t in self.dice_grid))
        object.__setattr__(self, "ablations", tuple(self.ablations))
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation variant(s): {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    phantom: PhantomSpec = DEFAULT_PHANTOM
    arch: ArchConfig = DEFAULT_ARCH
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def train_config(self) -> TrainConfig:
        """Training settings with the run seed applied."""
        return dataclasses.replace(self.train, seed=self.seed)

    def classifier_config(self) -> ClassifierConfig:
        return dataclasses.replace(self.classifier, seed=self.seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


_SECTIONS = {
    "phantom": PhantomSpec,
    "arch": ArchConfig,
    "train": TrainConfig,
    "eval": EvalSettings,
    "classifier": ClassifierConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Dict[str, Any], prefix: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + '.' + key if prefix else key!r}")
    values = dataclasses.asdict(base) if base is not None else {}
    values = {k: v for k, v in values.items() if k in names}
    values.update(data)
    if cls is TrainConfig:
        loss = values.get("loss", {})
        if isinstance(loss, dict):
            values["loss"] = _build(LossConfig, loss, f"{prefix}.loss",
                                    base=(base.loss if base is not None else None))
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {prefix!r}: {exc}") from exc


def config_from_dict(data: Optional[Dict[str, Any]]) -> RunConfig:
    data = dict(data or {})
    default = RunConfig()
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown config key {key!r}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.get(name, {}) or {}, name, base=getattr(default, name))
    for name in ("seed", "out_dir"):
        if name in data:
            kwargs[name] = data[name]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a config file (optional) and apply dotted-key overrides on top."""
    data: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p} must hold a mapping at top level")
    for dotted, value in (overrides or {}).items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {k!r} is not a section")
        node[keys[-1]] = value
    return config_from_dict(data)
