"""Run configuration: a strict YAML mapping of nested sections.

Unknown keys are hard errors; ``--set section.key=value`` overrides parse
scalars through the same YAML loader. Serialization round-trips exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .head import HeadConfig
from .losses import LossWeights, RatioMode
from .scenes import SceneSpec


@dataclass
class SceneSection:
    image_h: int = 280
    image_w: int = 360
    foreground_fraction: float | list = 0.12
    max_objects: int = 80
    tolerance: float = 0.03
    noise_sigma: float = 0.1


@dataclass
class HeadSection:
    levels: int = 3
    channels: int = 64
    classes: int = 3
    stacked_layers: int = 4
    strides: list = field(default_factory=lambda: [8, 16, 32])
    groups: int = 8
    normalizer: str = "context_gn"
    inactive_fill: str = "context"
    tau: float = 1.0
    ratio_tau: float = 0.25


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0


@dataclass
class LossSection:
    alpha: float = 1.0
    beta: float = 10.0


@dataclass
class BenchSection:
    eval_scenes: int = 8
    repetitions: int = 50
    warmup: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    ratio_mode: str = "layerwise"
    figures: bool = True
    scene: SceneSection = field(default_factory=SceneSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # -- projections into the library types ---------------------------------

    def head_config(self) -> HeadConfig:
        h = self.head
        return HeadConfig(
            num_levels=h.levels, channels=h.channels, num_classes=h.classes,
            stacked_layers=h.stacked_layers, level_strides=tuple(h.strides),
            num_groups=h.groups, normalizer=h.normalizer,
            inactive_fill=h.inactive_fill, tau=h.tau, ratio_tau=h.ratio_tau,
            ratio_mode=RatioMode.parse(self.ratio_mode), seed=self.seed,
        )

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        fraction = tuple(s.foreground_fraction) if isinstance(s.foreground_fraction, list) \
            else float(s.foreground_fraction)
        return SceneSpec(
            image_hw=(s.image_h, s.image_w), channels=self.head.channels,
            num_classes=self.head.classes, foreground_fraction=fraction,
            max_objects=s.max_objects, tolerance=s.tolerance,
            noise_sigma=s.noise_sigma, seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.alpha, self.loss.beta)


_SECTIONS = {"scene": SceneSection, "head": HeadSection, "train": TrainSection,
             "loss": LossSection, "bench": BenchSection}


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            section_cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            section_fields = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(value) - section_fields
            if bad:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(bad)}")
            kwargs[key] = section_cls(**value)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def serialize(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"invalid YAML{where}: {exc}") from exc
    if data is None:
        data = {}
    return from_dict(data)


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` (or ``key=value``) assignments."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {key!r} in override {item!r}")
        node[parts[-1]] = value
    return from_dict(data)
