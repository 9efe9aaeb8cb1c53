"""Run configuration: a JSON document with network / training / inference /
data sections. Defaults follow the published training recipe."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .network import NetworkSpec, PathwaySpec

WHOLE_STRUCTURE_ITERATIONS = 2500
SUBREGION_ITERATIONS = 3000


class ConfigError(ValueError):
    pass


@dataclass
class NetworkSection:
    num_classes: int = 3
    pathways: str = "dual"
    fusion_width: int = 150
    dropout: float = 0.3
    prelu_init: float = 0.25
    local_widths: list = field(default_factory=lambda: list(PathwaySpec.paper_local().widths))
    global_widths: list = field(default_factory=lambda: list(PathwaySpec.paper_global().widths))
    global_dilations: list = field(default_factory=lambda: list(PathwaySpec.paper_global().dilations))

    def to_spec(self) -> NetworkSpec:
        return NetworkSpec(
            num_classes=self.num_classes,
            pathways=self.pathways,
            local=PathwaySpec("local", self.local_widths, [1] * len(self.local_widths)),
            global_=PathwaySpec("global", self.global_widths, self.global_dilations),
            fusion_width=self.fusion_width,
            dropout=self.dropout,
            prelu_init=self.prelu_init,
        )


@dataclass
class TrainingSection:
    learning_rate: float = 0.001
    batch_size: int = 11
    max_iterations: int | None = None  # None: 2500 for 3 classes, 3000 otherwise
    output_extent: int = 7
    augment: bool = True
    max_rotation_deg: float = 10.0
    scale_range: list = field(default_factory=lambda: [0.8, 1.2])
    augment_probability: float = 0.5
    seed: int = 0
    validation_interval: int = 250

    def iterations(self, num_classes: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return WHOLE_STRUCTURE_ITERATIONS if num_classes <= 3 else SUBREGION_ITERATIONS


@dataclass
class InferenceSection:
    mc_samples: int = 20
    tile_extent: int = 105


@dataclass
class DataSection:
    train_images: list = field(default_factory=list)
    train_labels: list = field(default_factory=list)
    val_image: str | None = None
    val_labels: str | None = None
    test_image: str | None = None
    test_labels: str | None = None


@dataclass
class RunConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"network": NetworkSection, "training": TrainingSection,
                    "inference": InferenceSection, "data": DataSection}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        for name, kind in sections.items():
            sub = d.get(name, {}) or {}
            allowed = {f.name for f in fields(kind)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            kw[name] = kind(**sub)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path):
        Path(path).write_text(self.to_json())

    def validate(self):
        t = self.training
        try:
            self.network.to_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if t.learning_rate <= 0 or t.batch_size < 1 or t.output_extent < 1:
            raise ConfigError("learning rate, batch size and output extent must be positive")
        if t.max_iterations is not None and t.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if t.validation_interval < 1:
            raise ConfigError("validation_interval must be >= 1")
        lo, hi = t.scale_range
        if not 0 < lo <= 1 <= hi:
            raise ConfigError("scale range must bracket 1")
        if self.inference.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if len(self.data.train_images) != len(self.data.train_labels):
            raise ConfigError("need one label file per training image")
