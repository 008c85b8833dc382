"""Merged run configuration for the CLI: one JSON document drives a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

from .field import FieldConfig
from .training import TrainConfig
from .unet import UNetConfig


@dataclass
class RunConfig:
    field: FieldConfig = dc_field(default_factory=FieldConfig.desk)
    unet: UNetConfig = dc_field(default_factory=UNetConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    seed: int = 0
    deterministic: bool = True
    threads: int = 0  # 0 = leave BLAS threading alone

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        return RunConfig(
            field=FieldConfig(**d.get("field", {})),
            unet=UNetConfig(**d.get("unet", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            seed=int(d.get("seed", 0)),
            deterministic=bool(d.get("deterministic", True)),
            threads=int(d.get("threads", 0)),
        )

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
