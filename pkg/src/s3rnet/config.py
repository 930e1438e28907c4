"""Run configuration: one JSON document with {model, train, data, run}
sections, strictly validated (unknown keys are rejected), plus the config
hash that every output file embeds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _strict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad '{section}' section: {exc}") from exc


@dataclass
class ModelSection:
    """Architecture knobs; band counts and scale come from the dataset."""

    base_channels: int = 32
    depths: tuple[int, int, int, int] = (4, 4, 6, 6)
    growth: int = 16
    groups: int = 4
    reduction: int = 2
    group_size: int = 2
    attention_tile: int = 64

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)

    def to_model_config(self, bands: int, msi_bands: int, scale: int) -> ModelConfig:
        return ModelConfig(bands=bands, msi_bands=msi_bands, scale=scale,
                           **{f.name: getattr(self, f.name) for f in fields(self)})


@dataclass
class DataSection:
    scenes: int = 4
    size: int = 64          # HR spatial extent (square scenes)
    bands: int = 16
    msi_bands: int = 4
    scale: int = 4
    endmembers: int = 4
    spectral_smoothness: float = 4.0
    blob_scale: float = 8.0

    def __post_init__(self):
        if self.scenes < 1 or self.size < 1:
            raise ConfigError("data.scenes and data.size must be >= 1")
        if self.scale < 1:
            raise ConfigError("data.scale must be >= 1")
        if self.size % self.scale:
            raise ConfigError(
                f"data.size {self.size} not divisible by data.scale {self.scale}"
            )
        if self.msi_bands > self.bands:
            raise ConfigError("data.msi_bands cannot exceed data.bands")


@dataclass
class RunSection:
    seed: int = 0
    out: str | None = None
    threads: int | None = None


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"model", "train", "data", "run"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_strict(ModelSection, doc.get("model", {}), "model"),
            train=_strict(TrainConfig, doc.get("train", {}), "train"),
            data=_strict(DataSection, doc.get("data", {}), "data"),
            run=_strict(RunSection, doc.get("run", {}), "run"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model"]["depths"] = list(self.model.depths)
        return doc

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def echo(self, out_dir) -> Path:
        """Write the merged config next to the run outputs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.to_dict()
        doc["config_hash"] = self.config_hash()
        path = out / "config.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path
