"""Run configuration: model + training hyperparameters + file locations."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import TrainConfig

# Paths that must exist when a run config is validated. ``out_dir`` is created on demand.
INPUT_PATHS = ("train_cache", "test_cache", "manifest", "checkpoint", "mesh", "embeddings")
PATH_KEYS = INPUT_PATHS + ("out_dir",)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        try:
            self.model.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown path keys: {sorted(unknown)}")
        if check_paths:
            missing = [f"{k}={v}" for k, v in self.paths.items() if k in INPUT_PATHS and not Path(v).exists()]
            if missing:
                raise ConfigError("missing paths: " + ", ".join(missing))
        return self

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "paths": dict(self.paths)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "paths"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cls(model, train, {k: str(v) for k, v in d.get("paths", {}).items()})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def override(self, model: dict | None = None, train: dict | None = None, paths: dict | None = None) -> "RunConfig":
        """Copy with non-None flag values applied on top."""
        model = {k: v for k, v in (model or {}).items() if v is not None}
        train = {k: v for k, v in (train or {}).items() if v is not None}
        paths = {k: str(v) for k, v in (paths or {}).items() if v is not None}
        return RunConfig(
            self.model.replace(**model) if model else self.model,
            dataclasses.replace(self.train, **train),
            {**self.paths, **paths},
        )
