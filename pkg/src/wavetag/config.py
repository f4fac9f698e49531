"""Run configuration files: a JSON object with data/model/train/eval parts.

Unknown keys are rejected at every level so typos fail loudly instead of
silently training with defaults. Command-line flags override file values,
and the fully resolved config (including the seed actually used) is echoed
into the run directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .audio_io import DEFAULT_CLIP_LEN, DEFAULT_SAMPLE_RATE
from .model import AttentionHeadConfig, ModelConfig
from .training import TrainConfig


class RunConfigError(ValueError):
    """Malformed run configuration (bad JSON, unknown keys, bad values)."""


def _section(cls, raw: dict, name: str):
    if not isinstance(raw, dict):
        raise RunConfigError(f"config section '{name}' must be an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise RunConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"invalid '{name}' section: {exc}") from exc


@dataclass
class DataSection:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    vocab: str | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE
    clip_len: int = DEFAULT_CLIP_LEN

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.clip_len <= 0:
            raise ValueError(f"clip_len must be positive, got {self.clip_len}")


@dataclass
class ModelSection:
    n_classes: int | None = None  # default: inferred from the vocabulary
    width_scale: float = 1.0
    attention_hidden: int = 600


@dataclass
class EvalSection:
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"eval batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RunConfig:
    """Parsed and validated run configuration."""

    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise RunConfigError(f"run config must be a JSON object, got {type(raw).__name__}")
        unknown = set(raw) - {"data", "model", "train", "eval"}
        if unknown:
            raise RunConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        try:
            train = TrainConfig.from_dict(raw.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise RunConfigError(f"invalid 'train' section: {exc}") from exc
        return cls(
            data=_section(DataSection, raw.get("data", {}), "data"),
            model=_section(ModelSection, raw.get("model", {}), "model"),
            train=train,
            eval=_section(EvalSection, raw.get("eval", {}), "eval"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = cls.from_dict(raw)
        cfg._base_dir = path.parent  # manifest paths resolve against the config file
        return cfg

    def resolve_path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        base = getattr(self, "_base_dir", Path("."))
        return p if p.is_absolute() else base / p

    def apply_overrides(self, **overrides) -> None:
        """Fold command-line flag values (flags win) into the config."""
        for name, value in overrides.items():
            if value is None:
                continue
            if name in ("seed", "strategy", "deterministic"):
                setattr(self.train, name, value)
                self.train.__post_init__()
            else:
                raise RunConfigError(f"unknown override {name!r}")

    def model_config(self, n_classes: int) -> ModelConfig:
        if self.model.n_classes is not None and self.model.n_classes != n_classes:
            raise RunConfigError(
                f"config says n_classes={self.model.n_classes} but the vocabulary has {n_classes}"
            )
        return ModelConfig(
            n_classes=n_classes,
            clip_len=self.data.clip_len,
            width_scale=self.model.width_scale,
            attention=AttentionHeadConfig(hidden=self.model.attention_hidden),
        )

    def resolved(self) -> dict:
        return {
            "data": {
                "train_manifest": self.data.train_manifest,
                "eval_manifest": self.data.eval_manifest,
                "vocab": self.data.vocab,
                "sample_rate": self.data.sample_rate,
                "clip_len": self.data.clip_len,
            },
            "model": {
                "n_classes": self.model.n_classes,
                "width_scale": self.model.width_scale,
                "attention_hidden": self.model.attention_hidden,
            },
            "train": self.train.to_dict(),
            "eval": {"batch_size": self.eval.batch_size},
        }
