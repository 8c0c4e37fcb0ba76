"""Declarative experiment configuration.

One YAML file with dataset / model / train / eval / ablation sections;
command-line flags override file values.  Everything is validated up front
so commands fail before touching the filesystem.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from . import distortions
from .model import (
    BackboneConfig,
    ConfigError,
    FULL_STAGE_CHANNELS,
    ModelConfig,
    TINY_STAGE_CHANNELS,
    VARIANTS,
)
from .training import TrainConfig

DEFAULT_TYPES = ["gaussian_blur", "white_noise", "jpeg", "block_corruption"]


@dataclass
class DatasetSection:
    corpus: Optional[str] = None
    manifest: Optional[str] = None
    types: list[str] = field(default_factory=lambda: list(DEFAULT_TYPES))
    levels: int = 4
    seed: int = 0
    make_corpus: int = 0
    corpus_side: int = 128

    def validate(self) -> None:
        if self.manifest is None and self.corpus is None:
            raise ConfigError("dataset section needs either 'corpus' or 'manifest'")
        if not self.types:
            raise ConfigError("dataset.types must be non-empty")
        for t in self.types:
            distortions.split_composite(t)
        if self.levels < 1:
            raise ConfigError("dataset.levels must be >= 1")
        if self.make_corpus < 0:
            raise ConfigError("dataset.make_corpus must be >= 0")
        if self.corpus_side < 32:
            raise ConfigError("dataset.corpus_side must be >= 32")


@dataclass
class EvalSection:
    n_splits: int = 10
    train_fraction: float = 0.8
    cross_set: Optional[str] = None

    def validate(self) -> None:
        if self.n_splits < 1:
            raise ConfigError("eval.n_splits must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("eval.train_fraction must be in (0, 1)")


@dataclass
class AblationSection:
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    optimizers: list[str] = field(default_factory=lambda: ["adam", "sgd"])
    patch_sizes: list[int] = field(default_factory=lambda: [128, 64, 32])
    deeper: bool = True
    seeds: int = 3

    def validate(self) -> None:
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"ablation variant {v!r} not one of {VARIANTS}")
        for opt in self.optimizers:
            if opt not in ("adam", "sgd"):
                raise ConfigError(f"ablation optimizer {opt!r} unknown")
        for p in self.patch_sizes:
            if p % 32 != 0 or p <= 0:
                raise ConfigError(f"ablation patch size {p} must be a positive multiple of 32")
        if self.seeds < 1:
            raise ConfigError("ablation.seeds must be >= 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> None:
        self.dataset.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.ablation.validate()

    def override_seed(self, seed: int) -> None:
        self.dataset.seed = seed
        self.model.seed = seed
        self.train.seed = seed


def _build_section(cls, data: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {label} option(s): {sorted(unknown)}")
    return cls(**data)


def _build_model_section(data: dict) -> ModelConfig:
    data = dict(data)
    scale = data.pop("scale", "full")
    if scale == "tiny":
        channels = list(TINY_STAGE_CHANNELS)
    elif scale == "full":
        channels = list(FULL_STAGE_CHANNELS)
    else:
        raise ConfigError(f"model.scale must be 'tiny' or 'full', got {scale!r}")
    backbone = BackboneConfig(
        stage_channels=data.pop("stage_channels", None) or channels,
        convs_per_stage=data.pop("convs_per_stage", None) or list(BackboneConfig().convs_per_stage),
        kernel_size=data.pop("kernel_size", 3),
        in_epsilon=data.pop("in_epsilon", 1e-5),
    )
    known = {"variant", "num_distortions", "patch_side", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
    return ModelConfig(backbone=backbone, **data)


def _build_train_section(data: dict) -> TrainConfig:
    data = dict(data)
    if "lambda" in data:
        data["lambda_"] = data.pop("lambda")
    return _build_section(TrainConfig, data, "train")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {"dataset", "model", "train", "eval", "ablation"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    cfg = ExperimentConfig(
        dataset=_build_section(DatasetSection, raw.get("dataset", {}), "dataset"),
        model=_build_model_section(raw.get("model", {})),
        train=_build_train_section(raw.get("train", {})),
        eval=_build_section(EvalSection, raw.get("eval", {}), "eval"),
        ablation=_build_section(AblationSection, raw.get("ablation", {}), "ablation"),
    )
    if cfg.model.num_distortions != len(cfg.dataset.types):
        # keep model head width in sync with the dataset unless explicitly set
        if "num_distortions" not in (raw.get("model") or {}):
            cfg.model.num_distortions = len(cfg.dataset.types)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        return config_from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
