"""Experiment configuration: a versioned TOML document mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from prunedistill.errors import ParameterError
from prunedistill.pipeline import CycleConfig, DistillConfig, TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PRUNEDISTILL_OUTPUT_ROOT"
ARMS = ("fixed_small_lr", "one_cycle", "kesi", "single_teacher")
DISTILL_ARMS = ("kesi", "single_teacher")
DATASET_KINDS = ("blobs", "idx", "desk")
MODEL_KINDS = ("desknet", "plain_cnn", "mlp")


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    # idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    downsample: int = 1
    train_limit: int | None = None
    test_limit: int | None = None
    # desk: IDX files are written here on first use (relative to the output root)
    data_dir: str = "data/desk"
    # blobs
    num_classes: int = 3
    dim: int = 2
    samples_per_class: int = 100
    spread: float = 1.0
    test_fraction: float = 0.2
    data_seed: int = 0


@dataclass
class ModelConfig:
    kind: str = "mlp"
    widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    blocks_per_stage: int = 1
    hidden: list[int] = field(default_factory=lambda: [16])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"
    arms: list[str] = field(default_factory=lambda: ["fixed_small_lr", "one_cycle", "kesi"])
    distill_enabled: bool = True
    save_snapshots: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cycle: CycleConfig = field(default_factory=CycleConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    base_dir: str = "."  # directory relative dataset paths are resolved against

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def resolve_output_dir(self, override: str | None = None) -> Path:
        path = Path(override if override is not None else self.output_dir)
        if path.is_absolute():
            return path
        return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / path

    def data_path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ParameterError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ParameterError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**table)
    except TypeError as exc:
        raise ParameterError(f"[{where}]: {exc}") from None


def from_dict(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ParameterError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    sections = {}
    for name, cls in (("dataset", DatasetConfig), ("model", ModelConfig), ("train", TrainConfig),
                      ("cycle", CycleConfig)):
        sections[name] = _build(cls, doc.pop(name, {}), name)
    distill = dict(doc.pop("distill", {}))
    enabled = distill.pop("enabled", True)
    sections["distill"] = _build(DistillConfig, distill, "distill")
    top = _build(ExperimentConfig, doc, "top level")
    cfg = dataclasses.replace(top, distill_enabled=bool(enabled) and top.distill_enabled,
                              base_dir=str(base_dir), **sections)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParameterError(f"{path}: {exc}") from None
    return from_dict(doc, base_dir=str(path.parent))


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ParameterError("seeds must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ParameterError("seeds must be distinct")
    if not cfg.arms:
        raise ParameterError("arms must not be empty")
    bad = [a for a in cfg.arms if a not in ARMS]
    if bad:
        raise ParameterError(f"unknown arm(s) {bad}; choose from {ARMS}")
    ds = cfg.dataset
    if ds.kind not in DATASET_KINDS:
        raise ParameterError(f"dataset kind must be one of {DATASET_KINDS}")
    if ds.kind == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            value = getattr(ds, name)
            if not value or not cfg.data_path(value).is_file():
                raise ParameterError(f"dataset.{name} does not exist: {value!r}")
    if ds.downsample < 1:
        raise ParameterError("dataset.downsample must be >= 1")
    if cfg.model.kind not in MODEL_KINDS:
        raise ParameterError(f"model kind must be one of {MODEL_KINDS}")
    if cfg.model.kind == "mlp" and ds.kind != "blobs":
        raise ParameterError("the mlp model only takes flat (blobs) data")
    if cfg.model.kind != "mlp" and ds.kind == "blobs":
        raise ParameterError("convolutional models need image data")
    if cfg.train.epochs < 0:
        raise ParameterError("train.epochs must be >= 0")
