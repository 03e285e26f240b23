"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected at every level. String values may reference
environment variables (``$DATA_ROOT/cifar``); they are expanded on load.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .attacks import NORMS
from .classifier import CalibrationConfig
from .data import DATASETS, SPLITS
from .errors import ConfigurationError
from .evaluation import ATTACKS
from .interpret import EXTRACTORS
from .models import ARCHITECTURES
from .training import TrainConfig, config_hash

ABLATION_AXES = ("calibration", "capacity", "weight-decay", "perturbation-size", "augmentation", "in-out-at")
SELECT_METRICS = ("clean-auroc", "adv-auroc", "clean-acc", "adv-acc", "last")


@dataclass
class DatasetConfig:
    name: str = "digits28"
    root: Optional[str] = None
    classes: Optional[list] = None
    val_size: Optional[float] = None
    val_seed: int = 0
    val_from_test: bool = False
    limit_per_class: Optional[int] = None
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.name not in DATASETS:
            raise ConfigurationError(f"unknown dataset id {self.name!r}; expected one of {DATASETS}")

    def load_kwargs(self) -> dict:
        return {"classes": self.classes, "val_size": self.val_size, "val_seed": self.val_seed,
                "val_from_test": self.val_from_test, "limit_per_class": self.limit_per_class, **self.options}


@dataclass
class SplitConfig:
    """Which split each stage reads."""
    select: str = "val"
    calibrate: str = "val"
    evaluate: str = "test"

    def validate(self, val_from_test: bool):
        for stage, split in asdict(self).items():
            if split not in SPLITS:
                raise ConfigurationError(f"split for {stage!r} must be one of {SPLITS}, got {split!r}")
        if self.evaluate == "train":
            raise ConfigurationError("evaluation split overlaps the training split")
        if not val_from_test and self.evaluate in (self.select, self.calibrate):
            raise ConfigurationError("model selection/calibration split overlaps the evaluation split; "
                                     "set dataset.val_from_test to opt into that protocol")


@dataclass
class EvalConfig:
    norm: str = "L2"
    epsilon: float = 0.5
    steps: int = 20
    step_size: Optional[float] = None
    restarts: int = 1
    eps_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 1.5, 2.0])
    generative_attacks: list = field(default_factory=lambda: ["adaptive", "ce"])
    seed: int = 0
    batch_size: int = 512

    def validate(self):
        if self.norm not in NORMS:
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0 or any(e < 0 for e in self.eps_grid):
            raise ConfigurationError("attack budgets need epsilon >= 0")
        if list(self.eps_grid) != sorted(self.eps_grid):
            raise ConfigurationError("eps_grid must be sorted ascending")
        bad = [a for a in self.generative_attacks if a not in ATTACKS]
        if bad:
            raise ConfigurationError(f"unknown attacks {bad}")


@dataclass
class GenerationAttack:
    steps: int = 10
    step_size: float = 1.0
    epsilon: Optional[float] = None  # None -> steps * step_size

    def validate(self):
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigurationError("attack budgets need epsilon >= 0")
        if self.steps < 0 or self.step_size <= 0:
            raise ConfigurationError("generation attacks need steps >= 0 and step_size > 0")

    @property
    def label(self) -> str:
        eps = self.steps * self.step_size if self.epsilon is None else self.epsilon
        return f"L2-steps{self.steps}-size{self.step_size:g}-eps{eps:g}"


@dataclass
class ExtractorConfig:
    id: str = "trained-classifier-penultimate"
    arch: str = "smallcnn"
    epochs: int = 15
    lr: float = 0.02
    batch_size: int = 32
    weights_path: Optional[str] = None

    def validate(self):
        if self.id not in EXTRACTORS:
            raise ConfigurationError(f"unknown feature extractor {self.id!r}; expected one of {EXTRACTORS}")
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")


@dataclass
class InterpretConfig:
    attacks: list = field(default_factory=lambda: [GenerationAttack(7, 1.0), GenerationAttack(10, 1.0)])
    n_per_class: int = 64
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    seed: int = 0
    grid_rows: int = 8

    def validate(self):
        for a in self.attacks:
            a.validate()
        self.extractor.validate()


@dataclass
class AblationConfig:
    axis: Optional[str] = None
    values: list = field(default_factory=list)
    class_index: int = 0
    eval_eps: float = 0.5
    eval_steps: int = 20

    def validate(self):
        if self.axis is not None and self.axis not in ABLATION_AXES:
            raise ConfigurationError(f"unknown ablation axis {self.axis!r}; expected one of {ABLATION_AXES}")
        if self.eval_eps < 0:
            raise ConfigurationError("attack budgets need epsilon >= 0")
        if self.axis == "capacity":
            bad = [v for v in self.values if v not in ARCHITECTURES]
            if bad:
                raise ConfigurationError(f"unknown architecture ids {bad}")
        if self.axis in ("perturbation-size", "in-out-at") and any(float(v) < 0 for v in self.values):
            raise ConfigurationError("attack budgets need epsilon >= 0")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    heads: TrainConfig = field(default_factory=TrainConfig)
    lr_overrides: dict = field(default_factory=dict)
    select_metric: str = "adv-auroc"
    baseline: Optional[TrainConfig] = field(default_factory=lambda: TrainConfig(eps_out=0.5))
    baseline_select_metric: str = "adv-acc"
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.splits.validate(self.dataset.val_from_test)
        self.heads.validate()
        if self.baseline is not None:
            self.baseline.validate()
        for m in (self.select_metric, self.baseline_select_metric):
            if m not in SELECT_METRICS:
                raise ConfigurationError(f"unknown selection metric {m!r}")
        for k, lr in self.lr_overrides.items():
            if not isinstance(k, int) or lr <= 0:
                raise ConfigurationError(f"bad learning-rate override {k!r}: {lr!r}")
        self.eval.validate()
        self.interpret.validate()
        self.ablation.validate()
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.as_dict())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.heads.seed = seed
        if cfg.baseline is not None:
            cfg.baseline.seed = seed
        return cfg


# ---------------------------------------------------------------- parsing

_NESTED = {
    ExperimentConfig: {"dataset": DatasetConfig, "splits": SplitConfig, "heads": TrainConfig,
                       "baseline": TrainConfig, "calibration": CalibrationConfig, "eval": EvalConfig,
                       "interpret": InterpretConfig, "ablation": AblationConfig},
    InterpretConfig: {"extractor": ExtractorConfig},
}
_LISTS = {(InterpretConfig, "attacks"): GenerationAttack}


def _expand(value):
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, list):
        return [_expand(v) for v in value]
    if isinstance(value, dict):
        return {k: _expand(v) for k, v in value.items()}
    return value


def _build(cls, data, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        item = _LISTS.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        elif item is not None:
            kwargs[key] = [_build(item, v, f"{where}.{key}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = _expand(copy.deepcopy(data or {}))
    if "lr_overrides" in data:
        data["lr_overrides"] = {int(k): float(v) for k, v in data["lr_overrides"].items()}
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config, or the ``manifest.json`` of an earlier run (its resolved config is reused)."""
    try:
        with open(path) as fh:
            data = (json.load(fh) if str(path).endswith(".json") else yaml.safe_load(fh)) or {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    if isinstance(data, dict) and "stages" in data and "config" in data:
        data = data["config"]
    if overrides:
        data = _merge(data, overrides)
    return config_from_dict(data)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True))


def to_plain(obj):
    if is_dataclass(obj):
        return asdict(obj)
    return obj
