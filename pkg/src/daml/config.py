"""Hyperparameters, training schedule and the flat run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

import yaml

from .errors import ConfigError


@dataclass
class HyperParams:
    alpha: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.7
    lambda3: float = 1.2
    rho: float = 1.2
    eps: float = 0.6
    min_samples: int = 4
    P: int = 16
    K_per_id: int = 4
    temperature: float = 1.0
    prenormalize: bool = False
    smooth_update: bool = True
    init_normalize: bool = True
    cluster_repeat: int = 0
    cluster_erase: bool = True
    cluster_crop: bool = False

    def validate(self):
        for name in ("alpha", "rho", "eps", "temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.min_samples < 1 or self.P < 2 or self.K_per_id < 2:
            raise ConfigError("min_samples >= 1, P >= 2 and K_per_id >= 2 are required")
        if self.cluster_repeat < 0:
            raise ConfigError("cluster_repeat must be >= 0")
        return self


@dataclass
class TrainConfig:
    pretrain_epochs: int = 15
    adapt_epochs: int = 10
    lr_teacher: float = 1e-2
    lr_student: float = 8e-3
    # None: half of the pretraining rate
    adapt_lr_teacher: Optional[float] = None
    adapt_lr_student: Optional[float] = None
    weight_decay_teacher: float = 5e-4
    weight_decay_student: float = 1e-4
    momentum: float = 0.9
    milestones: tuple = (40, 70)
    gamma: float = 0.1
    pretrain_iters: Optional[int] = None
    seed: int = 0
    image_height: int = 256
    image_width: int = 128
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    eval_every: int = 1
    teacher_dim: int = 64
    student_dim: int = 48
    teacher_width: int = 16
    student_width: int = 48
    teacher_depth: int = 4
    student_depth: int = 4
    patch_size: int = 8

    def validate(self):
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        for name in ("lr_teacher", "lr_student", "image_height", "image_width", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.teacher_dim == self.student_dim:
            raise ConfigError("teacher_dim and student_dim must differ")
        self.milestones = tuple(int(m) for m in self.milestones)
        return self

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    @property
    def teacher_adapt_lr(self):
        return self.lr_teacher / 2 if self.adapt_lr_teacher is None else self.adapt_lr_teacher

    @property
    def student_adapt_lr(self):
        return self.lr_student / 2 if self.adapt_lr_student is None else self.adapt_lr_student


@dataclass
class DataConfig:
    source: Optional[str] = None
    target: Optional[str] = None
    n_ids: int = 20
    per_id: int = 8
    domain_shift: float = 0.6
    clutter: float = 0.5
    n_cams: int = 4


DESK_ENCODERS = {"image_height": 32, "image_width": 16, "teacher_width": 16,
                 "student_width": 32, "patch_size": 8, "student_depth": 2}


def desk_config(**overrides) -> TrainConfig:
    """Small-image settings used by the synthetic benchmark."""
    return TrainConfig(**{**DESK_ENCODERS, **overrides}).validate()


_SECTIONS = (HyperParams, TrainConfig, DataConfig)


def known_keys():
    return {f.name: cls for cls in _SECTIONS for f in fields(cls)}


def parse_value(cls, key, raw):
    """Coerce ``raw`` (string from the command line or a YAML scalar) to the field type."""
    default = next(f.default for f in fields(cls) if f.name == key)
    if isinstance(raw, str):
        try:
            raw = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {key}={raw!r}") from exc
    if raw is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(raw, bool):
                raise ValueError
            return raw
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(raw) if isinstance(raw, (list, tuple)) else (raw,)
        if key in ("adapt_lr_teacher", "adapt_lr_student", "pretrain_iters"):
            return float(raw) if key.startswith("adapt") else int(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config_file(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat key: value document")
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: nested section {key!r} not allowed (flat keys only)")
    return doc


def resolve(file_values=None, overrides=None, base_train=None):
    """Merge defaults < config file < overrides into (HyperParams, TrainConfig, DataConfig).

    Unknown keys raise ConfigError.
    """
    keys = known_keys()
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            key = key.replace("-", "_")
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = parse_value(keys[key], key, raw)
    hp = HyperParams(**{k: v for k, v in merged.items() if keys[k] is HyperParams})
    train_kw = {k: v for k, v in merged.items() if keys[k] is TrainConfig}
    if base_train is not None:
        train = dataclasses.replace(base_train, **train_kw)
    else:
        train = TrainConfig(**train_kw)
    data = DataConfig(**{k: v for k, v in merged.items() if keys[k] is DataConfig})
    return hp.validate(), train.validate(), data


def as_flat_dict(*sections):
    out = {}
    for section in sections:
        for key, value in dataclasses.asdict(section).items():
            out[key] = list(value) if isinstance(value, tuple) else value
    return out
