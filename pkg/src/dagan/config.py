"""Experiment configuration: dataclasses, profiles, overrides and canonical JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("R", "A", "M", "MC", "full")
# variant -> (aggregate connections, MAFM, CRM, adversarial training)
VARIANT_FLAGS = {
    "R": (False, False, False, False),
    "A": (True, False, False, False),
    "M": (True, True, False, False),
    "MC": (True, True, True, False),
    "full": (True, True, True, True),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "full"
    backbone: str = "tiny"
    tiny_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64, 64])
    proj_channels: int = 16
    stage6_channels: int = 512
    weights: str | None = None
    mafm_pool: str = "avg"
    mafm_reduction: int = 4
    crm_mlp_ratio: int = 4
    crm_pre_norm: bool = True
    decoder: str = "recursive"
    cond_disc: bool = False
    disc_channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    mean: list = field(default_factory=lambda: list(IMAGENET_MEAN))
    std: list = field(default_factory=lambda: list(IMAGENET_STD))

    @property
    def aggregate(self) -> bool:
        return VARIANT_FLAGS[self.variant][0]

    @property
    def use_mafm(self) -> bool:
        return VARIANT_FLAGS[self.variant][1]

    @property
    def use_crm(self) -> bool:
        return VARIANT_FLAGS[self.variant][2]

    @property
    def adversarial(self) -> bool:
        return VARIANT_FLAGS[self.variant][3]

    def validate(self):
        _check_choice("model.variant", self.variant, VARIANTS)
        _check_choice("model.backbone", self.backbone, ("tiny", "resnet50"))
        _check_choice("model.mafm_pool", self.mafm_pool, ("avg", "max"))
        _check_choice("model.decoder", self.decoder, ("recursive", "literal"))
        if len(self.tiny_channels) != 6:
            raise ConfigError("model.tiny_channels: need 6 stage widths")
        if len(self.disc_channels) != 4:
            raise ConfigError("model.disc_channels: need exactly 4 layer widths")
        _check_positive("model.proj_channels", self.proj_channels)


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    max_iter: int = 300
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    power: float = 0.9
    m_steps: int = 1
    adv_weight: float = 0.01
    rounds: int = 1
    tau: float = 0.8
    eval_every: int = 0
    augment: bool = True
    deterministic: bool = True

    def validate(self):
        _check_positive("train.base_lr", self.base_lr)
        if self.max_iter < 1:
            raise ConfigError("train.max_iter must be >= 1")
        _check_positive("train.batch_size", self.batch_size)
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"train.{name} must lie in (0, 1), got {v}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.m_steps < 1:
            raise ConfigError("train.m_steps must be >= 1")
        if self.rounds < 0:
            raise ConfigError("train.rounds must be >= 0")


@dataclass
class DataConfig:
    tile_size: int = 64
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    hflip: float = 0.5
    vflip: float = 0.5
    crop_scale: list = field(default_factory=lambda: [0.8, 1.0])

    def validate(self):
        _check_positive("data.tile_size", self.tile_size)
        if len(self.split) != 3 or any(r < 0 for r in self.split) or sum(self.split) <= 0:
            raise ConfigError("data.split: need three nonnegative ratios with a positive sum")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("data.crop_scale: need 0 < lo <= hi <= 1")


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def variant(self) -> str:
        return self.model.variant

    def validate(self) -> "ExperimentConfig":
        _check_choice("profile", self.profile, ("desk", "paper"))
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def fingerprint(self) -> str:
        """Hash of everything that determines the parameter layout."""
        model = dataclasses.asdict(self.model)
        model.pop("weights")
        blob = json.dumps(model, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        _apply(cfg, data, prefix="")
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def profile(name: str) -> ExperimentConfig:
    """``desk``: tiny backbone, 300 iterations, batch 4. ``paper``: ResNet-50, 80000, batch 16."""
    cfg = ExperimentConfig(profile=name)
    if name == "paper":
        cfg.model.backbone = "resnet50"
        cfg.model.proj_channels = 128
        cfg.model.weights = "IMAGENET1K_V1"
        cfg.train.max_iter = 80000
        cfg.train.batch_size = 16
        cfg.train.eval_every = 445
        cfg.data.tile_size = 256
    elif name != "desk":
        raise ConfigError(f"unknown profile {name!r}; choose desk or paper")
    return cfg.validate()


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        cursor = node
        parts = key.strip().split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
        _apply(cfg, node, prefix="")
    return cfg.validate()


def _apply(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, prefix=path + ".")
        else:
            setattr(obj, key, _coerce(path, current, value))


def _coerce(path, current, value):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigError(f"{name}: {value!r} not in {list(choices)}")


def _check_positive(name, value):
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
