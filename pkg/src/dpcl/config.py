"""Experiment configuration.

Configs are nested dataclasses loaded from YAML or JSON. Every key is
validated before any work starts; unknown keys raise ``ConfigError``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    num_classes: int = 8
    images_per_class: int = 50
    resolution: int = 64
    folds: int = 4
    way: int = 1
    shot: int = 1
    # probability of a second object of another class in an image
    distractor_prob: float = 0.0


@dataclass
class AugConfig:
    crop_prob: float = 0.5
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    grayscale_prob: float = 0.5
    blur_prob: float = 0.5
    jitter_strength: float = 0.2
    crop_scale: tuple[float, float] = (0.5, 1.0)
    blur_sigma: tuple[float, float] = (0.1, 1.0)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stem_width: int = 16
    stem_stride: int = 2
    widths: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (2, 2, 2)
    # layer tags 2, 3, 4 name the three stages (ResNet layer2..layer4 analog)
    taps: tuple[int, ...] = (2, 3, 4)
    proj_dim: int = 32


@dataclass
class DictConfig:
    capacity: int = 512


@dataclass
class CSNCEConfig:
    num_negatives: int = 256


@dataclass
class CANCEConfig:
    num_negatives: int = 1000
    group_size: int = 5


@dataclass
class NCEConfig:
    temperature: float = 0.05
    momentum: float = 0.999
    lambda_cs: float = 0.02
    lambda_ca: float = 0.015
    cscl: bool = True
    cacl: bool = True


@dataclass
class TrainerConfig:
    seed: int = 0
    fold: int = 0
    max_iterations: int = 2000
    batch_size: int = 1
    lr: float = 1e-3
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 20.0
    align: bool = True
    loss_resolution: str = "feature"
    checkpoint_every: int = 500
    dtype: str = "float32"


@dataclass
class EvalConfig:
    episodes: int = 200
    seed: int = 1234


@dataclass
class ExperimentConfig:
    run_name: str = "dpcl"
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dictionary: DictConfig = field(default_factory=DictConfig)
    csnce: CSNCEConfig = field(default_factory=CSNCEConfig)
    canece: CANCEConfig = field(default_factory=CANCEConfig)
    nce: NCEConfig = field(default_factory=NCEConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def use_cscl(self) -> bool:
        return self.nce.cscl and self.nce.lambda_cs > 0

    @property
    def use_cacl(self) -> bool:
        return self.nce.cacl and self.nce.lambda_ca > 0

    def validate(self) -> None:
        d, t, n = self.data, self.trainer, self.nce
        if d.num_classes < 4:
            raise ConfigError("data.num_classes must be >= 4")
        if not 0 <= t.fold < d.folds:
            raise ConfigError(f"trainer.fold={t.fold} outside [0, {d.folds})")
        if d.way < 1 or d.shot < 1:
            raise ConfigError("data.way and data.shot must be >= 1")
        if not 0 <= n.momentum < 1:
            raise ConfigError("nce.momentum must lie in [0, 1)")
        if n.temperature <= 0 or t.alpha <= 0:
            raise ConfigError("nce.temperature and trainer.alpha must be > 0")
        if t.loss_resolution not in ("feature", "image"):
            raise ConfigError("trainer.loss_resolution must be 'feature' or 'image'")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError("trainer.dtype must be 'float32' or 'float64'")
        if t.batch_size < 1 or t.max_iterations < 0:
            raise ConfigError("trainer.batch_size >= 1 and trainer.max_iterations >= 0 required")
        if not set(self.encoder.taps) <= {2, 3, 4} or not self.encoder.taps:
            raise ConfigError("encoder.taps must be a nonempty subset of {2, 3, 4}")
        if len(self.encoder.widths) != 3 or len(self.encoder.strides) != 3:
            raise ConfigError("encoder.widths and encoder.strides need exactly 3 entries")
        for name, p in dataclasses.asdict(self.aug).items():
            if name.endswith("_prob") and not 0 <= p <= 1:
                raise ConfigError(f"aug.{name} must be a probability")
        if self.dictionary.capacity <= 0 or self.canece.group_size <= 0:
            raise ConfigError("dict.capacity and canece.group_size must be positive")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["dict"] = out.pop("dictionary")
        return _listify(out)

    def hash(self) -> str:
        """Digest of everything that changes the training trajectory."""
        d = self.to_dict()
        for key in ("run_name", "out_dir", "eval"):
            d.pop(key)
        d["trainer"].pop("max_iterations")
        d["trainer"].pop("checkpoint_every")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# key in files -> attribute name
_ALIASES = {"dict": "dictionary"}


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _coerce(value, tp, where: str):
    origin = get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = get_args(tp)
        inner = args[0]
        if args[-1] is not Ellipsis and len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(v, inner, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = _ALIASES.get(key, key) if not prefix else key
        where = f"{prefix}{key}"
        if attr not in names:
            raise ConfigError(f"unknown config key {where!r}")
        tp = hints[attr]
        if dataclasses.is_dataclass(tp):
            kwargs[attr] = _build(tp, value, f"{key}.")
        else:
            kwargs[attr] = _coerce(value, tp, where)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(raw or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def override(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Return a copy with ``section={key: value}`` overrides applied."""
    raw = cfg.to_dict()
    for section, values in sections.items():
        key = "dict" if section == "dictionary" else section
        if isinstance(values, dict):
            raw[key].update(_listify(values))
        else:
            raw[key] = values
    return config_from_dict(raw)
