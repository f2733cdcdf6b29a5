"""Hyperparameters and the flat ``section.key = value`` config format.

Defaults are the full-scale settings (224x224 images, 768-d features,
batch 32, 60 epochs). ``configs/toy.cfg`` holds the desk-scale overrides.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed config text, unknown keys or invalid values."""


@dataclass
class ModelConfig:
    dim: int = 768
    image_size: int = 224
    patch_size: int = 16
    max_len: int = 100
    vocab_size: int = 0  # filled from the vocabulary at data-prep time
    encoder_layers: int = 2
    encoder_heads: int = 1
    mlp_ratio: int = 4
    refine_layers: int = 1
    pfm_heads: int = 1
    pfm_depth: int = 1
    pfm_stages: int = 2  # 0 = baseline, 1 = DRAM only, 2 = DRAM + SRAM
    ekfr: bool = True
    # per-channel normalization applied after [0,1] scaling; empty = none
    pixel_mean: tuple[float, ...] = ()
    pixel_std: tuple[float, ...] = ()


@dataclass
class LossConfig:
    lambda1: float = 1.8
    lambda2: float = 0.2
    share_id_classifier: bool = False
    eps: float = 1e-8


@dataclass
class EkfrConfig:
    renormalize_same_id: bool = False


@dataclass
class OptimConfig:
    epochs: int = 60
    lr_encoders: float = 1e-5
    lr_other: float = 1e-4
    decay_epochs: tuple[int, ...] = (20, 30, 40)
    decay_factor: float = 0.1
    warmup_epochs: int = 1
    warmup_start: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    P: int = 16
    K: int = 2
    steps_per_epoch: int = 0  # 0 = ceil(train pairs / batch_size)
    flip: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    log_every: int = 1


@dataclass
class DataConfig:
    manifest: str = ""
    root: str = ""  # image root; empty = manifest directory
    train_split: str = "train"
    eval_split: str = "test"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ekfr: EkfrConfig = field(default_factory=EkfrConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        m, t, l = self.model, self.train, self.loss
        if t.P * t.K != t.batch_size:
            raise ConfigError(
                f"train.P * train.K must equal train.batch_size ({t.P}*{t.K} != {t.batch_size})"
            )
        if t.lr_encoders <= 0 or t.lr_other <= 0:
            raise ConfigError("learning rates must be positive")
        if l.lambda1 < 0 or l.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if m.image_size % m.patch_size:
            raise ConfigError("model.image_size must be divisible by model.patch_size")
        if m.pfm_depth < 1:
            raise ConfigError("model.pfm_depth must be >= 1")
        if m.pfm_stages not in (0, 1, 2):
            raise ConfigError("model.pfm_stages must be 0, 1 or 2")
        if m.dim % m.encoder_heads or m.dim % m.pfm_heads:
            raise ConfigError("model.dim must be divisible by the head counts")
        if len(m.pixel_mean) != len(m.pixel_std) or len(m.pixel_mean) not in (0, 3):
            raise ConfigError("model.pixel_mean/pixel_std must both be empty or have 3 entries")
        if t.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                set_value(cfg, f"{section}.{key}", value)
        return cfg

    def flat_items(self) -> list[tuple[str, Any]]:
        out = []
        for sec in dataclasses.fields(self):
            sub = getattr(self, sec.name)
            for f in dataclasses.fields(sub):
                out.append((f"{sec.name}.{f.name}", getattr(sub, f.name)))
        return out

    def dumps(self) -> str:
        return "\n".join(f"{k} = {_format(v)}" for k, v in self.flat_items()) + "\n"


ALIASES = {
    "λ1": "loss.lambda1",
    "λ2": "loss.lambda2",
    "lambda1": "loss.lambda1",
    "lambda2": "loss.lambda2",
}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _field_type(cfg: TrainConfig, key: str):
    key = ALIASES.get(key, key)
    if key.count(".") != 1:
        raise ConfigError(f"config key must look like section.key: {key!r}")
    section, name = key.split(".")
    sub = getattr(cfg, section, None)
    if sub is None or not dataclasses.is_dataclass(sub):
        raise ConfigError(f"unknown config section {section!r}")
    types = {f.name: f.type for f in dataclasses.fields(sub)}
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    return sub, name, types[name]


def _coerce(raw: Any, ftype: str, key: str) -> Any:
    if not isinstance(raw, str):
        if ftype.startswith("tuple"):
            return tuple(raw)
        return raw
    s = raw.strip()
    try:
        if ftype == "bool":
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if ftype == "int":
            return int(s)
        if ftype == "float":
            return float(s)
        if ftype == "str":
            return s
        if ftype.startswith("tuple"):
            elem = int if "int" in ftype else float
            return tuple(elem(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {ftype})") from None
    raise ConfigError(f"unsupported field type {ftype} for {key}")


def set_value(cfg: TrainConfig, key: str, raw: Any) -> None:
    sub, name, ftype = _field_type(cfg, key)
    setattr(sub, name, _coerce(raw, ftype, key))


def parse_config_text(text: str, cfg: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    cfg = cfg or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            set_value(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        parse_config_text(text, cfg, source=str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    cfg.validate()
    return cfg
