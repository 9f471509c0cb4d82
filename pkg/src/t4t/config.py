"""Model presets and the flat ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Invalid configuration or input geometry."""


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple = (64, 128, 320, 512)
    stage_depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    ffn_expansion: tuple = (4, 4, 4, 2)
    first_patch: tuple = (7, 4, 3)  # kernel, stride, pad
    later_patch: tuple = (3, 2, 1)
    base_resolution: tuple = (512, 512)
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "heads", "sr_ratios", "ffn_expansion"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {getattr(self, name)}")
        for c, h in zip(self.stage_channels, self.heads):
            if c % h:
                raise ConfigError(f"stage channels {c} not divisible by heads {h}")

    @property
    def strides(self) -> tuple:
        return (4, 8, 16, 32)

    def stage_hw(self, h: int, w: int) -> list:
        return [(h // s, w // s) for s in self.strides]


@dataclass(frozen=True)
class TpmConfig:
    embed_dim: int = 64
    fusion_mode: str = "sum"
    heads: int = 1
    sr_ratios: tuple = (8, 4, 2, 1)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.fusion_mode not in ("sum", "concat"):
            raise ConfigError(f"fusion_mode must be sum or concat, got {self.fusion_mode!r}")
        if len(self.sr_ratios) != 4:
            raise ConfigError(f"sr_ratios needs 4 entries, got {self.sr_ratios}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tpm: TpmConfig = field(default_factory=TpmConfig)
    general_classes: int = 13
    trans_classes: int = 12
    dual_head: bool = True


def preset(tag: str, **overrides) -> ModelConfig:
    """Named model sizes; ``toy`` is the desk-scale training configuration."""
    if tag == "toy":
        enc = EncoderConfig(stage_channels=(8, 16, 24, 32), stage_depths=(2, 2, 2, 2), heads=(1, 2, 3, 4),
                            sr_ratios=(1, 1, 1, 1), ffn_expansion=(2, 2, 2, 2), base_resolution=(32, 32))
        tpm = TpmConfig(embed_dim=8, heads=1, sr_ratios=(1, 1, 1, 1))
        cfg = ModelConfig(enc, tpm, general_classes=4, trans_classes=4)
    elif tag == "tiny":
        cfg = ModelConfig()
    elif tag == "small":
        cfg = ModelConfig(EncoderConfig(stage_depths=(3, 4, 6, 3)))
    elif tag == "medium":
        cfg = ModelConfig(EncoderConfig(stage_depths=(3, 4, 18, 3)))
    else:
        raise ConfigError(f"unknown model tag {tag!r}")
    if overrides:
        cfg = apply_model_overrides(cfg, overrides)
    return cfg


_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
_TPM_KEYS = {f"tpm_{f.name}" for f in fields(TpmConfig)}
_MODEL_KEYS = {"general_classes", "trans_classes", "dual_head"}


def apply_model_overrides(cfg: ModelConfig, overrides: dict) -> ModelConfig:
    enc_kw = {k: v for k, v in overrides.items() if k in _ENCODER_KEYS}
    tpm_kw = {k[4:]: v for k, v in overrides.items() if k in _TPM_KEYS}
    model_kw = {k: v for k, v in overrides.items() if k in _MODEL_KEYS}
    unknown = set(overrides) - _ENCODER_KEYS - _TPM_KEYS - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    return dataclasses.replace(
        cfg,
        encoder=dataclasses.replace(cfg.encoder, **enc_kw),
        tpm=dataclasses.replace(cfg.tpm, **tpm_kw),
        **model_kw,
    )


@dataclass
class RunConfig:
    """Everything a CLI run needs, serialisable as flat ``key=value`` text.

    Keys: ``model``, ``model.<encoder or tpm_ field>``, training fields,
    the four decision thresholds, and paths. Tuples render comma-separated.
    """

    model: str = "toy"
    model_overrides: dict = field(default_factory=dict)
    lr: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 50
    batch_size: int = 4
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    head_schedule: str = "joint"
    seed: int = 0
    theta_obstacle_m: float = 1.0
    theta_trans: float = 0.5
    theta_walkable: float = 0.4
    cycle_frames: int = 20
    min_valid_depth_fraction: float = 0.10
    min_object_area_fraction: float = 0.01
    dataset_dir: Optional[str] = None
    output_dir: Optional[str] = None

    def model_config(self) -> ModelConfig:
        return preset(self.model, **self.model_overrides)

    def decision_config(self):
        from .decision import DecisionConfig

        return DecisionConfig(
            theta_obstacle_m=self.theta_obstacle_m,
            theta_trans=self.theta_trans,
            theta_walkable=self.theta_walkable,
            cycle_frames=self.cycle_frames,
            min_valid_depth_fraction=self.min_valid_depth_fraction,
            min_object_area_fraction=self.min_object_area_fraction,
        )

    # -- text form ----------------------------------------------------------
    def render(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "model_overrides":
                for k in sorted(self.model_overrides):
                    lines.append(f"model.{k}={_fmt(self.model_overrides[k])}")
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name}={_fmt(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def set(self, key: str, value: str) -> None:
        """Apply one textual override, converting to the field's type."""
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in _ENCODER_KEYS | _TPM_KEYS | _MODEL_KEYS:
                raise ConfigError(f"unknown model key {name!r}")
            self.model_overrides[name] = _parse_model_value(name, value)
            return
        types = {f.name: f.type for f in fields(self)}
        if key not in types or key == "model_overrides":
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(RunConfig(), key)
        setattr(self, key, _convert(key, value, current))


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, value: str, current):
    try:
        if isinstance(current, bool):
            return _parse_bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


def _parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(value)


def _parse_model_value(name: str, value: str):
    if name == "tpm_fusion_mode":
        return value
    if name == "dual_head":
        return _parse_bool(value)
    try:
        parts = [int(p) for p in value.split(",")]
    except ValueError as exc:
        raise ConfigError(f"model.{name}: cannot parse {value!r}") from exc
    default = getattr(EncoderConfig(), name, None)
    if default is None:
        default = getattr(TpmConfig(), name[4:], None) if name.startswith("tpm_") else None
    if isinstance(default, tuple):
        return tuple(parts)
    if len(parts) != 1:
        raise ConfigError(f"model.{name}: expected a single integer, got {value!r}")
    return parts[0]
