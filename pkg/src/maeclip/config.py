"""Run configuration: a flat ``key = value`` file expanded into model and training configs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .model import MAECLIPConfig
from .nn import ConfigError, TransformerConfig

MODES = ("mae_clip", "clip", "masked_clip")


@dataclass
class TrainConfig:
    steps: int = 300
    warmup_steps: int = 20
    local_contrastive_steps: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    batch_size: int = 8
    world_size: int = 1
    w_i: float = 0.1
    w_t: float = 0.05
    local_phase_weights: str = "sum"      # "sum": (1, 1) while local, "weighted": (w_i, w_t) throughout
    mode: str = "mae_clip"
    masking: str = "similarity"           # or "random"
    similarity_highest: bool = True
    norm_pix_loss: bool = True
    augment: bool = False
    crop_scale_min: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps >= self.steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be < steps ({self.steps})")
        if self.world_size < 1:
            raise ConfigError("world_size must be >= 1")
        if self.batch_size % self.world_size:
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by world_size {self.world_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.masking not in ("similarity", "random"):
            raise ConfigError(f"masking must be 'similarity' or 'random', got {self.masking!r}")
        if self.local_phase_weights not in ("sum", "weighted"):
            raise ConfigError("local_phase_weights must be 'sum' or 'weighted'")
        if self.w_i < 0 or self.w_t < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class RunConfig:
    """Every configurable key; file keys map one-to-one onto these fields."""

    # model
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    image_depth: int = 2
    image_width: int = 64
    image_heads: int = 4
    text_depth: int = 2
    text_width: int = 64
    text_heads: int = 4
    decoder_depth: int = 2
    decoder_width: int = 64
    decoder_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 260
    max_seq: int = 64
    embed_dim: int = 64
    pooling: str = "map"
    temperature_init: float = 0.07
    max_inverse_temperature: float = 100.0
    mask_ratio: float = 0.75
    text_mask_ratio: float = 0.75
    dtype: str = "float64"
    # training
    steps: int = 300
    warmup_steps: int = 20
    local_contrastive_steps: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    batch_size: int = 8
    world_size: int = 1
    w_i: float = 0.1
    w_t: float = 0.05
    local_phase_weights: str = "sum"
    mode: str = "mae_clip"
    masking: str = "similarity"
    similarity_highest: bool = True
    norm_pix_loss: bool = True
    augment: bool = False
    crop_scale_min: float = 0.6
    seed: int = 0

    def model_config(self) -> MAECLIPConfig:
        return MAECLIPConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=self.channels,
            image_encoder=TransformerConfig(self.image_depth, self.image_width, self.image_heads, self.mlp_ratio),
            text_encoder=TransformerConfig(self.text_depth, self.text_width, self.text_heads, self.mlp_ratio,
                                           vocab_size=self.vocab_size, max_seq=self.max_seq),
            decoder=TransformerConfig(self.decoder_depth, self.decoder_width, self.decoder_heads, self.mlp_ratio),
            embed_dim=self.embed_dim,
            pooling=self.pooling,
            temperature_init=self.temperature_init,
            max_inverse_temperature=self.max_inverse_temperature,
            mask_ratio=self.mask_ratio,
            text_mask_ratio=self.text_mask_ratio,
            loss_weights=(self.w_i, self.w_t),
            dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self) -> "RunConfig":
        self.model_config()
        self.train_config()
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(kind, raw: str, key: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = dataclasses.asdict(base or RunConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "preset":
            values = dataclasses.asdict(load_preset(value))
            continue
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _parse_value(types[key], value, key)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


PRESETS = ("desk-overfit", "desk-small", "paper-cc", "paper-web")


def load_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("maeclip").joinpath("presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    return parse_config(text)


def resolve_config(spec: str) -> RunConfig:
    """A preset name or a path to a config file."""
    if spec in PRESETS:
        return load_preset(spec)
    return load_config(spec)
