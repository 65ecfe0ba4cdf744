from enum import Enum
from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# --- Constants ---
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2
# Nonlinearity after IN in encoders and generators (discriminators use LeakyReLU).
ENCODER_ACTIVATION = "relu"
DICE_EPS = 1e-6
ADAM_EPS = 1e-8
DATA_RANGE = 1.0
PSNR_CAP_DB = 100.0
FIXED_STYLE_VALUE = 0.5
# Network-space value of a missing domain: a zero image in [0, 1] storage space.
MISSING_FILL = -1.0


# --- Errors ---
class RemicError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(RemicError):
    pass


class ShapeError(RemicError, ValueError):
    pass


class GraphError(RemicError):
    pass


class DatasetError(RemicError):
    pass


class CorruptFileError(RemicError):
    pass


class CheckpointError(RemicError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class NonFiniteError(RemicError, FloatingPointError):
    pass


class UndefinedMetricError(RemicError, ValueError):
    pass


class ProtocolError(RemicError, ValueError):
    pass


# --- Enums ---
class NormMode(Enum):
    IN = "in"
    ADAIN = "adain"


class SegMode(Enum):
    OFF = "off"
    SEPARATE = "separate"
    JOINT = "joint"


class SegInput(Enum):
    ZERO_FILLED = "zero_filled"
    COMPLETED = "completed"


class MaskMode(Enum):
    UNIFORM_K = "uniform_k"
    FIXED_K = "fixed_k"
    SINGLE_MISSING = "single_missing"


class StyleKind(Enum):
    FIXED = "fixed"
    SAMPLE = "sample"
    ENCODED = "encoded"


class Baseline(Enum):
    ZERO = "zero"
    AVERAGE = "average"
    NN = "nn"
    ORACLE = "oracle"


# --- Config models ---
class ModelConfig(BaseModel):
    """Network sizes. Defaults are the desk-scale configuration."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_domains: int = Field(3, ge=2)
    image_size: int = Field(32, ge=16)
    content_channels: int = Field(64, ge=4)
    num_res_blocks: int = Field(2, ge=1)
    style_dim: int = Field(8, ge=1)
    mlp_dim: int = Field(256, ge=1)
    disc_channels: int = Field(16, ge=1)
    disc_layers: int = Field(4, ge=1)
    disc_scales: int = Field(2, ge=1)
    num_classes: int = Field(2, ge=1)
    seg_mode: SegMode = SegMode.OFF
    seg_input: SegInput = SegInput.COMPLETED
    init_seed: int = 0

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ModelConfig":
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.content_channels % 4:
            raise ValueError(f"content_channels must be divisible by 4, got {self.content_channels}")
        halvings = 2 ** (self.disc_scales - 1)
        if self.image_size % halvings:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {halvings} "
                f"to be halved between {self.disc_scales} discriminator scales"
            )
        smallest = 2 ** (self.disc_layers + self.disc_scales - 1)
        if self.image_size < smallest:
            raise ValueError(
                f"image_size {self.image_size} is below the {smallest} pixels needed by "
                f"{self.disc_layers} discriminator layers at {self.disc_scales} scales"
            )
        return self

    @property
    def base_channels(self) -> int:
        return self.content_channels // 4

    @classmethod
    def full_size(cls, num_domains: int = 4, image_size: int = 256, **overrides: Any) -> "ModelConfig":
        """Full-size architecture: 256-channel content code, 4 residual blocks, 3 scales."""
        values = dict(
            num_domains=num_domains,
            image_size=image_size,
            content_channels=256,
            num_res_blocks=4,
            disc_channels=64,
            disc_scales=3,
        )
        values.update(overrides)
        return cls(**values)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_adv: float = Field(1.0, ge=0.0)
    lambda_x_cyc: float = Field(10.0, ge=0.0)
    lambda_c_cyc: float = Field(1.0, ge=0.0)
    lambda_s_cyc: float = Field(1.0, ge=0.0)
    lambda_rec: float = Field(20.0, ge=0.0)
    lambda_seg: float = Field(1.0, ge=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    batch_size: int = Field(1, ge=1)
    iterations: int = Field(2000, ge=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    mask_mode: MaskMode = MaskMode.UNIFORM_K
    mask_k: int = Field(1, ge=1)
    mask_domain: int = Field(0, ge=0)
    multi_sample: bool = False
    update_discriminators: bool = True
    seed: int = 0
    checkpoint_every: int = Field(500, ge=0)
    log_every: int = Field(100, ge=1)
    deterministic: bool = True
    impute: Baseline | None = None

    @field_validator("impute")
    @classmethod
    def _check_impute(cls, value: Baseline | None) -> Baseline | None:
        if value is Baseline.ORACLE:
            raise ValueError("impute must be zero, average or nn; oracle would train on the hidden images")
        return value


class DomainStyle(BaseModel):
    """Intensity transform that renders the shared scene in one domain."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(1.0, gt=0.0)
    invert: bool = False
    texture_amp: float = Field(0.0, ge=0.0)
    texture_freq: float = Field(3.0, gt=0.0)
    edge_weight: float = Field(0.0, ge=0.0)


DEFAULT_DOMAIN_STYLES = (
    DomainStyle(),
    DomainStyle(gamma=0.6, invert=True, edge_weight=0.2),
    DomainStyle(gamma=1.4, texture_amp=0.08, texture_freq=4.0),
    DomainStyle(invert=True, texture_amp=0.05, texture_freq=2.5, edge_weight=0.4),
)


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_domains: int = Field(3, ge=2)
    image_size: int = Field(32, ge=16)
    num_train: int = Field(64, ge=0)
    num_test: int = Field(16, ge=0)
    num_classes: int = Field(2, ge=2, le=4)
    seed: int = 0
    style_params: tuple[DomainStyle, ...] | None = None

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.style_params is not None and len(self.style_params) != self.num_domains:
            raise ValueError(
                f"style_params has {len(self.style_params)} entries for {self.num_domains} domains"
            )
        return self

    def domain_styles(self) -> tuple[DomainStyle, ...]:
        if self.style_params is not None:
            return self.style_params
        styles = []
        for i in range(self.num_domains):
            base = DEFAULT_DOMAIN_STYLES[i % len(DEFAULT_DOMAIN_STYLES)]
            cycle = i // len(DEFAULT_DOMAIN_STYLES)
            styles.append(base.model_copy(update={"gamma": base.gamma * (1.0 + 0.15 * cycle)}))
        return tuple(styles)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


# --- Config files ---
MODEL_KEYS = frozenset(ModelConfig.model_fields)
WEIGHT_KEYS = frozenset(LossWeights.model_fields)
TRAIN_KEYS = frozenset(TrainConfig.model_fields) - {"weights"}


def parse_config(values: dict[str, str | None]) -> RunConfig:
    """Split a flat KEY=VALUE mapping into model, loss-weight and training configs."""
    unknown = sorted(set(values) - MODEL_KEYS - WEIGHT_KEYS - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    empty = sorted(key for key, value in values.items() if value is None or value == "")
    if empty:
        raise ConfigError(f"Config keys without a value: {', '.join(empty)}")

    model_values = {k: v for k, v in values.items() if k in MODEL_KEYS}
    weight_values = {k: v for k, v in values.items() if k in WEIGHT_KEYS}
    train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    try:
        return RunConfig(
            model=ModelConfig(**model_values),
            train=TrainConfig(weights=LossWeights(**weight_values), **train_values),
        )
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"Invalid value for '{location}': {first['msg']}") from e


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config(dict(dotenv_values(path, interpolate=False)))


def dump_config(config: RunConfig) -> str:
    """Render a RunConfig back into the KEY=VALUE file format, one key per line."""
    flat: dict[str, Any] = {}
    flat.update(config.model.model_dump(mode="json"))
    flat.update(config.train.weights.model_dump(mode="json"))
    flat.update(config.train.model_dump(mode="json", exclude={"weights"}))
    # Unset optional keys are left out; parse_config restores them as None.
    return "".join(f"{key}={_format_value(value)}\n" for key, value in flat.items() if value is not None)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
