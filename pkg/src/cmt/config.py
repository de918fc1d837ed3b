"""Configuration for model architecture, data generation, and training.

Defaults are desk scale: every dimension small enough that finite-difference
gradient checks and exhaustive oracles stay fast. Production-size widths
(768-dim streams, fine-tuning learning rates) remain reachable via
``TrainConfig.finetune_preset`` and explicit field overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any

from .errors import ConfigError

DEFAULT_LABELS = (
    "anger", "contempt", "disgust", "fear",
    "happiness", "sadness", "surprise", "neutral",
)


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    out_channels: int


@dataclass(frozen=True)
class ModelConfig:
    # Visual stream
    image_height: int = 16
    image_width: int = 16
    image_channels: int = 1
    patch_size: int = 4
    d_v: int = 32
    visual_blocks: int = 2

    # Acoustic stream
    audio_samples: int = 256
    sample_rate: float = 256.0
    conv_layers: tuple[ConvLayer, ...] = (
        ConvLayer(4, 2, 32),
        ConvLayer(4, 2, 32),
        ConvLayer(4, 2, 32),
    )
    d_a: int = 32
    audio_blocks: int = 2

    # Text stream
    vocab_size: int = 64
    max_text_len: int = 8
    d_t: int = 32
    text_blocks: int = 2

    # Shared
    embed_dim: int = 32          # D: fusion-space width all streams project to
    num_heads: int = 4
    mlp_ratio: int = 4           # MLP hidden width = ratio * stream width
    dropout: float = 0.1
    num_classes: int = 8
    labels: tuple[str, ...] = DEFAULT_LABELS

    # Fusion extensions (residual+norm around fusion attention, learned
    # modality-type embeddings); both on by default, toggleable for tests.
    fusion_type_embeddings: bool = True
    fusion_residual_norm: bool = True

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible "
                f"by patch size {self.patch_size}"
            )
        for name, width in (("d_v", self.d_v), ("d_a", self.d_a),
                            ("d_t", self.d_t), ("embed_dim", self.embed_dim)):
            if width % self.num_heads:
                raise ConfigError(
                    f"{name}={width} not divisible by num_heads={self.num_heads}"
                )
        if not self.conv_layers:
            raise ConfigError("at least one conv layer required")
        if self.conv_layers[-1].out_channels != self.d_a:
            raise ConfigError(
                f"last conv layer out_channels {self.conv_layers[-1].out_channels} "
                f"must equal d_a {self.d_a}"
            )
        if self.audio_frames() < 1:
            raise ConfigError(
                f"audio length {self.audio_samples} too short for conv stack"
            )
        if len(self.labels) != self.num_classes:
            raise ConfigError(
                f"{len(self.labels)} labels for num_classes={self.num_classes}"
            )
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("label names must be unique")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.max_text_len < 1 or self.vocab_size < 4:
            raise ConfigError("text config too small (reserved ids need vocab >= 4)")

    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    def audio_frames(self, samples: int | None = None) -> int:
        n = self.audio_samples if samples is None else samples
        for layer in self.conv_layers:
            n = (n - layer.kernel) // layer.stride + 1
            if n < 1:
                return 0
        return n

    def min_audio_samples(self) -> int:
        # Invert the frame-count recurrence for one output frame per layer.
        n = 1
        for layer in reversed(self.conv_layers):
            n = (n - 1) * layer.stride + layer.kernel
        return n

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["conv_layers"] = [asdict(c) for c in self.conv_layers]
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if "conv_layers" in d:
            d["conv_layers"] = tuple(ConvLayer(**c) for c in d["conv_layers"])
        if "labels" in d:
            d["labels"] = tuple(d["labels"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 8
    train_per_class: int = 50
    val_per_class: int = 10
    test_per_class: int = 10
    noise: float = 0.1
    coupling: str = "independent"   # or "xor"
    seed: int = 0

    image_height: int = 16
    image_width: int = 16
    image_channels: int = 1
    patch_size: int = 4
    audio_samples: int = 256
    sample_rate: float = 256.0
    base_frequency: float = 4.0
    vocab_size: int = 64
    text_len: int = 8

    def __post_init__(self):
        if self.coupling not in ("independent", "xor"):
            raise ConfigError(f"unknown coupling mode {self.coupling!r}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DataConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"     # or "sgd"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 80
    patience: int = 8
    min_delta: float = 1e-4
    workers: int = 1
    seed: int = 0
    grad_clip: float | None = None   # max global norm; None disables
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.workers < 1:
            raise ConfigError("batch_size, max_epochs, and workers must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def finetune_preset(cls, **overrides) -> "TrainConfig":
        """Conservative fine-tuning regime: AdamW at 2e-5, 80 epochs."""
        base = dict(optimizer="adamw", learning_rate=2e-5,
                    batch_size=64, max_epochs=80)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)
