"""Configuration dataclasses shared across the model, trainers and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the tokenizer and the transformer.

    ``image_len`` is the flattened token-grid length and must equal
    ``grid_size ** 2``. ``retro_every`` is the cross-attention density: every
    ``retro_every``-th block (1-based positions ``k, 2k, ...``) carries a
    cross-attention layer over the source frame. Values larger than
    ``n_blocks`` (or 0) disable cross-attention entirely (the ablation).
    """

    # tokenizer
    image_size: int = 64
    grid_size: int = 16
    code_dim: int = 64
    image_vocab: int = 512
    commitment_beta: float = 0.25
    vae_channels: int = 64

    # transformer
    d_model: int = 256
    n_heads: int = 8
    n_blocks: int = 6
    text_vocab: int = 128
    text_len: int = 64
    image_len: int = 256
    retro_every: int = 3
    prompt_len: int = 16
    max_frames: int = 8
    d_sent: int = 128
    use_story: bool = True

    def __post_init__(self):
        if self.image_vocab < 2:
            raise ConfigError(f"image_vocab must be >= 2, got {self.image_vocab}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.text_len <= 0 or self.image_len <= 0:
            raise ConfigError("text_len and image_len must be positive")
        if self.grid_size ** 2 != self.image_len:
            raise ConfigError(
                f"image_len ({self.image_len}) must equal grid_size**2 ({self.grid_size ** 2})"
            )
        if self.retro_every < 0:
            raise ConfigError(f"retro_every must be >= 0, got {self.retro_every}")
        if self.prompt_len < 0:
            raise ConfigError(f"prompt_len must be >= 0, got {self.prompt_len}")
        if self.image_size % self.grid_size != 0:
            raise ConfigError(
                f"image_size ({self.image_size}) must be a multiple of grid_size ({self.grid_size})"
            )
        factor = self.image_size // self.grid_size
        if factor & (factor - 1) != 0:
            raise ConfigError(f"image_size / grid_size must be a power of two, got {factor}")

    @property
    def seq_len(self) -> int:
        """Full layout length: prompt + story + caption + image tokens."""
        return self.prompt_len + 1 + self.text_len + self.image_len

    def retro_blocks(self) -> list[int]:
        """0-based indices of blocks that carry a cross-attention layer."""
        if self.retro_every == 0:
            return []
        return [i for i in range(self.n_blocks) if (i + 1) % self.retro_every == 0]


@dataclass
class TrainConfig:
    """Training regime for the story transformer."""

    mode: str = "finetune"  # "finetune" | "prompt"
    epochs: int = 5
    batch_size: int = 16
    lr_new: float = 1e-4
    lr_pretrained: float = 1e-5
    lr_prompt: float = 5e-4
    warmup_steps: int = 750
    min_lr_frac: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("finetune", "prompt"):
            raise ConfigError(f"mode must be 'finetune' or 'prompt', got {self.mode!r}")
        if not 0.0 <= self.min_lr_frac <= 1.0:
            raise ConfigError(f"min_lr_frac must be in [0, 1], got {self.min_lr_frac}")

    @property
    def schedule(self) -> str:
        """Cosine decay when finetuning, linear decay when prompt-tuning."""
        return "cosine" if self.mode == "finetune" else "linear"

    @property
    def max_lr(self) -> float:
        """Peak rate for the schedule; the finetune backbone scales off this."""
        return self.lr_prompt if self.mode == "prompt" else self.lr_new


@dataclass
class VaeTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


@dataclass
class GanConfig:
    """Hyperparameters for the GAN baseline."""

    epochs: int = 30
    batch_size: int = 8
    g_lr: float = 1e-4
    d_lr: float = 1e-5
    z_dim: int = 32
    d_txt: int = 64
    d_cond: int = 32
    base_channels: int = 32
    text_layers: int = 2
    patch_size: int = 3
    checkpoint_every: int = 10
    seed: int = 0


@dataclass
class DataSpec:
    """Specification for the synthetic story dataset."""

    n_chars: int = 6
    n_unseen_chars: int = 2
    n_backgrounds: int = 4
    frames_per_story: int = 4
    train_count: int = 120
    val_count: int = 24
    test_count: int = 24
    image_size: int = 64
    unseen_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_chars < 2:
            raise ConfigError(f"n_chars must be >= 2, got {self.n_chars}")
        if self.frames_per_story < 2:
            raise ConfigError("frames_per_story must be >= 2")
        if not 0.0 <= self.unseen_fraction <= 1.0:
            raise ConfigError("unseen_fraction must be in [0, 1]")


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "vae_train": VaeTrainConfig,
    "gan": GanConfig,
    "data": DataSpec,
}


@dataclass
class RunConfig:
    """Everything a run needs; serialized verbatim into run.json."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vae_train: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def to_dict(self) -> dict[str, Any]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section = dict(raw.get(name, {}))
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = section_cls(**section)
        unknown_sections = set(raw) - set(_SECTIONS)
        if unknown_sections:
            raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
        return cls(**kwargs)

    def apply_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply dotted ``section.key=value`` overrides, rejecting unknown keys."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            if len(parts) != 2:
                raise ConfigError(f"override key must look like section.key, got {dotted!r}")
            section, key = parts
            if section not in raw:
                raise ConfigError(f"unknown config section {section!r}")
            if key not in raw[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
            raw[section][key] = _coerce(value, raw[section][key])
        return RunConfig.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _coerce(value: str, current: Any) -> Any:
    """Coerce a CLI string to the type of the value it replaces."""
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse {value!r} as bool")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value
