"""Model and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_height: int = 512
    image_width: int = 512
    channels: int = 3
    patch_size: int = 64
    embed_dim: int = 512
    depth: int = 6
    num_heads: int = 8
    mixture_components: int = 150
    recon_dim: int = 512
    lambda1: float = 5.0
    lambda2: float = 0.5
    noise_std: float = 0.2
    mlp_ratio: int = 4
    decoder_stages: int = 5
    decoder_channels: tuple[int, ...] = (128, 64, 32, 16)
    ssim_window: int = 11
    sigma_floor: float = 1e-4
    # optional learned reduction of the density target dimension (0 = off)
    mdn_dim: int = 0
    # stop NLL gradients from reaching the encoder
    mdn_detach: bool = True
    # where training noise enters the mixture head: "input" (conditioning only) or "both"
    noise_on: str = "input"
    dtype: str = "float32"

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        p = self.patch_size
        if p < 1 or self.image_height % p or self.image_width % p:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible by patch size {p}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mixture_components < 1 or self.depth < 1:
            raise ConfigError("mixture_components and depth must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")
        scale = 2 ** self.decoder_stages
        if self.image_height % scale or self.image_width % scale:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not reachable by "
                f"{self.decoder_stages} stride-2 stages (needs divisibility by {scale})")
        if len(self.decoder_channels) != self.decoder_stages - 1:
            raise ConfigError("decoder_channels must list one width per hidden stage")
        seed_area = (self.image_height // scale) * (self.image_width // scale)
        if self.recon_dim % seed_area:
            raise ConfigError(f"recon_dim {self.recon_dim} not divisible by seed map area {seed_area}")
        if self.ssim_window % 2 == 0 or self.ssim_window > min(self.image_height, self.image_width):
            raise ConfigError("ssim_window must be odd and fit inside the image")
        if self.noise_on not in ("input", "both"):
            raise ConfigError(f"noise_on must be 'input' or 'both', got {self.noise_on!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def grid_rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def seed_shape(self) -> tuple[int, int, int]:
        scale = 2 ** self.decoder_stages
        h, w = self.image_height // scale, self.image_width // scale
        return self.recon_dim // (h * w), h, w

    @property
    def density_dim(self) -> int:
        return self.mdn_dim or self.embed_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 400
    # fraction of the normal train split held out for score normalization
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def from_dict(cls, data: dict):
    """Build a config dataclass, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def full_scale() -> ModelConfig:
    return ModelConfig()


def desk_scale(**overrides) -> ModelConfig:
    base = dict(image_height=64, image_width=64, channels=1, patch_size=8, embed_dim=64,
                depth=2, num_heads=4, mixture_components=16)
    base.update(overrides)
    return ModelConfig(**base)


def tiny(**overrides) -> ModelConfig:
    """8x8 single-channel config small enough for exhaustive gradient checks."""
    base = dict(image_height=8, image_width=8, channels=1, patch_size=4, embed_dim=8,
                depth=1, num_heads=2, mixture_components=2, recon_dim=16,
                decoder_stages=3, decoder_channels=(4, 4), ssim_window=5, dtype="float64",
                mdn_detach=False)
    base.update(overrides)
    return ModelConfig(**base)
