"""Convolutional VAE with a diagonal-Gaussian posterior and the encode/decode iteration."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from reedvae.errors import ConfigError, ShapeError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0

_NONLINEARITIES = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU, "leaky_relu": nn.LeakyReLU}


def as_batch(x) -> torch.Tensor:
    """Coerce an image or batch to an NCHW tensor.

    numpy inputs are read as (H, W, C) or (N, H, W, C); tensors as (C, H, W) or
    (N, C, H, W). Tensors pass through without copying when already 4-D.
    float64 arrays stay float64; anything else becomes float32.
    """
    if isinstance(x, torch.Tensor):
        return x.unsqueeze(0) if x.dim() == 3 else x
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected an (H, W, C) image or (N, H, W, C) batch, got shape {arr.shape}")
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy_images(x: torch.Tensor) -> np.ndarray:
    """NCHW tensor to an (N, H, W, C) float array."""
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    channels: int = 3
    latent_channels: int = 4
    latent_spatial: int = 4
    conv_widths: tuple[int, ...] = (32, 64, 128)
    nonlinearity: str = "silu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        if self.image_size < 8 or self.channels not in (1, 3) or self.latent_channels < 1:
            raise ConfigError(f"invalid architecture {self}")
        if not self.conv_widths or min(self.conv_widths) < 1:
            raise ConfigError("conv_widths must be a non-empty list of positive widths")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}; choose from {sorted(_NONLINEARITIES)}")
        factor = 2 ** len(self.conv_widths)
        if self.image_size % factor or self.image_size // factor != self.latent_spatial:
            raise ConfigError(
                f"{len(self.conv_widths)} stride-2 stages map {self.image_size}px to "
                f"{self.image_size / factor:g}px, but latent_spatial is {self.latent_spatial}"
            )
        if self.latent_dim >= self.pixel_dim:
            raise ConfigError(
                f"latent dimensionality {self.latent_dim} must be smaller than pixel dimensionality {self.pixel_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.latent_channels * self.latent_spatial ** 2

    @property
    def pixel_dim(self) -> int:
        return self.channels * self.image_size ** 2

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_spatial, self.latent_spatial)

    @property
    def image_shape_chw(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["conv_widths"] = tuple(d["conv_widths"])
        return cls(**d)


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} and log-variance {tuple(self.log_variance.shape)} differ")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        act = _NONLINEARITIES[arch.nonlinearity]
        layers, prev = [], arch.channels
        for w in arch.conv_widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), act()]
            prev = w
        layers.append(nn.Conv2d(prev, 2 * arch.latent_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of the encoder with nearest-neighbour upsampling followed by 3x3 convs.

    Transposed convolutions put a periodic checkerboard into every pass, and
    repeated re-encoding amplifies it; resize-then-convolve does not.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        act = _NONLINEARITIES[arch.nonlinearity]
        widths = list(reversed(arch.conv_widths))
        layers = [nn.Conv2d(arch.latent_channels, widths[0], 3, padding=1), act()]
        for w, nxt in zip(widths, widths[1:] + [widths[-1]]):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w, nxt, 3, padding=1), act()]
        layers += [nn.Conv2d(widths[-1], arch.channels, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class VAE(nn.Module):
    """Encoder/decoder pair; ``encoder_trainable`` toggles the encoder's gradients."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)

    @property
    def encoder_trainable(self) -> bool:
        return any(p.requires_grad for p in self.encoder.parameters())

    @encoder_trainable.setter
    def encoder_trainable(self, flag: bool):
        for p in self.encoder.parameters():
            p.requires_grad_(bool(flag))

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        x = as_batch(x)
        if tuple(x.shape[1:]) != self.arch.image_shape_chw:
            raise ShapeError(f"image batch {tuple(x.shape)} does not match architecture {self.arch.image_shape_chw}")
        mean, log_var = self.encoder(x).chunk(2, dim=1)
        return LatentDistribution(mean, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or tuple(z.shape[1:]) != self.arch.latent_shape:
            raise ShapeError(f"latent batch {tuple(z.shape)} does not match architecture {self.arch.latent_shape}")
        return self.decoder(z)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def init_model(arch: ArchConfig) -> VAE:
    """Build a VAE with weights determined entirely by ``arch.seed``."""
    if not isinstance(arch, ArchConfig):
        raise ConfigError("init_model expects an ArchConfig")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(arch.seed)
        model = VAE(arch)
    model.encoder_trainable = True
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """Hash of the raw parameter bytes in state-dict order."""
    h = hashlib.blake2b(digest_size=8)
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def encode(params, image) -> LatentDistribution:
    return params.encode(as_batch(image))


def decode(params, code: torch.Tensor) -> torch.Tensor:
    return params.decode(code)


def sample_latent(dist: LatentDistribution, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Reparameterized draw ``mean + exp(log_variance / 2) * eps``; differentiable in both."""
    eps = torch.randn(dist.mean.shape, generator=rng, dtype=dist.mean.dtype, device=dist.mean.device)
    return dist.mean + torch.exp(0.5 * dist.log_variance) * eps


def latent_mean(dist: LatentDistribution) -> torch.Tensor:
    return dist.mean


def kl_standard_normal(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)), summed over latent elements and averaged over the batch.

    Inputs with fewer than two dimensions are treated as a single sample.
    """
    mu, lv = dist.mean, dist.log_variance
    term = mu.pow(2) + lv.exp() - 1.0 - lv
    if term.dim() < 2:
        return 0.5 * term.sum()
    return 0.5 * term.reshape(term.shape[0], -1).sum(dim=1).mean()


def latent_from(dist: LatentDistribution, latent_mode: str, rng: Optional[torch.Generator]):
    if latent_mode == "mean":
        return latent_mean(dist)
    if latent_mode == "sample":
        return sample_latent(dist, rng)
    raise ValueError(f"latent_mode must be 'mean' or 'sample', got {latent_mode!r}")


@torch.no_grad()
def encode_decode_iterate(params, image, n: int, latent_mode: str = "mean", seed: int = 0,
                          post: Optional[Callable[[torch.Tensor, int], torch.Tensor]] = None) -> list[torch.Tensor]:
    """Return ``[x^1, ..., x^n]`` with ``x^{i+1} = decode(latent(encode(x^i)))``.

    ``post(x, i)`` (optional) transforms each decoded iterate ``x^i`` before it is
    re-encoded, e.g. smoothing or a pixel-space edit; returned iterates include it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = torch.Generator().manual_seed(seed) if latent_mode == "sample" else None
    x = as_batch(image)
    out = []
    for i in range(1, n + 1):
        x = params.decode(latent_from(params.encode(x), latent_mode, rng))
        if post is not None:
            x = post(x, i)
        out.append(x)
    return out
