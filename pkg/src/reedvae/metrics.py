"""Image-quality metrics and the training/validation objectives.

Inputs are NCHW tensors or numpy (H, W, C) / (N, H, W, C) arrays (see
``model.as_batch``). Everything that enters a loss is differentiable torch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from reedvae.errors import MetricError, ShapeError
from reedvae.model import LatentDistribution, as_batch, kl_standard_normal

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PYRAMID_LEVELS = 3
FEATURE_DIM = 64
FEATURE_SEED = 20240


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01  # perceptual term
    beta: float = 1.0  # KL term

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def _pair(a, b):
    a, b = as_batch(a), as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if b.dtype != a.dtype:
        b = b.to(a.dtype)
    return a, b


def mse_per_image(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    return (a - b).pow(2).reshape(a.shape[0], -1).mean(dim=1)


def mse(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    return (a - b).pow(2).mean()


def _psnr_from_mse(m: torch.Tensor) -> torch.Tensor:
    capped = torch.full_like(m, PSNR_CAP_DB)
    safe = torch.clamp(m, min=1e-10)
    return torch.where(m < 1e-10, capped, 10.0 * torch.log10(1.0 / safe))


def psnr_per_image(a, b) -> torch.Tensor:
    return _psnr_from_mse(mse_per_image(a, b))


def psnr(a, b) -> torch.Tensor:
    """Peak-1 PSNR of the pooled MSE, capped at 99 dB."""
    return _psnr_from_mse(mse(a, b))


@lru_cache(maxsize=None)
def _gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = _gaussian_window_1d(size, sigma)
    return np.outer(g, g)


def ssim_per_image(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    a, b = a.double(), b.double()  # E[x^2] - mu^2 cancels badly in float32
    n, c, h, w = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}px per side, got {h}x{w}")
    win = torch.as_tensor(gaussian_window(), dtype=a.dtype, device=a.device)
    win = win.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).reshape(n, -1).mean(dim=1)


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM: 11x11 Gaussian window (sigma 1.5), valid positions, dynamic range 1."""
    return ssim_per_image(a, b).mean()


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _downsample(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = torch.as_tensor(np.outer(_BINOMIAL5, _BINOMIAL5), dtype=x.dtype, device=x.device)
    k = k.expand(c, 1, 5, 5)
    x = F.pad(x, (2, 2, 2, 2), mode="reflect")
    return F.conv2d(x, k, stride=2, groups=c)


def perceptual_distance_per_image(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    total = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
    for level in range(PYRAMID_LEVELS):
        if level:
            a, b = _downsample(a), _downsample(b)
        d = a - b
        dx = d[..., :, 1:] - d[..., :, :-1]
        dy = d[..., 1:, :] - d[..., :-1, :]
        total = total + dx.pow(2).reshape(d.shape[0], -1).mean(1) + dy.pow(2).reshape(d.shape[0], -1).mean(1)
    return total


def perceptual_distance(a, b) -> torch.Tensor:
    """Multi-scale gradient distance.

    Sum over three pyramid levels (binomial-blur + stride-2 downsampling) of the
    mean squared difference of horizontal and vertical forward differences.
    """
    return perceptual_distance_per_image(a, b).mean()


@lru_cache(maxsize=None)
def _projector_weights(channels: int, seed: int = FEATURE_SEED):
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, math.sqrt(2.0 / (channels * 9)), (32, channels, 3, 3))
    b1 = rng.normal(0.0, 0.1, 32)
    w2 = rng.normal(0.0, math.sqrt(2.0 / (32 * 9)), (FEATURE_DIM, 32, 3, 3))
    b2 = rng.normal(0.0, 0.1, FEATURE_DIM)
    return tuple(torch.from_numpy(t) for t in (w1, b1, w2, b2))


@torch.no_grad()
def random_conv_features(images) -> np.ndarray:
    """Fixed random two-layer conv projector, global-average pooled to 64 features."""
    x = as_batch(images).to(torch.float64)
    w1, b1, w2, b2 = _projector_weights(x.shape[1])
    h = F.relu(F.conv2d(x, w1, b1, padding=1))
    h = F.relu(F.conv2d(h, w2, b2, stride=2, padding=1))
    return h.mean(dim=(2, 3)).numpy()


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`` for PSD covariances.

    The trace of the product root is taken through the symmetric form
    ``sqrt(cov_a) cov_b sqrt(cov_a)``, which shares its spectrum.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_root = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root)
    return max(value, 0.0)


def frechet_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    feat_a, feat_b = np.asarray(feat_a, np.float64), np.asarray(feat_b, np.float64)
    if feat_a.ndim == 1:
        feat_a, feat_b = feat_a[:, None], feat_b[:, None]
    if len(feat_a) < 2 or len(feat_b) < 2:
        raise MetricError("Frechet distance needs at least 2 samples per set")
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    return frechet_distance(feat_a.mean(0), cov_a, feat_b.mean(0), cov_b)


def frechet_feature_distance(set_a, set_b) -> float:
    """Set-to-set Frechet distance over fixed random-convolution features."""
    a, b = as_batch(set_a), as_batch(set_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("Frechet distance needs at least 2 images per set")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"image shapes differ: {tuple(a.shape[1:])} vs {tuple(b.shape[1:])}")
    return frechet_from_features(random_conv_features(a), random_conv_features(b))


def train_loss(x1, xk, dist_k: LatentDistribution, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Reconstruction of ``x1`` by ``xk`` plus weighted perceptual and KL terms."""
    x1, xk = _pair(x1, xk)
    return mse(x1, xk) + w.alpha * perceptual_distance(x1, xk) + w.beta * kl_standard_normal(dist_k)


def val_loss(x0, xk, alpha: float = 0.01) -> torch.Tensor:
    x0, xk = _pair(x0, xk)
    return mse(x0, xk) + alpha * perceptual_distance(x0, xk)
