"""Frequency-domain diagnostics for iterative degradation.

Transform convention: unnormalized forward DFT, so band energies are
``|F|^2 / (H * W)`` and sum to the image's sum of squared pixel values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from reedvae.errors import DegenerateReference, ShapeError

N_BANDS = 8
DEFAULT_CUTOFF = 0.5
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SpectrumProfile:
    log_magnitude: np.ndarray  # DC-centred log(1 + |F|)
    band_energies: np.ndarray
    total_energy: float


def to_gray(image) -> np.ndarray:
    """Single image to a 2-D float64 luminance array.

    Accepts numpy (H, W) or (H, W, C), or a tensor (C, H, W) / (1, C, H, W).
    """
    if isinstance(image, torch.Tensor):
        t = image.detach().cpu()
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ShapeError("expected a single image, got a batch")
            t = t[0]
        arr = t.numpy().transpose(1, 2, 0) if t.dim() == 3 else t.numpy()
    else:
        arr = np.asarray(image)
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 3:
            arr = arr @ LUMA
        elif arr.shape[2] == 1:
            arr = arr[:, :, 0]
        else:
            raise ShapeError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    if arr.ndim != 2:
        raise ShapeError(f"cannot interpret array of shape {arr.shape} as an image")
    return arr


def radius_grid(n: int) -> np.ndarray:
    """Distance of each DC-centred frequency bin from DC, in cycles per image."""
    f = np.fft.fftshift(np.fft.fftfreq(n) * n)
    return np.hypot(f[:, None], f[None, :])


def band_index(n: int, n_bands: int = N_BANDS) -> np.ndarray:
    """Equal-width annuli spanning DC to the corner radius ``sqrt(2) * n / 2``."""
    width = np.sqrt(2.0) * (n / 2.0) / n_bands
    return np.minimum((radius_grid(n) / width).astype(np.int64), n_bands - 1)


def _power(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    if h != w:
        raise ShapeError(f"spectral analysis needs square images, got {h}x{w}")
    spec = np.fft.fftshift(np.fft.fft2(gray))
    return spec, np.abs(spec) ** 2 / (h * w)


def magnitude_spectrum(image, n_bands: int = N_BANDS) -> SpectrumProfile:
    gray = to_gray(image)
    spec, power = _power(gray)
    bands = np.bincount(band_index(gray.shape[0], n_bands).ravel(), weights=power.ravel(), minlength=n_bands)
    return SpectrumProfile(
        log_magnitude=np.log1p(np.abs(spec)),
        band_energies=bands,
        total_energy=float(np.sum(gray ** 2)),
    )


def high_band_energy(image, cutoff_fraction: float = DEFAULT_CUTOFF) -> float:
    gray = to_gray(image)
    _, power = _power(gray)
    n = gray.shape[0]
    return float(power[radius_grid(n) > cutoff_fraction * (n / 2.0)].sum())


def high_frequency_retention(reference, candidate, cutoff_fraction: float = DEFAULT_CUTOFF) -> float:
    """Energy above ``cutoff_fraction * Nyquist`` in ``candidate`` relative to ``reference``.

    Below 1 means high frequencies were lost (blur); above 1 means new
    high-frequency content appeared.
    """
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError("cutoff_fraction must lie in (0, 1)")
    ref, cand = to_gray(reference), to_gray(candidate)
    if ref.shape != cand.shape:
        raise ShapeError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    ref_e = high_band_energy(ref, cutoff_fraction)
    if ref_e < 1e-12:
        raise DegenerateReference(f"reference energy above the cutoff is {ref_e:.3g}")
    return high_band_energy(cand, cutoff_fraction) / ref_e


def _batch_images(x):
    """Split a batch (tensor NCHW or numpy NHWC) into single images; singles pass through."""
    if isinstance(x, torch.Tensor) and x.dim() == 4:
        return list(x)
    if isinstance(x, np.ndarray) and x.ndim == 4:
        return list(x)
    return [x]


def spectral_degradation_series(images: Sequence, cutoff_fraction: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Retention of each iterate ``x^i`` (i >= 1) against ``x^0``.

    Items may be single images or equal-sized batches, in which case each entry
    is the mean over the batch of per-image retentions.
    """
    if len(images) < 2:
        raise ValueError("need at least x^0 and one iterate")
    refs = _batch_images(images[0])
    out = []
    for x in images[1:]:
        cands = _batch_images(x)
        if len(cands) != len(refs):
            raise ShapeError("every iterate must hold as many images as x^0")
        out.append(np.mean([high_frequency_retention(r, c, cutoff_fraction) for r, c in zip(refs, cands)]))
    return np.asarray(out)
