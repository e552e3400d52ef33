"""Image datasets: folder loading, a procedural generator, splitting and batching.

Images are float32 arrays shaped (H, W, C) with values in [0, 1]. A dataset
stores them stacked as (N, H, W, C); ``Dataset.tensor()`` gives the NCHW view
that the model consumes.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image as PILImage, UnidentifiedImageError

from reedvae.errors import DatasetNotFound, EmptyDataset, ShapeError, SplitError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
MANIFEST_NAME = "index.txt"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    name: str = "dataset"
    split_tag: str = "train"
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        if images.ndim != 4:
            raise ShapeError(f"expected (N, H, W, C) images, got shape {images.shape}")
        n, h, w, c = images.shape
        if n == 0:
            raise EmptyDataset(f"dataset {self.name!r} has no items")
        if h < 8 or w < 8:
            raise ShapeError(f"images must be at least 8x8, got {h}x{w}")
        if c not in (1, 3):
            raise ShapeError(f"images must have 1 or 3 channels, got {c}")
        if not np.isfinite(images).all() or images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("image intensities must be finite and within [0, 1]")
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        ids = self.ids or tuple(f"{i:05d}" for i in range(n))
        if len(ids) != n:
            raise ValueError("ids must have one entry per image")
        object.__setattr__(self, "ids", tuple(ids))

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return self.images[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def tensor(self, indices=None) -> torch.Tensor:
        """NCHW float32 tensor of the selected items (all by default)."""
        arr = self.images if indices is None else self.images[np.asarray(indices)]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def subset(self, indices, split_tag=None, name=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[idx],
            name=name or self.name,
            split_tag=split_tag or self.split_tag,
            ids=tuple(self.ids[i] for i in idx),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.images.shape).encode())
        h.update(self.images.tobytes())
        return h.hexdigest()[:16]

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(f"{i}\n" for i in self.ids))
        return path


def _decode_file(path: Path, target_size: int) -> np.ndarray:
    with PILImage.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != target_size:
            im = im.resize((target_size, target_size), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_dataset(root_path, target_size: int = 32, split_tag: str = "train") -> Dataset:
    """Load every PNG/PPM file under ``root_path`` into a square dataset.

    Each file is center-cropped to a square, resized bilinearly to
    ``target_size`` and scaled to [0, 1]. Corrupt files are skipped with a
    warning. Mixed gray/RGB folders are promoted to RGB. If the folder holds an
    ``index.txt`` manifest its order is used, otherwise files sort by name.
    """
    root = Path(root_path)
    if not root.exists():
        raise DatasetNotFound(f"dataset path {root} does not exist")
    if target_size < 8:
        raise ShapeError("target_size must be at least 8")
    manifest = root / MANIFEST_NAME
    if root.is_file():
        files = [root]
    elif manifest.exists():
        files = []
        for stem in manifest.read_text().split():
            hits = [root / f"{stem}{s}" for s in IMAGE_SUFFIXES if (root / f"{stem}{s}").exists()]
            files.extend(hits[:1])
    else:
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise EmptyDataset(f"no PNG or PPM files under {root}")

    arrays, ids = [], []
    for path in files:
        try:
            arrays.append(_decode_file(path, target_size))
            ids.append(path.stem)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
    if not arrays:
        raise EmptyDataset(f"all {len(files)} image files under {root} failed to decode")
    if any(a.shape[2] == 3 for a in arrays):
        arrays = [np.repeat(a, 3, axis=2) if a.shape[2] == 1 else a for a in arrays]
    return Dataset(np.stack(arrays), name=root.name, split_tag=split_tag, ids=tuple(ids))


def _synthetic_image(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    def colour():
        return rng.uniform(0.0, 1.0, channels)[:, None, None]

    img = colour() + rng.uniform(-0.5, 0.5, (channels, 1, 1)) * xx + rng.uniform(-0.5, 0.5, (channels, 1, 1)) * yy
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0.0, 1.0, 2)
        rx, ry = rng.uniform(0.08, 0.35, 2)
        if rng.random() < 0.5:
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        else:
            mask = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        img = np.where(mask, colour(), img)

    # band-limited texture: one oriented sinusoid between 3 and 10 cycles per image
    freq = rng.uniform(3.0, 10.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    texture = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = img + rng.uniform(0.03, 0.12) * texture
    return np.clip(img, 0.0, 1.0).transpose(1, 2, 0)


def generate_synthetic(count: int, size: int = 32, seed: int = 0, channels: int = 3,
                       split_tag: str = "train") -> Dataset:
    """Procedural images mixing smooth gradients, flat shapes and a sinusoidal texture.

    Deterministic in ``seed``; image ``i`` depends only on ``(seed, i)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if size < 8:
        raise ShapeError("size must be >= 8")
    images = np.stack([
        _synthetic_image(np.random.default_rng([seed, i]), size, channels) for i in range(count)
    ])
    return Dataset(images.astype(np.float32), name=f"synthetic-s{seed}", split_tag=split_tag)


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Random disjoint (train, val, test) partition.

    Sizes are ``floor(n * fraction)`` with the remainder assigned to train; every
    split is forced to hold at least one item.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three positive ratios summing to 1, got {tuple(fractions)}")
    n = len(dataset)
    if n < 3:
        raise SplitError(f"need at least 3 items to split, got {n}")
    n_val = max(1, int(np.floor(n * fr[1] + 1e-9)))
    n_test = max(1, int(np.floor(n * fr[2] + 1e-9)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SplitError(f"dataset of {n} items too small for fractions {tuple(fractions)}")
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(
        dataset.subset(np.sort(p), split_tag=tag) for p, tag in zip(parts, ("train", "val", "test"))
    )


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0,
               epoch: int = 0) -> Iterator[torch.Tensor]:
    """Yield NCHW batches covering every item exactly once; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), shuffle, seed, epoch)
    for start in range(0, len(order), batch_size):
        yield dataset.tensor(order[start:start + batch_size])


def save_images(dataset: Dataset, out_dir) -> list[Path]:
    """Write each item as an 8-bit PNG plus an ``index.txt`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for item_id, img in zip(dataset.ids, dataset.images):
        arr = np.round(img * 255.0).astype(np.uint8)
        pil = PILImage.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
        path = out / f"{item_id}.png"
        pil.save(path, optimize=False)
        paths.append(path)
    dataset.write_manifest(out / MANIFEST_NAME)
    return paths
