"""Iterative encode/decode evaluation, component ablations and model comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from reedvae.data import Dataset
from reedvae.errors import ReedError, ReportError, ShapeError, SpecError
from reedvae.metrics import (
    frechet_feature_distance,
    mse_per_image,
    perceptual_distance_per_image,
    psnr_per_image,
    ssim_per_image,
)
from reedvae.model import VAE, as_batch, encode_decode_iterate, parameter_checksum
from reedvae.train import ModeFlags, TrainConfig, pretrain_vanilla, reed_train

log = logging.getLogger(__name__)

METRICS = ("mse", "psnr", "ssim", "perceptual", "frechet")
HIGHER_IS_BETTER = {"mse": False, "psnr": True, "ssim": True, "perceptual": False, "frechet": False}
SCALE_NOTE = (
    "desk-scale substitutes: perceptual = multi-scale gradient distance, frechet = random-conv "
    "feature Frechet distance; compare orderings and ratios, not absolute magnitudes"
)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of an NCHW batch, radius ceil(3 sigma), reflect padding."""
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    g = torch.as_tensor(g / g.sum(), dtype=x.dtype, device=x.device)
    c = x.shape[1]
    pad_mode = "reflect" if min(x.shape[2:]) > radius else "replicate"
    x = F.pad(x, (radius, radius, 0, 0), mode=pad_mode)
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode=pad_mode)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


@dataclass(frozen=True)
class EditSpec:
    """Pixel-space edit: identity, mask_fill(rect, value), color_shift(delta) or blur(sigma).

    ``rect`` is ``(x0, y0, x1, y1)`` in pixels, half-open.
    """

    kind: str = "identity"
    rect: Optional[tuple[int, int, int, int]] = None
    value: float = 0.0
    delta: float = 0.0
    sigma: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "EditSpec":
        kind, _, args = text.partition(":")
        try:
            nums = [float(a) for a in args.split(",") if a.strip()] if args else []
            if kind == "identity":
                return cls()
            if kind == "mask_fill":
                x0, y0, x1, y1, value = nums
                return cls("mask_fill", rect=(int(x0), int(y0), int(x1), int(y1)), value=value)
            if kind == "color_shift":
                (delta,) = nums
                return cls("color_shift", delta=delta)
            if kind == "blur":
                (sigma,) = nums
                return cls("blur", sigma=sigma)
        except ValueError as exc:
            raise SpecError(f"bad arguments for edit {text!r}") from exc
        raise SpecError(f"unknown edit kind {kind!r}")

    def describe(self) -> str:
        if self.kind == "mask_fill":
            return f"mask_fill:{','.join(map(str, self.rect))},{self.value!r}"
        if self.kind == "color_shift":
            return f"color_shift:{self.delta!r}"
        if self.kind == "blur":
            return f"blur:{self.sigma!r}"
        return "identity"


def apply_edit_hook(image, spec: EditSpec):
    """Apply ``spec`` to an image or batch; output is clamped to [0, 1].

    numpy input ((H, W, C) or (N, H, W, C)) comes back as numpy of the same
    shape, tensor input as a tensor of the same shape.
    """
    is_numpy = not isinstance(image, torch.Tensor)
    orig_ndim = np.ndim(image)
    x = as_batch(image).clone()
    h, w = x.shape[2:]
    if spec.kind == "identity":
        out = x
    elif spec.kind == "mask_fill":
        if spec.rect is None:
            raise SpecError("mask_fill needs a rect")
        x0, y0, x1, y1 = spec.rect
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise SpecError(f"rect {spec.rect} outside the {w}x{h} frame")
        x[:, :, y0:y1, x0:x1] = spec.value
        out = x
    elif spec.kind == "color_shift":
        out = x + spec.delta
    elif spec.kind == "blur":
        out = gaussian_blur(x, spec.sigma)
    else:
        raise SpecError(f"unknown edit kind {spec.kind!r}")
    out = out.clamp(0.0, 1.0)
    if is_numpy:
        arr = out.numpy().transpose(0, 2, 3, 1)
        return arr[0] if orig_ndim == 3 else arr
    return out[0] if orig_ndim == 3 else out


@dataclass(frozen=True)
class EvalConfig:
    checkpoints: tuple[int, ...] = (5, 15, 25)
    latent_mode: str = "mean"
    seed: int = 0
    smooth_sigma: Optional[float] = None
    edit_hook: Optional[EditSpec] = None

    def __post_init__(self):
        cps = tuple(int(c) for c in self.checkpoints)
        if not cps or cps[0] < 1 or any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError(f"checkpoints must be strictly increasing and >= 1, got {cps}")
        object.__setattr__(self, "checkpoints", cps)
        if self.latent_mode not in ("mean", "sample"):
            raise ValueError("latent_mode must be 'mean' or 'sample'")

    @property
    def label(self) -> dict:
        return {
            "latent_mode": self.latent_mode if self.latent_mode == "mean" else f"sample(seed={self.seed})",
            "smoothing": f"gaussian:{self.smooth_sigma:g}" if self.smooth_sigma else "off",
            "edit_hook": self.edit_hook.describe() if self.edit_hook else "none",
        }

    def post_hook(self):
        if not self.smooth_sigma and self.edit_hook is None:
            return None

        def post(x, _i):
            if self.smooth_sigma:
                x = gaussian_blur(x, self.smooth_sigma)
            if self.edit_hook is not None:
                x = apply_edit_hook(x, self.edit_hook)
            return x

        return post


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "MetricSummary":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()), float(v.min()), float(v.max()))


@dataclass
class MetricReport:
    """Per-checkpoint aggregates; ``metrics[name][i]`` belongs to ``checkpoints[i]``."""

    name: str
    checkpoints: tuple[int, ...]
    metrics: dict[str, list[MetricSummary]]
    label: dict = field(default_factory=dict)

    def value(self, metric: str, checkpoint: int) -> float:
        return self.metrics[metric][self.checkpoints.index(checkpoint)].mean

    def rows(self):
        for i, cp in enumerate(self.checkpoints):
            for m in METRICS:
                if m in self.metrics:
                    s = self.metrics[m][i]
                    yield cp, m, s


def trajectory(model, images, cfg: EvalConfig) -> list[torch.Tensor]:
    """``[x^1 .. x^N]`` for N = last checkpoint, with smoothing/edits between steps."""
    return encode_decode_iterate(
        model, images, cfg.checkpoints[-1], latent_mode=cfg.latent_mode, seed=cfg.seed, post=cfg.post_hook()
    )


@torch.no_grad()
def evaluate_iterative(model, test_set: Dataset, cfg: EvalConfig = EvalConfig(), name: str = "model",
                       return_trajectory: bool = False):
    """Metrics of ``x^n`` against ``x^0`` at every checkpoint ``n``.

    Per-image metrics are aggregated as mean/std/min/max; the Frechet distance
    is computed once per checkpoint between the set of ``x^n`` and the set of ``x^0``.
    """
    x0 = test_set.tensor()
    arch = getattr(model, "arch", None)
    if arch is not None and tuple(x0.shape[1:]) != arch.image_shape_chw:
        raise ShapeError(f"test images {tuple(x0.shape[1:])} do not match model {arch.image_shape_chw}")
    traj = trajectory(model, x0, cfg)
    metrics = {m: [] for m in METRICS}
    for cp in cfg.checkpoints:
        xn = traj[cp - 1]
        metrics["mse"].append(MetricSummary.of(mse_per_image(x0, xn)))
        metrics["psnr"].append(MetricSummary.of(psnr_per_image(x0, xn)))
        metrics["ssim"].append(MetricSummary.of(ssim_per_image(x0, xn)))
        metrics["perceptual"].append(MetricSummary.of(perceptual_distance_per_image(x0, xn)))
        fd = frechet_feature_distance(x0, xn) if len(test_set) >= 2 else float("nan")
        metrics["frechet"].append(MetricSummary(fd, 0.0, fd, fd))
    label = dict(cfg.label, note=SCALE_NOTE)
    report = MetricReport(name=name, checkpoints=cfg.checkpoints, metrics=metrics, label=label)
    if return_trajectory:
        return report, traj
    return report


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: dict = field(default_factory=dict)
    train: bool = True


def default_variants() -> list[AblationVariant]:
    """The component grid: vanilla, static IT at k=2 and k=5, IT + first-step loss, full REED."""
    frozen = dict(freeze_encoder=True)
    return [
        AblationVariant("vanilla", train=False),
        AblationVariant("IT_k2", dict(mode=ModeFlags(True, False, False, **frozen), static_k=2)),
        AblationVariant("IT_k5", dict(mode=ModeFlags(True, False, False, **frozen), static_k=5)),
        AblationVariant("IT_FSL_k5", dict(mode=ModeFlags(True, True, False, **frozen), static_k=5)),
        AblationVariant("IT_FSL_DI", dict(mode=ModeFlags(True, True, True, **frozen))),
    ]


@dataclass
class AblationReport:
    variants: list[str]
    reports: dict[str, MetricReport]
    errors: dict[str, str]
    init_checksums: dict[str, str]
    runlogs: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    def ordered_reports(self) -> list[tuple[str, MetricReport]]:
        return [(v, self.reports[v]) for v in self.variants if v in self.reports]


def run_ablation(base_config: TrainConfig, splits, variants: Optional[Sequence[AblationVariant]] = None,
                 eval_cfg: EvalConfig = EvalConfig(), init: Optional[VAE] = None,
                 pretrain_config: Optional[TrainConfig] = None) -> AblationReport:
    """Train every variant from one shared init and evaluate each on the test split.

    Without ``init`` a vanilla model is pretrained with ``pretrain_config`` (or
    ``base_config``). A variant that fails is recorded in ``errors`` and the
    rest still run.
    """
    train_set, val_set, test_set = splits
    variants = list(variants) if variants is not None else default_variants()
    if not variants:
        raise ValueError("need at least one ablation variant")
    if init is None:
        init, _ = pretrain_vanilla(pretrain_config or base_config, train_set, val_set)
    report = AblationReport(variants=[v.name for v in variants], reports={}, errors={}, init_checksums={})
    for variant in variants:
        report.init_checksums[variant.name] = parameter_checksum(init)
        try:
            if variant.train:
                cfg = replace(base_config, **variant.overrides)
                model, runlog = reed_train(cfg, init, train_set, val_set)
                report.runlogs[variant.name] = runlog
            else:
                model = init
            model.eval()
            report.reports[variant.name] = evaluate_iterative(model, test_set, eval_cfg, name=variant.name)
            report.models[variant.name] = model
        except (ReedError, RuntimeError, ValueError) as exc:
            log.error("variant %s failed: %s", variant.name, exc)
            report.errors[variant.name] = f"{type(exc).__name__}: {exc}"
    return report


@dataclass(frozen=True)
class ComparisonCell:
    values: dict[str, float]
    best: tuple[str, ...]
    tie: bool
    ratios: dict[str, float]


@dataclass
class ComparisonTable:
    names: list[str]
    checkpoints: tuple[int, ...]
    cells: dict[tuple[str, int], ComparisonCell]

    def wins(self, name: str, checkpoint: int) -> int:
        """Metrics at ``checkpoint`` where ``name`` is the unique best."""
        return sum(
            1 for m in METRICS
            if (m, checkpoint) in self.cells
            and self.cells[(m, checkpoint)].best == (name,)
        )

    def rows(self):
        for (m, cp), cell in self.cells.items():
            for n in self.names:
                yield n, cp, m, cell.values[n], n in cell.best, cell.tie, cell.ratios[n]


def compare_models(reports: Sequence[tuple[str, MetricReport]]) -> ComparisonTable:
    """Side-by-side table; the first report is the ratio baseline.

    Best values are flagged only when there are at least two reports; equal
    best values are all flagged and marked as a tie.
    """
    if not reports:
        raise ReportError("nothing to compare")
    checkpoints = reports[0][1].checkpoints
    for name, r in reports:
        if r.checkpoints != checkpoints:
            raise ReportError(f"report {name!r} has checkpoints {r.checkpoints}, expected {checkpoints}")
    names = [n for n, _ in reports]
    cells = {}
    for m in METRICS:
        for cp in checkpoints:
            values = {n: r.value(m, cp) for n, r in reports}
            base = values[names[0]]
            ratios = {n: (v / base if base != 0 else (1.0 if v == 0 else math.inf)) for n, v in values.items()}
            best, tie = (), False
            if len(reports) > 1:
                target = max(values.values()) if HIGHER_IS_BETTER[m] else min(values.values())
                best = tuple(n for n in names if values[n] == target)
                tie = len(best) > 1
            cells[(m, cp)] = ComparisonCell(values, best, tie, ratios)
    return ComparisonTable(names, checkpoints, cells)
