"""Checkpoints, run manifests, report serialization and plot emission.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"REEDCKPT"
    u32       format version
    u64       header length L
    L bytes   UTF-8 JSON header: arch, trainability, tensor table, curriculum
    ...       raw float32 tensor data, in tensor-table order
    8 bytes   blake2b-64 digest of everything above
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import struct
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from filelock import FileLock
from PIL import Image as PILImage

from reedvae.errors import ChecksumError, CheckpointIOError, VersionError
from reedvae.evaluation import (
    METRICS,
    AblationReport,
    ComparisonTable,
    MetricReport,
    MetricSummary,
)
from reedvae.model import VAE, ArchConfig
from reedvae.spectral import SpectrumProfile
from reedvae.train import CurriculumState

MAGIC = b"REEDCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_BYTES = 8


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST_BYTES).digest()


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write {path}: {exc}") from exc


def encode_checkpoint(params: VAE, state: Optional[CurriculumState] = None,
                      version: int = FORMAT_VERSION) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, t in params.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": version,
        "arch": params.arch.to_dict(),
        "encoder_trainable": params.encoder_trainable,
        "dtype": "float32-le",
        "tensors": tensors,
        "curriculum": asdict(state) if state is not None else None,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, version, len(head)) + head + b"".join(blobs)
    return body + _digest(body)


def save_checkpoint(params: VAE, path, state: Optional[CurriculumState] = None) -> str:
    """Write a checkpoint; returns its id (hex digest)."""
    data = encode_checkpoint(params, state)
    _atomic_write(Path(path), data)
    return data[-_DIGEST_BYTES:].hex()


def decode_checkpoint(data: bytes):
    if len(data) < _PREFIX.size + _DIGEST_BYTES:
        raise ChecksumError("checkpoint is truncated")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ChecksumError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    body, digest = data[:-_DIGEST_BYTES], data[-_DIGEST_BYTES:]
    if _digest(body) != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len])
    blob = memoryview(body)[_PREFIX.size + head_len:]
    model = VAE(ArchConfig.from_dict(header["arch"]))
    expected = model.state_dict()
    state_dict = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(blob[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f4")
        shape = tuple(entry["shape"])
        if entry["name"] not in expected or tuple(expected[entry["name"]].shape) != shape:
            raise ChecksumError(f"tensor {entry['name']} {shape} does not fit the stored architecture")
        state_dict[entry["name"]] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    model.load_state_dict(state_dict)
    model.encoder_trainable = header["encoder_trainable"]
    model.eval()
    cur = header.get("curriculum")
    return model, (CurriculumState(**cur) if cur is not None else None)


def load_checkpoint(path):
    """Returns ``(model, curriculum_state_or_None)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def code_version_hash(version: str) -> str:
    """Git blob hash of a version string."""
    raw = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def write_manifest(path, config: dict, dataset_fingerprint: str, seed: int, version: str) -> Path:
    manifest = {
        "config": config,
        "dataset_fingerprint": dataset_fingerprint,
        "seed": seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "code_version": version,
        "code_hash": code_version_hash(version),
    }
    _atomic_write(Path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return Path(path)


def _num(v: float):
    """6 significant digits; non-finite values become strings in JSON."""
    v = float(v)
    if not np.isfinite(v):
        return str(v)
    return float(f"{v:.6g}")


def _fmt(v) -> str:
    return f"{float(v):.6g}"


def metric_report_to_dict(r: MetricReport) -> dict:
    return {
        "name": r.name,
        "label": r.label,
        "checkpoints": list(r.checkpoints),
        "metrics": {
            m: [dict(checkpoint=cp, mean=_num(s.mean), std=_num(s.std), min=_num(s.min), max=_num(s.max))
                for cp, s in zip(r.checkpoints, r.metrics[m])]
            for m in METRICS if m in r.metrics
        },
    }


def metric_report_from_dict(d: dict) -> MetricReport:
    metrics = {
        m: [MetricSummary(float(e["mean"]), float(e["std"]), float(e["min"]), float(e["max"])) for e in rows]
        for m, rows in d["metrics"].items()
    }
    return MetricReport(d["name"], tuple(d["checkpoints"]), metrics, dict(d.get("label", {})))


def _as_dict(report) -> dict:
    if isinstance(report, MetricReport):
        return metric_report_to_dict(report)
    if isinstance(report, AblationReport):
        return {
            "variants": report.variants,
            "init_checksums": report.init_checksums,
            "errors": report.errors,
            "reports": {n: metric_report_to_dict(r) for n, r in report.ordered_reports()},
        }
    if isinstance(report, ComparisonTable):
        return {
            "names": report.names,
            "checkpoints": list(report.checkpoints),
            "cells": [
                {"metric": m, "checkpoint": cp, "values": {n: _num(v) for n, v in c.values.items()},
                 "best": list(c.best), "tie": c.tie, "ratios": {n: _num(v) for n, v in c.ratios.items()}}
                for (m, cp), c in report.cells.items()
            ],
        }
    raise TypeError(f"cannot serialize {type(report).__name__}")


def _csv_rows(report):
    if isinstance(report, MetricReport):
        return ["variant", "checkpoint", "metric", "mean", "std"], [
            [report.name, cp, m, _fmt(s.mean), _fmt(s.std)] for cp, m, s in report.rows()
        ]
    if isinstance(report, AblationReport):
        rows = []
        for name, r in report.ordered_reports():
            rows += [[name, cp, m, _fmt(s.mean), _fmt(s.std)] for cp, m, s in r.rows()]
        return ["variant", "checkpoint", "metric", "mean", "std"], rows
    if isinstance(report, ComparisonTable):
        return ["variant", "checkpoint", "metric", "mean", "best", "tie", "ratio"], [
            [n, cp, m, _fmt(v), int(best), int(tie), _fmt(ratio)]
            for n, cp, m, v, best, tie, ratio in report.rows()
        ]
    raise TypeError(f"cannot serialize {type(report).__name__}")


def write_report(report, path, format: str = "csv") -> Path:
    """Serialize a MetricReport, AblationReport or ComparisonTable to CSV or JSON."""
    path = Path(path)
    if format == "json":
        text = json.dumps(_as_dict(report), indent=2, sort_keys=True) + "\n"
    elif format == "csv":
        header, rows = _csv_rows(report)
        return write_table(path, header, rows)
    else:
        raise ValueError(f"unknown report format {format!r}")
    _atomic_write(path, text.encode())
    return path


def write_table(path, header: Sequence[str], rows) -> Path:
    """Write a plain CSV atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(Path(path), buf.getvalue().encode())
    return Path(path)


def write_band_table(profiles: dict[str, SpectrumProfile], path) -> Path:
    """CSV of radial band energies: one row per (image, band)."""
    rows = [
        [name, b, _fmt(e), _fmt(e / p.total_energy if p.total_energy else 0.0)]
        for name, p in profiles.items()
        for b, e in enumerate(p.band_energies)
    ]
    return write_table(path, ["image", "band", "energy", "fraction"], rows)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def metric_figure(reports: Sequence[tuple[str, MetricReport]], metric: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    checkpoints = reports[0][1].checkpoints
    for name, r in reports:
        ax.plot(r.checkpoints, [s.mean for s in r.metrics[metric]], marker="o", label=name)
    ax.set_xticks(list(checkpoints))
    ax.set_xlabel("encode/decode iterations")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _to_uint8(img) -> np.ndarray:
    arr = img.detach().cpu().numpy().transpose(1, 2, 0) if isinstance(img, torch.Tensor) else np.asarray(img)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return arr[:, :, 0] if arr.ndim == 3 and arr.shape[2] == 1 else arr


def trajectory_strip(frames: Sequence) -> np.ndarray:
    """Tiles frames left to right: input followed by each checkpoint iterate."""
    return np.concatenate([_to_uint8(f) for f in frames], axis=1)


def spectrum_image(profile: SpectrumProfile) -> np.ndarray:
    from matplotlib import colormaps

    lm = profile.log_magnitude
    span = lm.max() - lm.min()
    norm = (lm - lm.min()) / span if span > 0 else np.zeros_like(lm)
    return (colormaps["viridis"](norm)[:, :, :3] * 255).round().astype(np.uint8)


def emit_plots(out_dir, reports: Sequence[tuple[str, MetricReport]] = (),
               trajectories: Optional[dict] = None, spectra: Optional[dict] = None) -> list[Path]:
    """Write metric curves, trajectory strips and spectrum heat maps as PNG.

    ``trajectories`` maps a name to a frame list ``[x^0, x^c1, x^c2, ...]``;
    ``spectra`` maps a name to a SpectrumProfile.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointIOError(f"cannot create {out}: {exc}") from exc
    files = []
    if reports:
        import matplotlib.pyplot as plt

        for m in METRICS:
            if m not in reports[0][1].metrics:
                continue
            fig = metric_figure(reports, m)
            path = out / f"metric_{m}.png"
            fig.savefig(path, metadata={"Software": None})
            plt.close(fig)
            files.append(path)
    for name, frames in (trajectories or {}).items():
        path = out / f"strip_{_slug(name)}.png"
        PILImage.fromarray(trajectory_strip(frames)).save(path)
        files.append(path)
    for name, profile in (spectra or {}).items():
        path = out / f"spectrum_{_slug(name)}.png"
        PILImage.fromarray(spectrum_image(profile)).save(path)
        files.append(path)
    return files
