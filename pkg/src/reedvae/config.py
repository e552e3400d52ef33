"""Flat ``section.key = value`` run configuration.

Every key has a typed default below; a config file and ``--set key=value``
overrides (applied in that order) may change any of them. Unknown keys are
rejected. Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional

from reedvae.errors import ConfigError
from reedvae.evaluation import EvalConfig
from reedvae.metrics import LossWeights
from reedvae.model import ArchConfig
from reedvae.train import ModeFlags, TrainConfig

SEED_ENV = "REED_SEED"

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "data.size": 32,
    "data.split": "0.8,0.1,0.1",
    "arch.channels": 3,
    "arch.latent_channels": 4,
    "arch.latent_spatial": 4,
    "arch.conv_widths": "32,64,128",
    "arch.nonlinearity": "silu",
    "pretrain.epochs": 40,
    "pretrain.learning_rate": 1e-3,
    "pretrain.alpha": 0.01,
    "pretrain.beta": 1e-6,
    "pretrain.batch_size": 32,
    "pretrain.optimizer": "adam",
    "train.epochs": 120,
    "train.learning_rate": 1e-4,
    "train.alpha": 0.01,
    "train.beta": 1.0,
    "train.batch_size": 32,
    "train.optimizer": "adam",
    "train.k_init": 4,
    "train.k_max": 20,
    "train.plateau_patience": 5,
    "train.plateau_tol": 1e-5,
    "train.static_k": 5,
    "train.freeze_encoder": True,
    "eval.checkpoints": "5,15,25",
    "eval.latent_mode": "mean",
    "eval.smooth": "off",
}

MODES = {
    "vanilla": ModeFlags.vanilla(),
    "it": ModeFlags(iterative_training=True, first_step_loss=False, dynamic_incrementation=False),
    "it-fsl": ModeFlags(iterative_training=True, first_step_loss=True, dynamic_incrementation=False),
    "it-fsl-di": ModeFlags(iterative_training=True, first_step_loss=True, dynamic_incrementation=True),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(default).__name__})") from None
    return raw


def _assign(cfg: dict, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r} ({where})")
    cfg[key] = _coerce(key, raw)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    cfg: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        _assign(cfg, key, value, f"{source}:{lineno}")
    return cfg


def load_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_config_text(text, str(path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        _assign(cfg, key, value, "override")
    return cfg


def resolve_seed(cfg: dict, flag: Optional[int] = None, environ=None) -> int:
    """Seed precedence: command-line flag, then $REED_SEED, then config file, then default."""
    if flag is not None:
        return int(flag)
    env = (os.environ if environ is None else environ).get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(cfg["run.seed"])


def _int_list(cfg: dict, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(cfg[key]).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def split_fractions(cfg: dict) -> tuple[float, float, float]:
    try:
        fr = tuple(float(v) for v in str(cfg["data.split"]).split(","))
    except ValueError:
        raise ConfigError("data.split must be three comma-separated fractions") from None
    if len(fr) != 3:
        raise ConfigError("data.split must be three comma-separated fractions")
    return fr


def arch_config(cfg: dict, seed: int) -> ArchConfig:
    return ArchConfig(
        image_size=int(cfg["data.size"]),
        channels=int(cfg["arch.channels"]),
        latent_channels=int(cfg["arch.latent_channels"]),
        latent_spatial=int(cfg["arch.latent_spatial"]),
        conv_widths=_int_list(cfg, "arch.conv_widths"),
        nonlinearity=str(cfg["arch.nonlinearity"]),
        seed=seed,
    )


def pretrain_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        arch=arch_config(cfg, seed),
        epochs_max=cfg["pretrain.epochs"],
        weights=LossWeights(cfg["pretrain.alpha"], cfg["pretrain.beta"]),
        learning_rate=cfg["pretrain.learning_rate"],
        optimizer=cfg["pretrain.optimizer"],
        batch_size=cfg["pretrain.batch_size"],
        seed=seed,
        mode=ModeFlags.vanilla(),
    )


def train_config(cfg: dict, seed: int, mode: str = "it-fsl-di", k: Optional[int] = None) -> TrainConfig:
    """REED fine-tuning config; ``k`` sets the static k, or the initial k under ``it-fsl-di``."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    flags = MODES[mode]
    if mode != "vanilla":
        flags = replace(flags, freeze_encoder=bool(cfg["train.freeze_encoder"]))
    k_init, static_k = cfg["train.k_init"], cfg["train.static_k"]
    if k is not None:
        if flags.dynamic_incrementation:
            k_init = k
        else:
            static_k = k
    return TrainConfig(
        arch=arch_config(cfg, seed),
        epochs_max=cfg["train.epochs"],
        k_init=k_init,
        k_max=cfg["train.k_max"],
        plateau_patience=cfg["train.plateau_patience"],
        plateau_tol=cfg["train.plateau_tol"],
        weights=LossWeights(cfg["train.alpha"], cfg["train.beta"]),
        learning_rate=cfg["train.learning_rate"],
        optimizer=cfg["train.optimizer"],
        batch_size=cfg["train.batch_size"],
        seed=seed,
        mode=flags,
        static_k=static_k,
    )


def parse_smooth(text: Optional[str]) -> Optional[float]:
    """``off`` or ``gaussian:<sigma>``."""
    if text is None or text.strip().lower() in ("", "off", "none"):
        return None
    kind, _, arg = text.partition(":")
    if kind != "gaussian":
        raise ConfigError(f"smoothing must be 'off' or 'gaussian:<sigma>', got {text!r}")
    try:
        sigma = float(arg) if arg else 0.8
    except ValueError:
        raise ConfigError(f"bad smoothing sigma in {text!r}") from None
    if sigma <= 0:
        raise ConfigError("smoothing sigma must be > 0")
    return sigma


def eval_config(cfg: dict, seed: int, checkpoints: Optional[str] = None, latent_mode: Optional[str] = None,
                smooth: Optional[str] = None, edit=None) -> EvalConfig:
    cps = _int_list({"c": checkpoints}, "c") if checkpoints else _int_list(cfg, "eval.checkpoints")
    try:
        return EvalConfig(
            checkpoints=cps,
            latent_mode=latent_mode or cfg["eval.latent_mode"],
            seed=seed,
            smooth_sigma=parse_smooth(smooth if smooth is not None else cfg["eval.smooth"]),
            edit_hook=edit,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
