"""Vanilla pretraining and re-encode/decode (REED) decoder fine-tuning.

A training step runs ``k`` encode-sample-decode iterations. Only the last one
is recorded by autograd; earlier iterates are constants. The regression target
is either the first reconstruction ``x^1`` (first-step loss) or the source
``x^0``. With dynamic incrementation, ``k`` grows by one whenever the epoch-end
validation loss (always against ``x^0``) stops improving for
``plateau_patience`` epochs, and training ends once ``k`` exceeds ``k_max``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch

from reedvae.data import Dataset, batch_iter
from reedvae.errors import ConfigError, TrainingDiverged
from reedvae.metrics import LossWeights, train_loss, val_loss
from reedvae.model import VAE, ArchConfig, encode_decode_iterate, init_model, sample_latent

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "rmsprop", "sgd")


@dataclass(frozen=True)
class ModeFlags:
    iterative_training: bool = True
    first_step_loss: bool = True
    dynamic_incrementation: bool = True
    freeze_encoder: bool = True

    @classmethod
    def vanilla(cls) -> "ModeFlags":
        return cls(False, False, False, False)


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    epochs_max: int = 40
    k_init: int = 4
    k_max: int = 20
    plateau_patience: int = 5
    plateau_tol: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    seed: int = 0
    mode: ModeFlags = field(default_factory=ModeFlags)
    static_k: int = 5

    def __post_init__(self):
        if self.k_init < 1:
            raise ConfigError("k_init must be >= 1")
        if self.k_max < self.k_init:
            raise ConfigError("k_max must be >= k_init")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a positive finite number")
        if self.static_k < 1 or self.epochs_max < 1 or self.batch_size < 1:
            raise ConfigError("static_k, epochs_max and batch_size must be >= 1")
        if self.plateau_tol < 0:
            raise ConfigError("plateau_tol must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mode.dynamic_incrementation and not self.mode.iterative_training:
            raise ConfigError("dynamic_incrementation requires iterative_training")

    @property
    def initial_k(self) -> int:
        if not self.mode.iterative_training:
            return 1
        return self.k_init if self.mode.dynamic_incrementation else self.static_k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["arch"] = ArchConfig.from_dict(d["arch"])
        d["weights"] = LossWeights(**d["weights"])
        d["mode"] = ModeFlags(**d["mode"])
        return cls(**d)


def pretrain_defaults(**overrides) -> TrainConfig:
    """Settings for the from-scratch vanilla model that stands in for a pretrained checkpoint.

    The KL weight is small because the reconstruction term is a per-pixel mean
    while the KL is summed over latent elements; at beta=1 the posterior
    collapses to the prior on desk-scale data.
    """
    base = dict(weights=LossWeights(alpha=0.01, beta=1e-6), learning_rate=1e-3, mode=ModeFlags.vanilla())
    base.update(overrides)
    return TrainConfig(**base)


def reed_defaults(**overrides) -> TrainConfig:
    """Settings for decoder fine-tuning from a pretrained init.

    The epoch budget is long enough for validation loss to plateau, so the
    curriculum actually raises k; shorter runs leave k at its initial value.
    """
    base = dict(learning_rate=1e-4, epochs_max=120, mode=ModeFlags())
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class CurriculumState:
    k: int
    best_val_loss: float = math.inf
    plateau_counter: int = 0
    terminated: bool = False


def update_curriculum(state: CurriculumState, val_loss: float, config: TrainConfig) -> CurriculumState:
    """Advance the plateau counter and, after ``plateau_patience`` misses, raise ``k``."""
    best, counter, k = state.best_val_loss, state.plateau_counter, state.k
    if val_loss < best - config.plateau_tol:
        best, counter = val_loss, 0
    else:
        counter += 1
    if counter >= config.plateau_patience:
        k, counter, best = k + 1, 0, math.inf
    return CurriculumState(k=k, best_val_loss=best, plateau_counter=counter, terminated=k > config.k_max)


@dataclass
class EpochRecord:
    epoch: int
    k: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class RunLog:
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint_id: Optional[str] = None
    final_state: Optional[CurriculumState] = None

    @property
    def k_column(self) -> list[int]:
        return [r.k for r in self.records]

    @property
    def losses(self) -> list[tuple[float, float]]:
        return [(r.train_loss, r.val_loss) for r in self.records]

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    if config.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=config.learning_rate, momentum=0.0)
    return torch.optim.SGD(params, lr=config.learning_rate)


def reed_loss(model, batch: torch.Tensor, k: int, config: TrainConfig,
              rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Training loss for one batch after ``k`` sampled encode-decode iterations.

    Iterates ``x^1 .. x^{k-1}`` are computed without autograd. The KL term uses
    the posterior of the final encode, the one sampled to produce ``x^k``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = batch
    x1 = None
    with torch.no_grad():
        for _ in range(k - 1):
            x = model.decode(sample_latent(model.encode(x), rng))
            if x1 is None:
                x1 = x
    dist = model.encode(x)
    xk = model.decode(sample_latent(dist, rng))
    if config.mode.first_step_loss:
        target = xk.detach() if x1 is None else x1
    else:
        target = batch
    return train_loss(target, xk, dist, config.weights)


def train_step(model, optimizer: torch.optim.Optimizer, batch: torch.Tensor, k: int,
               config: TrainConfig, rng: Optional[torch.Generator] = None) -> float:
    """One optimizer update on the trainable parameters; returns the batch loss."""
    loss = reed_loss(model, batch, k, config, rng)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss {loss.item()} at k={k}")
    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def validation_loss(model, val_set: Dataset, k: int, config: TrainConfig) -> float:
    """Mean-latent ``k``-step reconstruction loss against ``x^0`` over the validation set."""
    total, count = 0.0, 0
    for x0 in batch_iter(val_set, config.batch_size):
        xk = encode_decode_iterate(model, x0, k, latent_mode="mean")[-1]
        total += float(val_loss(x0, xk, config.weights.alpha)) * x0.shape[0]
        count += x0.shape[0]
    value = total / count
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite validation loss at k={k}")
    return value


def reed_train(config: TrainConfig, init: VAE, train_set: Dataset, val_set: Dataset):
    """Train a copy of ``init``; returns ``(model, RunLog)``. ``init`` is left untouched."""
    model = copy.deepcopy(init)
    model.encoder_trainable = not config.mode.freeze_encoder
    params = model.trainable_parameters()
    optimizer = make_optimizer(params, config)
    rng = torch.Generator().manual_seed(config.seed)
    state = CurriculumState(k=config.initial_k)
    runlog = RunLog(config=config.to_dict())

    for epoch in range(config.epochs_max):
        t0 = time.perf_counter()
        k = state.k
        model.train()
        total, count = 0.0, 0
        for batch in batch_iter(train_set, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch):
            total += train_step(model, optimizer, batch, k, config, rng) * batch.shape[0]
            count += batch.shape[0]
        model.eval()
        vl = validation_loss(model, val_set, k, config)
        runlog.records.append(EpochRecord(epoch, k, total / count, vl, time.perf_counter() - t0))
        log.info("epoch %d k=%d train=%.5f val=%.5f", epoch, k, total / count, vl)
        if config.mode.dynamic_incrementation:
            state = update_curriculum(state, vl, config)
            if state.terminated:
                log.info("k passed %d; stopping", config.k_max)
                break
    runlog.final_state = state
    return model, runlog


def pretrain_vanilla(config: TrainConfig, train_set: Dataset, val_set: Dataset):
    """Single-step VAE training from a random init with encoder and decoder trainable."""
    vanilla = replace(config, mode=ModeFlags.vanilla())
    return reed_train(vanilla, init_model(config.arch), train_set, val_set)
