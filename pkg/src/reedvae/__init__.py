"""Re-encode/decode (REED) training for VAEs with an iterative-degradation evaluation harness."""

from reedvae.data import Dataset, batch_iter, generate_synthetic, load_dataset, split
from reedvae.metrics import (
    LossWeights,
    frechet_feature_distance,
    mse,
    perceptual_distance,
    psnr,
    ssim,
    train_loss,
    val_loss,
)
from reedvae.model import (
    VAE,
    ArchConfig,
    LatentDistribution,
    decode,
    encode,
    encode_decode_iterate,
    init_model,
    kl_standard_normal,
    latent_mean,
    sample_latent,
)
from reedvae.spectral import (
    SpectrumProfile,
    high_frequency_retention,
    magnitude_spectrum,
    spectral_degradation_series,
)
from reedvae.train import (
    CurriculumState,
    ModeFlags,
    RunLog,
    TrainConfig,
    pretrain_vanilla,
    reed_train,
    train_step,
    update_curriculum,
)
from reedvae.evaluation import (
    AblationVariant,
    EvalConfig,
    MetricReport,
    apply_edit_hook,
    compare_models,
    default_variants,
    evaluate_iterative,
    run_ablation,
)
from reedvae.persistence import emit_plots, load_checkpoint, save_checkpoint, write_report

__version__ = "0.1.0"

__all__ = [
    "Dataset", "batch_iter", "generate_synthetic", "load_dataset", "split",
    "LossWeights", "frechet_feature_distance", "mse", "perceptual_distance", "psnr", "ssim",
    "train_loss", "val_loss",
    "VAE", "ArchConfig", "LatentDistribution", "decode", "encode", "encode_decode_iterate",
    "init_model", "kl_standard_normal", "latent_mean", "sample_latent",
    "SpectrumProfile", "high_frequency_retention", "magnitude_spectrum", "spectral_degradation_series",
    "CurriculumState", "ModeFlags", "RunLog", "TrainConfig", "pretrain_vanilla", "reed_train",
    "train_step", "update_curriculum",
    "AblationVariant", "EvalConfig", "MetricReport", "apply_edit_hook", "compare_models",
    "default_variants", "evaluate_iterative", "run_ablation",
    "emit_plots", "load_checkpoint", "save_checkpoint", "write_report",
]
