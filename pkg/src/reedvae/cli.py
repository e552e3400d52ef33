"""Command-line entry point: ``reedvae <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from reedvae import __version__
from reedvae.config import (
    MODES,
    eval_config,
    load_config,
    pretrain_config,
    resolve_seed,
    split_fractions,
    train_config,
)
from reedvae.data import Dataset, generate_synthetic, load_dataset, save_images, split
from reedvae.errors import ConfigError, ReedError
from reedvae.evaluation import (
    EditSpec,
    compare_models,
    default_variants,
    evaluate_iterative,
    run_ablation,
)
from reedvae.model import encode_decode_iterate
from reedvae.persistence import (
    emit_plots,
    load_checkpoint,
    save_checkpoint,
    write_band_table,
    write_manifest,
    write_report,
    write_table,
)
from reedvae.spectral import high_frequency_retention, magnitude_spectrum
from reedvae.train import pretrain_vanilla, reed_train

log = logging.getLogger("reedvae")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@contextlib.contextmanager
def usage_phase():
    """Errors raised while interpreting flags and config become exit code 2."""
    try:
        yield
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _settings(args):
    with usage_phase():
        cfg = load_config(args.config, args.set)
        seed = resolve_seed(cfg, args.seed)
    return cfg, seed


def _splits(args, cfg, seed):
    ds = load_dataset(args.data, target_size=int(cfg["data.size"]))
    with usage_phase():
        fractions = split_fractions(cfg)
    return split(ds, fractions, seed=seed)


def _manifest(out: Path, config: dict, dataset: Dataset, seed: int) -> None:
    write_manifest(out / "manifest.json", config, dataset.fingerprint(), seed, __version__)


# --- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    with usage_phase():
        if args.count < 1 or args.size < 8:
            raise ConfigError("--count must be >= 1 and --size >= 8")
        seed = resolve_seed({"run.seed": 0}, args.seed)
    ds = generate_synthetic(args.count, args.size, seed=seed, channels=args.channels)
    out = _out_dir(args.out)
    save_images(ds, out)
    _manifest(out, {"count": args.count, "size": args.size, "channels": args.channels}, ds, seed)
    log.info("wrote %d images to %s", len(ds), out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, seed = _settings(args)
    with usage_phase():
        tc = pretrain_config(cfg, seed)
    train_set, val_set, _ = _splits(args, cfg, seed)
    model, runlog = pretrain_vanilla(tc, train_set, val_set)
    out = _out_dir(args.out)
    runlog.checkpoint_id = save_checkpoint(model, out / "model.ckpt", runlog.final_state)
    runlog.write(out / "runlog.jsonl")
    _manifest(out, {"train": tc.to_dict(), "checkpoint_id": runlog.checkpoint_id}, train_set, seed)
    log.info("final val loss %.6g; checkpoint %s", runlog.records[-1].val_loss, runlog.checkpoint_id)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, seed = _settings(args)
    init, _ = load_checkpoint(args.init)
    with usage_phase():
        if args.k is not None and args.k < 1:
            raise ConfigError("--k must be >= 1")
        if args.mode == "vanilla" and args.k not in (None, 1):
            raise ConfigError("--mode vanilla always uses k=1")
        tc = train_config(cfg, seed, args.mode, args.k)
        tc = replace(tc, arch=init.arch)
    train_set, val_set, _ = _splits(args, cfg, seed)
    model, runlog = reed_train(tc, init, train_set, val_set)
    out = _out_dir(args.out)
    runlog.checkpoint_id = save_checkpoint(model, out / "model.ckpt", runlog.final_state)
    runlog.write(out / "runlog.jsonl")
    _manifest(out, {"train": tc.to_dict(), "mode": args.mode, "checkpoint_id": runlog.checkpoint_id}, train_set, seed)
    log.info("k schedule %s; checkpoint %s", runlog.k_column, runlog.checkpoint_id)
    return EXIT_OK


def _eval_set(args, cfg, seed) -> Dataset:
    if args.split == "all":
        return load_dataset(args.data, target_size=int(cfg["data.size"]), split_tag="test")
    tr, va, te = _splits(args, cfg, seed)
    return {"train": tr, "val": va, "test": te}[args.split]


def cmd_eval(args) -> int:
    cfg, seed = _settings(args)
    with usage_phase():
        edit = EditSpec.parse(args.edit) if args.edit else None
        ec = eval_config(cfg, seed, args.checkpoints, args.latent_mode, args.smooth, edit)
    model, _ = load_checkpoint(args.checkpoint)
    test_set = _eval_set(args, cfg, seed)
    report, traj = evaluate_iterative(model, test_set, ec, name=Path(args.checkpoint).stem, return_trajectory=True)
    out = _out_dir(args.out)
    write_report(report, out / "report.csv")
    write_report(report, out / "report.json", format="json")
    x0 = test_set.tensor()
    strips = {
        f"{test_set.ids[i]}": [x0[i]] + [traj[c - 1][i] for c in ec.checkpoints]
        for i in range(min(args.strips, len(test_set)))
    }
    emit_plots(out / "plots", [(report.name, report)], strips)
    log.info("%s", "; ".join(f"mse@{c}={report.value('mse', c):.4g}" for c in ec.checkpoints))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, seed = _settings(args)
    with usage_phase():
        base = train_config(cfg, seed, "it-fsl-di")
        pre = pretrain_config(cfg, seed)
        ec = eval_config(cfg, seed)
        variants = default_variants()
        if args.variants:
            wanted = [v.strip() for v in args.variants.split(",") if v.strip()]
            known = {v.name for v in variants}
            unknown = [w for w in wanted if w not in known]
            if unknown:
                raise ConfigError(f"unknown variant(s) {unknown}; choose from {sorted(known)}")
            variants = [v for v in variants if v.name in wanted]
    splits = _splits(args, cfg, seed)
    init = None
    if args.init:
        init, _ = load_checkpoint(args.init)
    out = _out_dir(args.out)
    if init is None:
        init, runlog = pretrain_vanilla(pre, splits[0], splits[1])
        runlog.checkpoint_id = save_checkpoint(init, out / "pretrained.ckpt")
        runlog.write(out / "pretrain_runlog.jsonl")
    report = run_ablation(base, splits, variants, ec, init=init)
    write_report(report, out / "ablation.csv")
    write_report(report, out / "ablation.json", format="json")
    ordered = report.ordered_reports()
    if ordered:
        table = compare_models(ordered)
        write_report(table, out / "comparison.csv")
        write_report(table, out / "comparison.json", format="json")
        emit_plots(out / "plots", ordered)
    runlogs = _out_dir(out / "runlogs")
    for name, runlog in report.runlogs.items():
        runlog.write(runlogs / f"{name}.jsonl")
    _manifest(out, {"train": base.to_dict(), "pretrain": pre.to_dict(),
                    "variants": report.variants, "errors": report.errors}, splits[0], seed)
    return EXIT_OK if ordered else EXIT_RUNTIME


def cmd_spectra(args) -> int:
    cfg, seed = _settings(args)
    with usage_phase():
        if (args.images is None) == (args.data is None):
            raise ConfigError("pass exactly one of --images or --data")
        if args.data is not None and args.checkpoint is None:
            raise ConfigError("--data needs --checkpoint (use --images for inputs only)")
        if args.iterations < 1:
            raise ConfigError("--iterations must be >= 1")
    source = args.images or args.data
    ds = load_dataset(source, target_size=int(cfg["data.size"]))
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    out = _out_dir(args.out)
    profiles, spectra = {}, {}
    x0 = ds.images
    iterate = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        traj = encode_decode_iterate(model, ds.tensor(), args.iterations)
        iterate = traj[-1].numpy().transpose(0, 2, 3, 1)
    rows = []
    for i, ident in enumerate(ds.ids):
        profiles[f"{ident}_x0"] = magnitude_spectrum(x0[i])
        if iterate is not None:
            profiles[f"{ident}_x{args.iterations}"] = magnitude_spectrum(iterate[i])
            rows.append([ident, args.iterations, f"{high_frequency_retention(x0[i], iterate[i], args.cutoff):.6g}"])
    spectra.update(profiles)
    write_band_table(profiles, out / "bands.csv")
    emit_plots(out, spectra=spectra)
    if rows:
        write_table(out / "retention.csv", ["image", "iterations", "retention"], rows)
        log.info("mean retention after %d iterations: %.4f", args.iterations,
                 float(np.mean([float(r[2]) for r in rows])))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reedvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, data_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="overrides $REED_SEED and run.seed")
        p.add_argument("--data", required=data_required, help="image directory (PNG/PPM)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="write a procedural image dataset")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a single-step VAE from scratch")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a checkpoint's decoder with iterative training")
    common(p)
    p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--mode", choices=sorted(MODES), default="it-fsl-di")
    p.add_argument("--k", type=int, help="static k (it, it-fsl) or initial k (it-fsl-di)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of repeated encode/decode against the input")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--checkpoints", help="comma-separated iteration counts, e.g. 5,15,25")
    p.add_argument("--latent-mode", choices=("mean", "sample"))
    p.add_argument("--smooth", help="off or gaussian:<sigma>, applied after every decode")
    p.add_argument("--edit", help="pixel edit between iterations, e.g. color_shift:0.05")
    p.add_argument("--strips", type=int, default=4, help="number of trajectory strips to draw")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the component ablation grid")
    common(p)
    p.add_argument("--init", help="pretrained checkpoint (default: pretrain first)")
    p.add_argument("--variants", help="comma-separated subset of variant names")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("spectra", help="magnitude spectra, band energies and high-frequency retention")
    common(p, data_required=False)
    p.add_argument("--images", help="image directory; spectra of inputs only")
    p.add_argument("--checkpoint", help="with --data: compare inputs to their iterates")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--cutoff", type=float, default=0.5, help="retention cutoff as a fraction of Nyquist")
    p.add_argument("--limit", type=int, default=8, help="max images (0 = all)")
    p.set_defaults(func=cmd_spectra)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (ReedError, OSError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
