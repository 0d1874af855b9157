"""Command-line entry point: ``phydiff <subcommand> [options] [--section.key value ...]``.

Subcommands
    make-phantom   write a synthetic DWI stack, gradient table and tract atlas
    adc-atlas      estimate per-shell ADC atlases from the training directions
    train          train the denoiser (stage 1) or the tract adapter (stage 2)
    sample         synthesize held-out directions from a checkpoint
    eval           SSIM/PSNR report, error maps and a comparison figure

Every subcommand reads an optional ``--config`` file; any config key can be
overridden as ``--schedule.T 64``.  Exit status: 0 success, 2 usage error,
1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import DEFAULTS, RunConfig
from .engine import load_checkpoint, save_checkpoint, smoothed
from .errors import ConfigError, PhyDiffError
from .metrics import error_map, evaluate_volumes, rescale_pair, write_pgm
from .physics import estimate_adc_atlas
from .volume_io import DWIStack, minmax_normalize, read_dvol, read_gradients, write_dvol

log = logging.getLogger("phydiff")

DWI_PREFIX = "dwi"
ATLAS_FILE = "atlas.dvol"
CKPT_FILE = "checkpoint.pdck"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides run.seed and $PHYDIFF_SEED")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="phydiff", description="Physics-guided diffusion synthesis of dMRI slices")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("make-phantom", help="write a synthetic phantom")
    _common(p)

    p = sub.add_parser("adc-atlas", help="estimate ADC atlases")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by make-phantom")

    p = sub.add_parser("train", help="train a stage")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=("denoiser", "adapter"))
    p.add_argument("--checkpoint", help="stage-1 checkpoint (required for --stage adapter)")

    p = sub.add_parser("sample", help="synthesize held-out directions")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("eval", help="score predictions against references")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--bvals", help="b-values of the volumes (defaults to the reference's .bval)")
    p.add_argument("--figure-rows", type=int, default=4)
    parser.set_defaults(_commands=sub.choices)
    return parser


def parse_overrides(tokens) -> dict:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if key not in DEFAULTS:
            raise UsageError(f"unrecognized option --{key}")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"--{key} needs a value") from None
        out[key] = value
    return out


def resolve_config(args, overrides) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    env_seed = os.environ.get("PHYDIFF_SEED")
    if env_seed is not None and "run.seed" not in overrides:
        cfg["run.seed"] = env_seed
    for key, value in overrides.items():
        cfg[key] = value
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    return cfg


def _load_data(cfg: RunConfig, data_dir):
    data_dir = Path(data_dir)
    stack = DWIStack.load(data_dir / DWI_PREFIX)
    atlas_path = data_dir / ATLAS_FILE
    atlas = read_dvol(atlas_path) if atlas_path.exists() else None
    return pipeline.build_data(cfg, stack, atlas)


# -- subcommands ------------------------------------------------------------


def cmd_make_phantom(cfg, args, out: Path):
    phantom, stack = pipeline.build_phantom(cfg)
    stack.save(out / DWI_PREFIX)
    write_dvol(out / ATLAS_FILE, phantom.atlas)
    write_dvol(out / "mask.dvol", phantom.mask[None].astype(np.float32))
    cfg.save(out / "config.txt")
    return (
        f"make-phantom: {stack.data.shape[0]} volumes x {stack.slice_count} slices "
        f"{stack.height}x{stack.width}, {phantom.spec.n_tracts} tracts -> {out}"
    )


def cmd_adc_atlas(cfg, args, out: Path):
    data = _load_data(cfg, args.data)
    tcfg = pipeline.train_config(cfg)
    written = []
    for shell in data.shells:
        atlas = estimate_adc_atlas(data.raw, shell, mean=tcfg.adc_mean, directions=data.splits["train"])
        path = out / f"adc_b{shell:g}.dvol"
        write_dvol(path, atlas.values[None])
        written.append(f"b={shell:g} (N={atlas.n_directions}, max {atlas.values.max():.4g})")
    return "adc-atlas: " + ", ".join(written) + f" -> {out}"


def cmd_train(cfg, args, out: Path):
    if args.stage:
        cfg["train.stage"] = args.stage
    init = None
    if args.checkpoint:
        init = load_checkpoint(args.checkpoint)
    elif cfg["train.stage"] == "adapter":
        raise ConfigError("--stage adapter requires --checkpoint from a denoiser run")
    data = _load_data(cfg, args.data)
    model, adapter, result, ckpt = pipeline.train(cfg, data, init_checkpoint=init)
    save_checkpoint(out / CKPT_FILE, ckpt)
    cfg.save(out / "config.txt")
    smooth = smoothed(result.losses)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "smoothed"])
        for i, (l, s) in enumerate(zip(result.losses, smooth), 1):
            writer.writerow([i, f"{l:.8f}", f"{s:.8f}"])
    with open(out / "val.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "val_loss"])
        for i, v in enumerate(result.val_losses, 1):
            writer.writerow([i, f"{v:.8f}"])
    from .plotting import loss_figure

    steps_per_epoch = -(-len(data.items("train")) // cfg["train.batch_size"])
    loss_figure(out / "loss.png", result.losses, smooth, result.val_losses, steps_per_epoch)
    first, last = (smooth[0], smooth[-1]) if len(smooth) else (float("nan"),) * 2
    return (
        f"train[{cfg['train.stage']}]: {result.steps} steps, {result.epochs} epochs, "
        f"smoothed loss {first:.4f} -> {last:.4f}"
        + (" (early stop)" if result.stopped_early else "")
        + f" -> {out / CKPT_FILE}"
    )


def cmd_sample(cfg, args, out: Path):
    ckpt = load_checkpoint(args.checkpoint)
    ck_cfg = RunConfig.from_text(ckpt.config_text)
    data = _load_data(ck_cfg, args.data)
    ck_cfg, model, adapter = pipeline.load_models(ckpt, data)
    ck_cfg["sample.batch_size"] = cfg["sample.batch_size"]
    vols, imgs = pipeline.synthesize(ck_cfg, model, data, args.split, seed=cfg["run.seed"], adapter=adapter)
    bvals, bvecs = data.raw.bvals[vols], data.raw.bvecs[vols]
    DWIStack(imgs.astype(np.float32), bvals, bvecs).save(out / "samples")
    norm = minmax_normalize(data.raw.data)
    DWIStack(norm[vols].astype(np.float32), bvals, bvecs).save(out / "reference")
    b0 = np.broadcast_to(norm[data.raw.bvals <= 0].mean(axis=0), imgs.shape)
    DWIStack(b0.astype(np.float32), bvals, bvecs).save(out / "b0copy")
    return f"sample: {len(vols)} directions x {data.slice_count} slices ({args.split} split) -> {out / 'samples.dvol'}"


def cmd_eval(cfg, args, out: Path):
    pred = read_dvol(args.pred)
    ref = read_dvol(args.ref)
    bvals = None
    if args.bvals:
        with open(args.bvals) as fh:
            bvals = np.array([float(v) for v in fh.read().split()])
    else:
        ref_bval = Path(args.ref).with_suffix(".bval")
        if ref_bval.exists():
            bvals = read_gradients(ref_bval, ref_bval.with_suffix(".bvec")).bvals
    report = evaluate_volumes(pred, ref, bvals)
    (out / "report.csv").write_text(report.rows_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    maps = out / "error_maps"
    maps.mkdir(exist_ok=True)
    refs, preds, errs, titles = [], [], [], []
    for row in report.rows:
        p, r = rescale_pair(pred[row.index, row.slice_index], ref[row.index, row.slice_index])
        err = error_map(p, r)
        write_pgm(maps / f"err_v{row.index:03d}_z{row.slice_index:03d}.pgm", err)
        if len(refs) < args.figure_rows and row.slice_index == pred.shape[1] // 2:
            refs.append(r), preds.append(p), errs.append(err)
            titles.append(f"v{row.index} b={row.bval:g}")
    if refs:
        from .plotting import comparison_figure

        comparison_figure(out / "comparison.png", refs, preds, errs, titles)
    agg = report.groups()["arbitrary"]
    return (
        f"eval: n={agg['n']} SSIM {agg['ssim_mean']:.1f}% (+/- {agg['ssim_std']:.1f}) "
        f"PSNR {agg['psnr_mean']:.1f} dB (+/- {agg['psnr_std']:.1f}) -> {out / 'summary.csv'}"
    )


COMMANDS = {
    "make-phantom": cmd_make_phantom,
    "adc-atlas": cmd_adc_atlas,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        overrides = parse_overrides(rest)
    except UsageError as exc:
        sub = args._commands[args.command]
        print(f"{sub.prog}: {exc}\n{sub.format_usage()}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args, overrides)
        pipeline.seed_everything(cfg["run.seed"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        print(COMMANDS[args.command](cfg, args, out))
    except (PhyDiffError, ValueError, OSError) as exc:
        print(f"phydiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
