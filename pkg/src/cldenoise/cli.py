"""Command line interface: ingest, train, eval, denoise, plan, table."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NonFiniteLoss

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("cldenoise")


def _add_train_flags(p):
    g = p.add_argument_group("training (overrides the plan file)")
    for name, typ in (("batch-size", int), ("epochs", int), ("decay-start-epoch", int), ("lr", float),
                      ("beta1", float), ("beta2", float), ("steps-per-epoch", int),
                      ("checkpoint-every", int), ("lambda-gan", float), ("lambda-l1", float),
                      ("lambda-ssim", float), ("lambda-tv", float), ("lambda-cl", float),
                      ("tau", float)):
        g.add_argument(f"--{name}", type=typ)
    for flag in ("use-tv", "use-ssim", "use-cl"):
        g.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--experiment", help="named ablation row, e.g. baseline or 'CL + TV + SSIM'")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="plan file whose [train]/[generator]/... sections set defaults")
    g.add_argument("--preset", help="built-in plan providing defaults (paper-faithful, desk-scale)")


def _train_config(args):
    from .harness import load_plan
    from .training import EXPERIMENTS, TrainConfig

    if args.config or args.preset:
        plan = load_plan(args.config, preset=args.preset)
        cfg, tiling = plan.train, plan.tiling
    else:
        from .inference import TilingSpec

        cfg, tiling = TrainConfig(), TilingSpec()
    if args.experiment:
        if args.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {args.experiment!r}; choose from {list(EXPERIMENTS)}")
        cfg = dataclasses.replace(cfg, **EXPERIMENTS[args.experiment])
    top = {}
    for field in ("batch_size", "epochs", "decay_start_epoch", "lr", "beta1", "beta2",
                  "steps_per_epoch", "checkpoint_every", "seed", "use_tv", "use_ssim", "use_cl"):
        value = getattr(args, field)
        if value is not None:
            top[field] = value
    weights = {f: getattr(args, f) for f in ("lambda_gan", "lambda_l1", "lambda_ssim", "lambda_tv",
                                             "lambda_cl", "tau") if getattr(args, f) is not None}
    if weights:
        top["weights"] = dataclasses.replace(cfg.weights, **weights)
    if "epochs" in top and "decay_start_epoch" not in top:
        top["decay_start_epoch"] = min(cfg.decay_start_epoch, top["epochs"])
    return dataclasses.replace(cfg, **top), tiling


def cmd_ingest(args):
    from .data import FewShotSpec, few_shot_subset, ingest, synthetic_dataset, write_manifest

    if args.synthetic:
        ds = synthetic_dataset(n_images=args.n_images, size=args.size, noise_sigma=args.noise_sigma,
                               seed=args.seed, patch_size=args.patch_size,
                               test_fraction=args.test_fraction)
    else:
        if not args.stack:
            raise ConfigError("ingest needs --stack or --synthetic")
        ds = ingest(args.stack, args.format, patch_size=args.patch_size,
                    test_fraction=args.test_fraction, seed=args.seed, low_pct=args.low_pct,
                    high_pct=args.high_pct, name=args.name)
    if args.few_shot:
        ds = few_shot_subset(ds, FewShotSpec.parse(args.few_shot, args.few_shot_seed))
    write_manifest(ds, args.out)
    print(f"{args.out}: {ds.name}, {ds.n_train} train / {len(ds.test_indices)} test pairs")


def cmd_train(args):
    from .data import dataset_from_manifest
    from .training import TrainState, fit

    cfg, _ = _train_config(args)
    ds = dataset_from_manifest(args.manifest)
    out = Path(args.out)
    state = None
    ckpt = out / "checkpoint.pt"
    if args.resume:
        if not ckpt.exists():
            raise DataError(f"--resume given but {ckpt} does not exist")
        state = TrainState.load(ckpt, cfg)
        print(f"resuming at epoch {state.epoch}, step {state.global_step}")

    def progress(event, st, info):
        if event == "epoch_end" and (st.epoch % max(1, args.log_every) == 0 or st.epoch == cfg.epochs):
            print(f"epoch {st.epoch}/{cfg.epochs} step {st.global_step}")

    fit(ds, cfg, callbacks=[progress], state=state, out_dir=out)
    print(f"checkpoint: {ckpt}")


def cmd_eval(args):
    from .data import dataset_from_manifest
    from .inference import TilingSpec
    from .metrics import evaluate
    from .models import load_checkpoint

    ds = dataset_from_manifest(args.manifest)
    gen = load_checkpoint(args.checkpoint)["generator"]
    tiling = TilingSpec(args.tile or gen.cfg.input_size, args.overlap, args.blend)
    report = evaluate(gen, ds, tiling=tiling, experiment=args.experiment, dataset_name=args.dataset_name)
    report.to_csv(args.out)
    for key, agg in report.aggregates.items():
        print(",".join(key), f"psnr={agg['psnr']:.3f} ssim={agg['ssim']:.4f} nrmse={agg['nrmse']:.4f}")


def cmd_denoise(args):
    import tifffile

    from .data import NormalizationRecord, normalize, read_manifest
    from .inference import TilingSpec, denoise_frame, export_crops, write_denoised
    from .models import load_checkpoint

    gen = load_checkpoint(args.checkpoint)["generator"]
    tiling = TilingSpec(args.tile or gen.cfg.input_size, args.overlap, args.blend)
    raw = np.asarray(tifffile.imread(args.input), dtype=np.float64)
    if raw.ndim not in (2, 3):
        raise DataError(f"{args.input}: expected a frame or a stack, got shape {raw.shape}")
    if args.manifest:
        m = read_manifest(args.manifest)
        record = NormalizationRecord(float(m["low_pct"]), float(m["high_pct"]), float(m["p_low"]),
                                     float(m["p_high"]))
        frames = record.apply(raw)
    else:
        frames, record = normalize(raw, args.low_pct, args.high_pct)
    stack = frames[None] if frames.ndim == 2 else frames
    out = np.stack([denoise_frame(gen, f, tiling) for f in stack])
    out = out[0] if frames.ndim == 2 else out
    write_denoised(args.out, out, record, raw_path=args.raw_out)
    if args.crop:
        box = tuple(int(v) for v in args.crop.split(","))
        gt = tifffile.imread(args.gt) if args.gt else None
        gt = record.apply(gt) if gt is not None else out if out.ndim == 2 else out[0]
        first_in = stack[0]
        first_out = out if out.ndim == 2 else out[0]
        export_crops(first_in, first_out, gt, box, args.crop_dir or Path(args.out).parent)
    print(f"wrote {args.out}")


def cmd_plan(args):
    from .harness import load_plan, run_plan

    plan = load_plan(args.config, preset=args.preset, output_dir=args.out)
    cells = plan.cells()
    if args.dry_run:
        for cell in cells:
            print(cell.cell_id)
        return
    result = run_plan(plan, force=args.force, make_figures=not args.no_figures)
    print(f"{len(result.ran)} ran, {len(result.skipped)} skipped, {len(result.failed)} failed")
    print(f"report: {result.report_path}")
    if (plan.output_dir / "table.txt").exists():
        print((plan.output_dir / "table.txt").read_text())


def cmd_table(args):
    from .harness import make_table

    table = make_table(args.reports, args.out, make_figures=not args.no_figures)
    print(table.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldenoise", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="stack -> dataset manifest")
    p.add_argument("--stack")
    p.add_argument("--format", default="tiff-stack",
                   choices=("tiff-stack", "directory-of-images", "raw-array-file"))
    p.add_argument("--synthetic", action="store_true", help="synthetic shapes dataset instead of a stack")
    p.add_argument("--n-images", type=int, default=20)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--name")
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--low-pct", type=float, default=0.1)
    p.add_argument("--high-pct", type=float, default=99.9)
    p.add_argument("--few-shot", help="'all' or a training sample count")
    p.add_argument("--few-shot-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one cell")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=10)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on the test split"),
                                 ("denoise", cmd_denoise, "denoise a frame or stack")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--tile", type=int)
        p.add_argument("--overlap", type=int, default=32)
        p.add_argument("--blend", default="linear-ramp", choices=("linear-ramp", "uniform-average"))
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--manifest", required=True)
            p.add_argument("--experiment", default="model")
            p.add_argument("--dataset-name")
        else:
            p.add_argument("--input", required=True, help="TIFF frame or stack")
            p.add_argument("--manifest", help="reuse the training normalization")
            p.add_argument("--low-pct", type=float, default=0.1)
            p.add_argument("--high-pct", type=float, default=99.9)
            p.add_argument("--raw-out", help="also write a uint16 TIFF in raw units")
            p.add_argument("--crop", help="r0,r1,c0,c1 crop to export as PNGs")
            p.add_argument("--gt", help="ground-truth TIFF for the crop panel")
            p.add_argument("--crop-dir")

    p = sub.add_parser("plan", help="run an experiment matrix")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="plan file")
    src.add_argument("--preset", help="paper-faithful or desk-scale")
    p.add_argument("--out", help="output directory (overrides the plan)")
    p.add_argument("--force", action="store_true", help="rerun completed cells")
    p.add_argument("--dry-run", action="store_true", help="list cells only")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("table", help="aggregate metric reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="directory for table.csv / table.txt / figures")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
