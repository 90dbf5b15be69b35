"""``mocodiff`` command line.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
Diagnostics go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .dataio import FormatError
from .pipeline import ConfigError, UsageError, load_config

log = logging.getLogger("mocodiff")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args, **overrides):
    return load_config(getattr(args, "config", None), overrides)


def cmd_phantom_gen(args):
    cfg = _config(args, seed=args.seed)
    pipeline.phantom_gen(args.count, args.size, cfg.seed, args.out, plane=args.plane)


def cmd_simulate(args):
    cfg = _config(args, seed=args.seed, order=args.order, workers=args.workers)
    pipeline.simulate(args.inp, args.out, args.severity, args.pairs_per_clean, cfg.seed, cfg.order, cfg.n_workers())


def cmd_train_ddpm(args):
    cfg = _config(
        args,
        seed=args.seed,
        timesteps=args.timesteps,
        ddpm_steps=args.steps,
        paper_literal_noising=True if args.paper_literal_noising else None,
    )
    manifest = args.manifest or cfg.paths.get("manifest")
    if not manifest:
        raise UsageError("no clean manifest: pass --manifest or set paths.manifest in the config")
    pipeline.train_ddpm_cmd(cfg, manifest, args.out_checkpoint, plane=args.plane)


def cmd_train_baseline(args):
    cfg = _config(args, seed=args.seed, unet_steps=args.steps)
    pairs = args.pairs or cfg.paths.get("pairs")
    if not pairs:
        raise UsageError("no pairs manifest: pass --pairs or set paths.pairs in the config")
    pipeline.train_baseline_cmd(cfg, pairs, args.out_checkpoint, label=args.label)


def cmd_correct(args):
    cfg = _config(
        args,
        seed=args.seed,
        workers=args.workers,
        paper_literal_noising=True if args.paper_literal_noising else None,
    )
    pipeline.correct_cmd(cfg, args.checkpoint, args.inp, args.out, args.method, args.n, args.split, args.label)


def cmd_sweep(args):
    cfg = _config(args, seed=args.seed)
    pipeline.sweep_cmd(cfg, args.checkpoint, args.pairs, args.out, args.n_list, args.split)


def cmd_evaluate(args):
    cfg = _config(args)
    pipeline.evaluate_cmd(cfg, args.inp, args.out, args.method, args.split, args.column)


def cmd_report(args):
    pipeline.report_cmd(args.records, args.out)


def cmd_prepare_nifti(args):
    pipeline.prepare_nifti(
        args.clean,
        args.moving,
        args.out,
        plane=args.plane,
        patient=args.patient,
        pad_multiple=args.pad_multiple,
        register=not args.no_register,
    )


def cmd_experiment(args):
    cfg = _config(args, seed=args.seed)
    pipeline.run_experiment(cfg, args.out, cache_dir=args.cache, sweep=not args.no_sweep)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mocodiff", description="MRI motion artifact simulation and correction")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="JSON experiment config; flags override it")
        return sp

    sp = add("phantom-gen", cmd_phantom_gen, "generate clean synthetic phantoms")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--plane", default="transverse")
    sp.add_argument("--out", required=True)

    sp = add("simulate", cmd_simulate, "create motion-corrupted pairs")
    sp.add_argument("--in", dest="inp", required=True, help="clean manifest.csv")
    sp.add_argument("--severity", type=float, default=3.0)
    sp.add_argument("--pairs-per-clean", type=int, default=2)
    sp.add_argument("--order", choices=("linear", "centric"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-ddpm", cmd_train_ddpm, "train the diffusion model on clean images")
    sp.add_argument("--manifest", help="clean manifest.csv (overrides paths.manifest)")
    sp.add_argument("--out-checkpoint", required=True)
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--plane", help="train on one plane only")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--paper-literal-noising", action="store_true")

    sp = add("train-baseline", cmd_train_baseline, "train the supervised U-Net on pairs")
    sp.add_argument("--pairs", help="pairs.csv (overrides paths.pairs)")
    sp.add_argument("--out-checkpoint", required=True)
    sp.add_argument("--label", default="UNet Synth", choices=("UNet Synth", "UNet Real"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("correct", cmd_correct, "correct motion-corrupted images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="inp", required=True, help="pairs.csv or manifest.csv")
    sp.add_argument("--method", choices=("ddpm", "unet"), default="ddpm")
    sp.add_argument("--n", type=int, help="re-entry timestep (default 150)")
    sp.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    sp.add_argument("--label", help="method label written to corrected.csv")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--paper-literal-noising", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("sweep", cmd_sweep, "metrics as a function of the re-entry step")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--n-list", type=_int_list)
    sp.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score images against clean references")
    sp.add_argument("--in", dest="inp", required=True, help="corrected.csv or pairs.csv")
    sp.add_argument("--method", help="label for the records (default: from the manifest)")
    sp.add_argument("--column", help="prediction path column")
    sp.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    sp.add_argument("--out", required=True, help="records CSV")

    sp = add("report", cmd_report, "mean ± std tables per plane", config=False)
    sp.add_argument("--records", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = add("prepare-nifti", cmd_prepare_nifti, "normalize, slice and register a real volume pair", config=False)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--plane", default="transverse", choices=("sagittal", "coronal", "transverse"))
    sp.add_argument("--patient", default="R0000")
    sp.add_argument("--pad-multiple", type=int, default=4)
    sp.add_argument("--no-register", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("experiment", cmd_experiment, "run the full desk-scale phantom study")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache", help="directory of reusable trained checkpoints")
    sp.add_argument("--no-sweep", action="store_true", help="skip the n-sweep")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mocodiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError) as exc:
        print(f"mocodiff {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
