"""Command-line entry point.

Every verb runs from one JSON config (or a bundled profile); flags only
override config keys. Failures exit nonzero with a machine-readable error
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import PROFILES, apply_overrides, load_config, save_config
from .errors import VeilsimError


def _add_common(parser):
    parser.add_argument("-c", "--config", help="path to the experiment config JSON")
    parser.add_argument(
        "--profile", choices=sorted(PROFILES), help="bundled profile instead of --config"
    )
    parser.add_argument("--output-root", help="override output_root")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config key (repeatable)",
    )


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    elif args.profile:
        cfg = PROFILES[args.profile]()
    else:
        raise VeilsimError("pass --config or --profile")
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.output_root:
        cfg.output_root = args.output_root
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="veilsim",
        description="Compound optical degradation pipeline: simulate, generate, distill, restore.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("simulate", "build the synthetic source and oracle-target dataset"),
        ("train-veilgen", "stage I: hybrid diffusion training of the generator"),
        ("generate-pairs", "stage I output: synthesize the paired dataset"),
        ("distill", "stage II: distill the generator into the one-pass degrader"),
        ("train-deveiler", "stage III: two-phase restoration training"),
        ("evaluate", "PSNR/SSIM on the held-out test splits"),
        ("sweep", "data-efficiency sweep over target-corpus sizes"),
        ("benchmark-ddn", "teacher-vs-student latency benchmark"),
        ("fit-affine", "least-squares affine fit from a correspondences CSV"),
        ("write-config", "write a bundled profile to a config file"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "train-deveiler":
            p.add_argument("--phase", choices=["1", "2", "both"], default="both")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="explicit restorer checkpoint")
        if name == "fit-affine":
            p.add_argument("--csv", help="correspondences CSV (x,y,x',y' per line)")
            p.add_argument("--out", help="output transform JSON")
        if name == "write-config":
            p.add_argument("-o", "--output", required=True, help="config file to write")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "write-config":
            save_config(cfg, args.output)
            print(f"wrote {args.output}")
            return 0
        if args.command == "simulate":
            out = pipeline.cmd_simulate(cfg)
            print(f"dataset written to {out}")
        elif args.command == "train-veilgen":
            out = pipeline.cmd_train_veilgen(cfg)
            print(f"generator checkpoints in {out}")
        elif args.command == "generate-pairs":
            out = pipeline.cmd_generate_pairs(cfg)
            print(f"paired dataset in {out}")
        elif args.command == "distill":
            out = pipeline.cmd_distill(cfg)
            print(f"distilled degrader in {out}")
        elif args.command == "train-deveiler":
            out = pipeline.cmd_train_deveiler(cfg, phase=args.phase)
            print(f"restorer checkpoints in {out}")
        elif args.command == "evaluate":
            results = pipeline.cmd_evaluate(cfg, checkpoint=args.checkpoint)
            print(json.dumps(results, indent=2, sort_keys=True))
        elif args.command == "sweep":
            rows = pipeline.cmd_sweep(cfg)
            for n, value in rows:
                print(f"N={n:3d}  PSNR={value:.3f} dB")
        elif args.command == "benchmark-ddn":
            summary = pipeline.cmd_benchmark_ddn(cfg)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "fit-affine":
            transform = pipeline.cmd_fit_affine(cfg, csv_path=args.csv, output_json=args.out)
            print(json.dumps(transform.params()))
        return 0
    except VeilsimError as exc:
        json.dump({"error": exc.payload()}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
