"""Command-line entry point for the stage pipeline."""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .pipeline import STAGES, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentguard",
        description="Adversarially trained classifier with latent-space k-NN "
                    "detection: ingest data, train, build the detector, attack "
                    "it, and report metrics.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--dataset", default=None, help="override the dataset id")
        p.add_argument("--stage-dir", default=None,
                       help="override the artifact directory "
                            "(or set LATENTGUARD_STAGE_DIR)")
        p.add_argument("--force", action="store_true",
                       help="proceed despite config-hash mismatches")
        p.add_argument("--quiet", action="store_true", help="log to file only")
        if stage == "ingest":
            p.add_argument("--source", required=True, help="raw dataset directory")
            p.add_argument("--format", dest="source_format", default="idx",
                           choices=("idx", "svhn"), help="raw source layout")
        if stage in ("attack", "evaluate"):
            p.add_argument("--name", default=None, help="run a single attack entry")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, dataset=args.dataset,
                      stage_dir=args.stage_dir)
    kwargs = {}
    if args.stage == "ingest":
        kwargs = {"source": args.source, "source_format": args.source_format}
    elif args.stage in ("attack", "evaluate"):
        kwargs = {"name": args.name}
    try:
        run_stage(args.stage, cfg, force=args.force, quiet=args.quiet, **kwargs)
    except Exception as e:  # present pipeline errors without a traceback
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
