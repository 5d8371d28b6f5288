"""Command-line interface.

Usage::

    kb-regulate pipeline --config paper_example --out results/
    kb-regulate pipeline --config my.json --stage dmd
    kb-regulate identify --config my.json --out results/

Every subcommand except ``pipeline`` runs the stage of the same name on the
artifacts already present in the output directory.

Exit codes: 0 success, 1 numerical-stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline as pl

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kb-regulate",
        description="Data-driven identification and backstepping output regulation "
                    "of a parabolic PDE.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pipeline",) + pl.STAGES:
        p = sub.add_parser(name, help="run all stages" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", required=True,
                       help="JSON configuration file, or the name of a bundled one (paper_example)")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
        p.add_argument("--seed", type=int, default=None,
                       help="seed for randomized corpora; the pipeline itself is deterministic")
        if name == "pipeline":
            p.add_argument("--stage", choices=pl.STAGES, action="append",
                           help="run only this stage (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = pl.load_config(args.config)
    except pl.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.get("output_dir", "out"))
    if args.command == "pipeline":
        stages = args.stage or list(pl.STAGES)
    else:
        stages = [args.command]
    try:
        pl.run_pipeline(cfg, out, stages, log=lambda s: print(s, file=sys.stderr))
    except pl.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    if "identify" in stages:
        print(pl.summary_table(cfg, out))
    print(f"artifacts written to {out}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
