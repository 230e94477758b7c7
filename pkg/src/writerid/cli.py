"""Batch CLI: one subcommand per pipeline stage plus ``pipeline`` for all of them.

Examples:
    writerid pipeline --config run.yaml
    writerid train-gmm --config run.yaml --stage-override gmm.components=64
    writerid evaluate --config run.yaml --seed 7
"""

from __future__ import annotations

import argparse
import logging
import sys

from writerid import __version__
from writerid.config import ConfigError, apply_override, load_config
from writerid.imaging import DegenerateHistogramError
from writerid.manifest import ManifestError
from writerid.pipeline import STAGES, StageError, run_pipeline, run_stage
from writerid.serialization import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="writerid",
        description="Offline writer identification pipeline (CNN activation features "
        "+ GMM supervector encoding + cosine retrieval).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="STAGE")
    for stage in STAGES + ("pipeline",):
        help_text = "run all stages in order" if stage == "pipeline" else f"run the {stage} stage"
        p = sub.add_parser(stage, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config YAML")
        p.add_argument(
            "--stage-override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry, e.g. gmm.tau=32 (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers per stage")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        for override in args.stage_override:
            apply_override(config, override)
        if args.seed is not None:
            config.seed = args.seed
        if args.command == "pipeline":
            outputs = run_pipeline(config, jobs=args.jobs)
        else:
            outputs = run_stage(config, args.command, jobs=args.jobs)
    except (ConfigError, ManifestError, StageError, FormatError,
            DegenerateHistogramError, FileNotFoundError, ValueError) as exc:
        print(f"writerid: error: {exc}", file=sys.stderr)
        return 1
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
