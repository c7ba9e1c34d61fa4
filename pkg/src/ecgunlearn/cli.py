"""Command-line entry point: ``ecgunlearn <command> [--config C] [--seed N] [--out DIR]``.

Each command runs one pipeline stage, first bringing any stale upstream
stage up to date, then refreshes ``manifest.json``. ``run-all`` runs every
stage. On failure the exit status is 2 and stderr names the failing stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import __version__
from .harness.config import ConfigError, ExperimentConfig, parse_config
from .harness.pipeline import Pipeline, StageError

COMMANDS = {
    "gen-data": "generate (or ingest) the dataset and split it",
    "train": "train the generalized classifier",
    "finetune": "personalize it on the target patient",
    "attack": "attack the generalized model on the probe set",
    "extract": "run the discrepancy probe (generalized vs personalized)",
    "unlearn": "unlearn the target patient (finetune) or the forget classes (gkt)",
    "audit": "loss-distribution audit against the retrained baseline, plus the post-unlearning probe",
    "report": "write the summary table, CSVs and SVG figures",
    "run-all": "run every stage",
}
EXIT_FAILURE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgunlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--force", action="store_true", help="re-run the stage even if it is current")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv: debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "unlearn":
            p.add_argument("--route", choices=("finetune", "gkt"), default="finetune")
        if name == "gen-data":
            p.add_argument("--export-records", action="store_true",
                           help="also write the raw records (manifest.tsv + CSV files)")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "export_records", False):
        cfg.data = replace(cfg.data, export_records=True)
    cfg.validate()
    return cfg


def stage_for(args) -> str:
    if args.command == "unlearn":
        return f"unlearn-{args.route}"
    return args.command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    pipe = Pipeline(cfg)
    try:
        if args.command == "run-all":
            pipe.run_all(force=args.force)
            record = pipe.record("report")
        else:
            record = pipe.run(stage_for(args), force=args.force)
            pipe.write_manifest()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps({"stage": record["stage"], "out": str(pipe.out), "metrics": record["metrics"]},
                     indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
