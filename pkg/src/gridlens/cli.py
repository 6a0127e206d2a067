"""Command line entry point: ``gridlens <command> --config FILE [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from gridlens.runner import ERROR_FILE, KINDS, ConfigError, ExperimentError, load_config, run_experiment

EXIT_OK = 0
EXIT_EXPERIMENT = 1
EXIT_CONFIG = 2

HELP = {
    "gen": "generate a scene manifest with control pairs",
    "plant": "build the planted-circuit model and its circuit manifest",
    "train": "train a model with momentum SGD on a scene manifest",
    "eval": "localization, classification and false-positive rate",
    "ablate": "token ablation table, containerization sweep and shuffles",
    "probe": "per-layer linear position probes",
    "knockout": "attention knockout by layer group",
    "cma": "causal mediation analysis over attention heads",
    "head-ablate": "cumulative head ablation curves and cross-task ablation",
    "report": "collect summaries of earlier runs into one table",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlens", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for kind in KINDS:
        p = sub.add_parser(kind, help=HELP[kind])
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--quiet", action="store_true", help="do not print the summary table")
    return parser


def _error_record(kind: str, exc: BaseException, code: int, out: str | None) -> None:
    cause = getattr(exc, "cause", exc)
    record = {"error": type(cause).__name__, "message": str(exc), "command": kind, "exit_code": code}
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out:
        try:
            d = Path(out)
            d.mkdir(parents=True, exist_ok=True)
            (d / ERROR_FILE).write_text(text + "\n")
        except OSError:
            pass


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config, kind=args.command, seed=args.seed, out=args.out)
    except ConfigError as e:
        _error_record(args.command, e, EXIT_CONFIG, args.out)
        return EXIT_CONFIG
    try:
        run_experiment(config, quiet=args.quiet)
    except ExperimentError as e:
        code = EXIT_CONFIG if isinstance(e.cause, ConfigError) else EXIT_EXPERIMENT
        _error_record(args.command, e, code, config.out)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
