"""Command-line entry point.

Exit codes: 0 success, 2 config/validation error, 3 missing artifact,
4 numeric failure. Errors print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import ConfigError
from . import pipeline

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = pipeline.read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")

    parser = argparse.ArgumentParser(prog="spitzkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="synthesize a cohort and feature bags")

    p = sub.add_parser("split", parents=[common], help="patient-level dev/test split")
    p.add_argument("--data", required=True, help="data directory from 'synth'")

    p = sub.add_parser("train", parents=[common], help="train one cross-validation fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, required=True)

    p = sub.add_parser("tune-threshold", parents=[common], help="tune a binary decision threshold")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--folds", nargs="+", type=int, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="bootstrap metrics on the test set")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--task")
    p.add_argument("--threshold", type=float)
    p.add_argument("--threshold-file")

    p = sub.add_parser("simulate", parents=[common], help="run the workflow simulation")
    p.add_argument("--trace", action="store_true", help="also write per-iteration trace")

    p = sub.add_parser("report", parents=[common], help="render CSV outputs as Markdown")
    p.add_argument("inputs", nargs="+")
    return parser


def run(args: argparse.Namespace) -> None:
    config = _load_config(args.config)
    out = Path(args.out)
    cmd = args.command
    if cmd == "synth":
        written = pipeline.run_synth(config, args.seed, out)
    elif cmd == "split":
        written = pipeline.run_split(config, args.seed, Path(args.data))
        out = Path(args.data)
    elif cmd == "train":
        written, _ = pipeline.run_train(config, args.seed, Path(args.data), args.fold, args.profile, out)
    elif cmd == "tune-threshold":
        written = pipeline.run_tune_threshold(config, Path(args.data), args.checkpoints, args.folds, out)
    elif cmd == "evaluate":
        if args.task:
            config = {**config, "task": args.task}
        threshold = args.threshold
        if args.threshold_file:
            threshold = float(pipeline.read_json(args.threshold_file)["threshold"])
        written = pipeline.run_evaluate(config, args.seed, Path(args.data), args.checkpoints, out, threshold)
    elif cmd == "simulate":
        written = pipeline.run_simulate(config, args.seed, out, args.trace)
    else:
        written = pipeline.run_report(args.inputs, out)
    pipeline.write_manifest(out, cmd, config, args.seed, written)


def _fail(kind: str, message: str, field: str | None = None) -> None:
    record = {"error": kind, "message": message}
    if field:
        record["field"] = field
    print(json.dumps(record), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except pipeline.MissingArtifactError as e:
        _fail("missing_artifact", str(e))
        return EXIT_MISSING
    except ConfigError as e:
        _fail("config", str(e), e.field)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as e:
        _fail("numeric", str(e))
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
