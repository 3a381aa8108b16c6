from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from core.config import load_config
from core.errors import CertifiedRLError, ConfigError
from core.harness import run_experiment
from core.metrics import summarize_run
from exporters.metrics_csv import read_metrics


logger = logging.getLogger("certified_rl")

TESTS_DIR = Path(__file__).resolve().parent / "tests"


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


def _error_record(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, seed=args.seed, output_dir=args.out, replicas=args.replicas, steps=args.steps)
    artifacts = run_experiment(config, workers=args.workers)
    print(json.dumps({"out_dir": str(artifacts.out_dir), "summary": str(artifacts.summary_path)}))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    import pytest

    pytest_args = [str(TESTS_DIR), "-q"]
    if not args.slow:
        pytest_args += ["-m", "not slow"]
    return int(pytest.main(pytest_args))


def cmd_summarize(args: argparse.Namespace) -> int:
    frame = read_metrics(args.csv)
    switches = [int(s) for s in args.switch] if args.switch else []
    summary = summarize_run(frame, switches)
    print(json.dumps(summary, indent=2, default=lambda v: None))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certified-rl", description="Barrier-certified adaptive RL experiments")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config or bundled preset")
    run.add_argument("config", help="path to a YAML/JSON config, or a preset name such as quadrotor-recovery")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="output directory (default: the config's output_dir)")
    run.add_argument("--replicas", type=int, default=None)
    run.add_argument("--steps", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run the property and oracle suites")
    verify.add_argument("--slow", action="store_true", help="include the long acceptance runs")
    verify.set_defaults(func=cmd_verify)

    summarize = sub.add_parser("summarize", help="summarize a metrics CSV")
    summarize.add_argument("csv")
    summarize.add_argument("--switch", action="append", help="step of a dynamics switch (repeatable)")
    summarize.set_defaults(func=cmd_summarize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2
    except (CertifiedRLError, OSError, ValueError) as exc:
        logger.debug("command failed", exc_info=True)
        print(_error_record(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
