"""mpcpa 命令行入口：run / report / audit / serve"""
import argparse
import asyncio
import logging
import sys
from typing import List, Optional

import uvicorn
import yaml
from pydantic import ValidationError

from app.core.config import load_experiment_config
from app.core.errors import MpcpaError, RejectedInputError
from app.core.logging import setup_logging
from app.services.experiment_runner import ARM_USAGE, cmd_audit, cmd_run
from app.services.report_writer import cmd_report, render_report_text

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcpa", description="Desk-scale MPCPA experiment runner")
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment arm")
    run.add_argument("--config", required=True, help="experiment YAML (relative paths also resolve under app/instances)")
    run.add_argument("--arm", default="mpcpa", help="one of: " + "; ".join(ARM_USAGE.values()))
    run.add_argument("--output", default="runs", help="root directory for run directories")
    run.add_argument("--no-persist", action="store_true", help="print the report without writing a run directory")
    run.add_argument("--seed", type=int, default=None, help="override the global seed")
    run.add_argument("--gen-count", type=int, default=None, help="override generated samples per class per source")
    run.add_argument("--parallelism", type=int, default=1, help="concurrent client jobs")

    report = sub.add_parser("report", help="compare persisted runs")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--output", default=None, help="directory for comparison.txt/.csv and communication.csv")
    report.add_argument("--detail", action="store_true", help="list every method row instead of headline rows")

    audit = sub.add_parser("audit", help="re-audit the models persisted in a run directory")
    audit.add_argument("--run-dir", required=True)

    serve = sub.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.gen_count is not None:
        overrides["gen_count"] = args.gen_count
    if args.parallelism < 1:
        raise RejectedInputError("--parallelism must be at least 1")
    config = load_experiment_config(args.config, overrides)
    output = None if args.no_persist else args.output
    result = asyncio.run(cmd_run(config, args.arm, output, args.parallelism))
    print(render_report_text(result.report), end="")
    if result.run_dir is not None:
        print(f"run directory: {result.run_dir}")
    return 0


def _report(args) -> int:
    tables = cmd_report(args.run_dirs, args.output, args.detail)
    print(tables.to_text(), end="")
    return 0


def _audit(args) -> int:
    summary = cmd_audit(args.run_dir)
    for name, mem in summary.memorization.items():
        print(f"memorization {name}: min {mem.global_min:.6f}, flagged {mem.flag_count}/{mem.generated}")
    for name, mia in summary.mia.items():
        print(f"mia {name}: best accuracy {mia.best_accuracy:.4f}, auc {mia.auc:.4f}")
    return 0


def _serve(args) -> int:
    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {"run": _run, "report": _report, "audit": _audit, "serve": _serve}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (MpcpaError, ValidationError, yaml.YAMLError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
