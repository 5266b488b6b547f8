import argparse
import asyncio
import logging
import sys
from pathlib import Path

from config import ConfigError, get_runtime_settings, load_experiment_config
from experiments.base_experiment import ExperimentError
from experiments.config import ExperimentResult
from experiments.runner import certify, run_experiment
from utils import format_summary, make_trace_row, write_summary, write_trace_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CERTIFICATE = 2
EXIT_ABORTED = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Override the config seed.")
    common.add_argument("--out", type=str, default=argparse.SUPPRESS, help="Override the output directory.")

    parser = argparse.ArgumentParser(
        prog="ctrl-iter",
        description="Fixed-point solvers for discounted control problems.",
        parents=[common],
    )
    commands = parser.add_subparsers(dest="command", required=True)
    run = commands.add_parser("run", parents=[common], help="Run an experiment and write trace.csv and summary.txt.")
    run.add_argument("config", help="Experiment config file (key = value lines).")
    check = commands.add_parser("certify", parents=[common], help="Print the convergence certificate.")
    check.add_argument("config", help="Experiment config file (key = value lines).")
    return parser


def write_artifacts(result: ExperimentResult, output: Path) -> None:
    output.mkdir(parents=True, exist_ok=True)
    write_trace_csv(
        output / "trace.csv",
        [make_trace_row(r.run, r.iteration, r.distance, r.ms) for r in result.rows],
    )
    for group, rows in result.groups.items():
        write_trace_csv(
            output / f"trace_{group}.csv",
            [make_trace_row(r.run, r.iteration, r.distance, r.ms) for r in rows],
        )
    write_summary(output / "summary.txt", result.summary)


def run_command(args: argparse.Namespace) -> int:
    config = load_experiment_config(
        args.config, seed=getattr(args, "seed", None), output=getattr(args, "out", None)
    )
    if args.command == "certify":
        reports = certify(config)
        for report in reports:
            values = report.model_dump()
            values["result"] = "pass" if report.passed else "fail"
            print(format_summary(values), end="")
        return EXIT_OK if all(r.passed for r in reports) else EXIT_CERTIFICATE

    result = asyncio.run(run_experiment(config))
    output = Path(config.output)
    write_artifacts(result, output)
    print(f"wrote {output / 'trace.csv'} and {output / 'summary.txt'}")
    if result.aborted:
        logger.error("at least one run aborted on a singular step")
        return EXIT_ABORTED
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = get_runtime_settings()
    except ConfigError as ex:
        print(f"error: {ex.message}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run_command(args)
    except ConfigError as ex:
        print(f"error: {ex.message}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as ex:
        print(f"error: {ex.message}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
