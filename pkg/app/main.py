"""Command-line entry point.

    python -m app.main run CONFIG [--output DIR]
    python -m app.main verify [SUITE ...] [--quick]
    python -m app.main plot RUN_DIR
    python -m app.main schema

Exit codes: 0 success, 1 failed verification gate, 2 invalid input,
3 run aborted (budget exhausted or numerical failure; the partial run is saved).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from app.core.config import experiment_schema, get_settings, load_experiment
from app.core.errors import BudgetError, ConfigurationError, NumericError, PlannerError, SimulationError
from app.repositories.run_repository import RunRepository
from app.services.online_loop import run_method
from app.services.verification import SUITES, all_passed, format_table, run_suites

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATE_FAILED = 1
EXIT_INVALID = 2
EXIT_ABORTED = 3


def default_run_dir(name: str, method: str, seed: int) -> Path:
    return Path(get_settings().OUTPUT_DIR) / name / f"{method}-seed{seed}"


def cmd_run(config: str, output: Optional[str] = None) -> int:
    """Run the configured method and persist the run directory."""
    try:
        cfg = load_experiment(config)
    except ConfigurationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    run_dir = Path(output) if output else default_run_dir(cfg.name, cfg.method.name, cfg.seeds.master)
    repository = RunRepository(run_dir)
    logger.info("Starting run", extra={"config": config, "method": cfg.method.name, "run_dir": str(run_dir)})
    try:
        record = run_method(cfg)
    except (BudgetError, PlannerError) as e:
        print(f"Run aborted: {e}", file=sys.stderr)
        if e.partial_record is not None:
            repository.save(cfg, e.partial_record, status="partial")
        return EXIT_ABORTED
    except (NumericError, SimulationError) as e:
        print(f"Run aborted: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except ConfigurationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    repository.save(cfg, record)
    print(f"Run written to {run_dir}")
    return EXIT_OK


def cmd_verify(suites: Sequence[str], quick: bool = False) -> int:
    """Run acceptance suites and print the pass/fail table."""
    try:
        results = run_suites(list(suites), quick=quick)
    except KeyError as e:
        print(f"{e.args[0]}; choose from: all, {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_INVALID
    print(format_table(results))
    return EXIT_OK if all_passed(results) else EXIT_GATE_FAILED


def cmd_plot(run_dir: str) -> int:
    """Emit plot-data CSVs next to a run's outputs."""
    try:
        written = RunRepository(run_dir).emit_plot_data()
    except ConfigurationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    for path in written:
        print(path)
    return EXIT_OK


def cmd_schema() -> int:
    print(json.dumps(experiment_schema(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.main", description="Online fine-tuning of diffusion samplers")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment config")
    run.add_argument("config", help="Config path or bundled config name")
    run.add_argument("--output", default=None, help="Run directory (default: $SEIKO_OUTPUT_DIR/<name>/<method>-seed<N>)")

    verify = sub.add_parser("verify", help="Run acceptance suites")
    verify.add_argument("suites", nargs="*", default=["all"], help=f"Suites: all, {', '.join(SUITES)}")
    verify.add_argument("--quick", action="store_true", help="Smaller sample and seed counts")

    plot = sub.add_parser("plot", help="Emit plot-data CSVs for a run directory")
    plot.add_argument("run_dir")

    sub.add_parser("schema", help="Print the JSON schema of experiment configs")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run":
        return cmd_run(args.config, args.output)
    if args.command == "verify":
        return cmd_verify(args.suites, args.quick)
    if args.command == "plot":
        return cmd_plot(args.run_dir)
    return cmd_schema()


if __name__ == "__main__":
    sys.exit(main())
