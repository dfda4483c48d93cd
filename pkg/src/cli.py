"""
Command-line front end: ``pgs run | sweep | gradcheck | report | project-check | schema``.

Exit codes: 0 on success, 1 on any error, ``settings.unsafe_exit_code`` when a run is
flagged unsafe.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .config import ProtocolConfig, load_protocol, settings
from .core import ModelFamily
from .exceptions import PgsError, UnknownMethodError
from .harness import gradcheck_instance, load_reports, results_table, run_experiment, summarize, sweep, write_reports
from .hypergrad import check_agreement
from .logging_config import get_logger, setup_logging
from .projection import compare_with_oracle
from .utils import save_to_csv, save_to_excel

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
GRADCHECK_NEWTON_TOL = 1e-11
GRADCHECK_MLP_ITERS = 50
ORACLE_DISTANCE_TOL = 1e-3
ORACLE_RELATIVE_GAP = 0.05
ORACLE_PASS_SHARE = 0.95


def _exit_status(reports) -> int:
    # only PGS runs promise safeness; comparison methods report the flag without failing
    unsafe = [r for r in reports if r.unsafe and r.method.startswith("pgs")]
    if unsafe and settings.unsafe_exit_code:
        logger.warning("%d PGS run(s) flagged unsafe", len(unsafe))
        return settings.unsafe_exit_code
    return EXIT_OK


def _load(args: argparse.Namespace) -> ProtocolConfig:
    return load_protocol(args.config, args.set, args.seed)


def _write_table(df: pd.DataFrame, target: str, excel: bool = False) -> str:
    path = Path(target)
    writer = save_to_excel if excel else save_to_csv
    return writer(df, path.name, path.parent)


def cmd_run(args: argparse.Namespace) -> int:
    protocol = _load(args)
    reports = run_experiment(protocol, args.jobs)
    out = args.out or settings.output_dir
    write_reports(reports, out)
    save_to_csv(summarize(reports), "summary.csv", out)
    table = results_table(reports)
    print(table.to_string() if not table.empty else "No runs (empty seed list)")
    return _exit_status(reports)


def cmd_sweep(args: argparse.Namespace) -> int:
    protocol = _load(args)
    table, reports = sweep(protocol, args.jobs)
    out = args.out or settings.output_dir
    write_reports(reports, out)
    print(f"Sweep table saved to {save_to_csv(table, 'sweep.csv', out)}")
    print(table.to_string(index=False))
    return _exit_status(reports)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    protocol = _load(args) if args.config else ProtocolConfig()
    family_name = args.family or protocol.model.family.value
    try:
        family = ModelFamily(family_name)
    except ValueError as e:
        raise UnknownMethodError(f"Unknown model family: {family_name}") from e

    updates = {"newton_tol": GRADCHECK_NEWTON_TOL}
    if family == ModelFamily.TWO_LAYER_MLP:
        updates["lower_iters"] = GRADCHECK_MLP_ITERS
    config = protocol.pgs.model_copy(update=updates)
    tolerance = settings.gradcheck_tolerance if args.tolerance is None else args.tolerance
    hidden = protocol.model.hidden_units or 3

    rows = []
    for seed in range(args.instances):
        seeded = config.model_copy(update={"seed": seed})
        instance = gradcheck_instance(family.value, seed, seeded, hidden)
        errors = check_agreement(
            instance.spec, instance.train, instance.params, instance.ensemble, seeded,
            step=settings.fd_step, max_coordinates=settings.fd_max_coordinates,
        )
        rows.append({"instance": seed, **errors})
    df = pd.DataFrame(rows)
    worst = float(df.drop(columns="instance").to_numpy().max()) if rows else 0.0
    print(df.to_string(index=False))
    print(f"max relative error {worst:.3e} (tolerance {tolerance:.1e})")
    return EXIT_OK if worst < tolerance else EXIT_ERROR


def cmd_report(args: argparse.Namespace) -> int:
    reports = load_reports(args.directory)
    table = results_table(reports)
    if table.empty:
        print("No reports found")
    else:
        print(table.to_string())
    flat = table.reset_index() if not table.empty else table
    if args.csv:
        print(f"Table saved to {_write_table(flat, args.csv)}")
    if args.excel:
        print(f"Table saved to {_write_table(flat, args.excel, excel=True)}")
    return EXIT_OK


def cmd_project_check(args: argparse.Namespace) -> int:
    df = pd.DataFrame(compare_with_oracle(args.cases, args.seed))
    exact_sets = df[df["set"] != "q_classification"]
    capped = df[df["set"] == "q_classification"]
    exact_ok = bool((exact_sets["gap"].abs() <= ORACLE_DISTANCE_TOL).all())
    within = capped["gap"] <= ORACLE_RELATIVE_GAP * np.maximum(capped["oracle_distance"], 1e-12) + 1e-9
    share = float(within.mean()) if len(capped) else 1.0
    feasible = bool(df["feasible"].all())

    summary = df.groupby("set")["gap"].agg(["mean", "max"])
    print(summary.to_string())
    print(f"exact sets within {ORACLE_DISTANCE_TOL:g}: {exact_ok}; feasible: {feasible}; "
          f"classification within {ORACLE_RELATIVE_GAP:.0%} of oracle: {share:.1%}")
    return EXIT_OK if exact_ok and feasible and share >= ORACLE_PASS_SHARE else EXIT_ERROR


def cmd_schema(args: argparse.Namespace) -> int:
    print(json.dumps(ProtocolConfig.model_json_schema(by_alias=True), indent=2, sort_keys=True))
    return EXIT_OK


def _add_protocol_arguments(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    if config_required:
        parser.add_argument("config", help="Protocol JSON file")
    else:
        parser.add_argument("config", nargs="?", help="Protocol JSON file (optional)")
    parser.add_argument("--seed", type=int, help="Replace the seed list with a single seed")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a dotted config path (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgs", description="Safe bi-level learning from weak labels")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Overrides PGS_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run every method and seed of a protocol")
    _add_protocol_arguments(run)
    run.add_argument("--out", help="Output directory (default: PGS_OUTPUT_DIR)")
    run.add_argument("--jobs", type=int, help="Worker processes (0: one per core)")
    run.set_defaults(handler=cmd_run)

    sweep_parser = sub.add_parser("sweep", help="Run the protocol over its sweep grid")
    _add_protocol_arguments(sweep_parser)
    sweep_parser.add_argument("--out", help="Output directory (default: PGS_OUTPUT_DIR)")
    sweep_parser.add_argument("--jobs", type=int, help="Worker processes (0: one per core)")
    sweep_parser.set_defaults(handler=cmd_sweep)

    gradcheck = sub.add_parser("gradcheck", help="Compare implicit, reverse and finite-difference hypergradients")
    _add_protocol_arguments(gradcheck, config_required=False)
    gradcheck.add_argument("--tolerance", type=float, help="Maximum relative error (default: PGS_GRADCHECK_TOLERANCE)")
    gradcheck.add_argument("--family", help="Model family (default: the config's)")
    gradcheck.add_argument("--instances", type=int, default=5, help="Number of seeded instances")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    report = sub.add_parser("report", help="Aggregate run reports into a mean ± std table")
    report.add_argument("directory", help="Directory holding <run>/report.json files")
    report.add_argument("--csv", help="Write the table to this CSV file")
    report.add_argument("--excel", help="Write the table to this XLSX file")
    report.set_defaults(handler=cmd_report)

    check = sub.add_parser("project-check", help="Compare projections against a QP oracle")
    check.add_argument("--cases", type=int, default=500)
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(handler=cmd_project_check)

    schema = sub.add_parser("schema", help="Print the JSON schema of protocol files")
    schema.set_defaults(handler=cmd_schema)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except (PgsError, ValueError, FileNotFoundError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
