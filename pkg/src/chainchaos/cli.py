"""Command-line entry point.

Subcommands:
    run <scenario-file> [--seed N] [--out DIR] [--no-plots]
    chaos-suite <base-file> [--seed N] [--out DIR] [--no-plots]
    compare <report.json>... [--out DIR]
    verify <event-log> <chain-dump>... [--report FILE]

Exit codes: 0 completed, 1 verification mismatch, 2 configuration error,
3 safety invariant violated during the run. Default output root comes from
$CHAINCHAOS_OUT, else ./out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .runner import (
    IncomparableScenarios,
    RunResult,
    compare_protocols,
    run_chaos_suite,
    run_scenario,
    write_run_artifacts,
)
from .scenario import ScenarioError, load_scenario
from .verify import verify_paths

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_INVARIANT_VIOLATED = 3


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("CHAINCHAOS_OUT", "out"))


def _print_summary(result: RunResult) -> None:
    agg = result.report.aggregates()
    print(
        f"protocol={agg['protocol']} seed={agg['seed']} "
        f"tp={_fmt(agg['tp'])} avg_latency_ms={_fmt(agg['avg_latency_ms'])} "
        f"median_latency_ms={_fmt(agg['median_latency_ms'])} "
        f"success_rate={_fmt(agg['success_rate'])} "
        f"blocks={agg['blocks_committed']}/{agg['blocks_created']} "
        f"tx_committed={agg['tx_committed']}"
    )
    for violation in result.violations:
        print(f"violation: {violation}")


def _fmt(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def _render_plots(result: RunResult, out_dir: Path) -> None:
    from .plots import render_run_figures

    for path in render_run_figures(result.report, result.spec.faults, out_dir):
        print(f"wrote {path}")


def _cmd_run(args) -> int:
    spec = load_scenario(args.scenario)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = run_scenario(spec)
    out_dir = _out_root(args) / Path(args.scenario).stem
    paths = write_run_artifacts(result, out_dir)
    for path in paths.values():
        print(f"wrote {path}")
    if not args.no_plots:
        _render_plots(result, out_dir)
    _print_summary(result)
    return result.exit_code()


def _cmd_chaos_suite(args) -> int:
    spec = load_scenario(args.scenario)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    suite = run_chaos_suite(spec)
    out_dir = _out_root(args) / f"{Path(args.scenario).stem}-chaos-suite"
    paths = write_run_artifacts(suite.run, out_dir)
    schedule_path = out_dir / "schedule.txt"
    schedule_path.write_text(suite.schedule_text)
    table_path = out_dir / "table.txt"
    table_path.write_text(suite.table_text())
    suite_path = out_dir / "suite.json"
    suite_path.write_text(json.dumps(suite.to_json_doc(), sort_keys=True, indent=2) + "\n")
    for path in list(paths.values()) + [schedule_path, table_path, suite_path]:
        print(f"wrote {path}")
    if not args.no_plots:
        _render_plots(suite.run, out_dir)
    print(suite.table_text(), end="")
    _print_summary(suite.run)
    return suite.run.exit_code()


def _cmd_compare(args) -> int:
    docs = [json.loads(Path(p).read_text()) for p in args.reports]
    doc = compare_protocols(docs)
    print(doc.table_text(), end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.json").write_text(
            json.dumps(doc.to_json_doc(), sort_keys=True, indent=2) + "\n"
        )
        (out_dir / "comparison.txt").write_text(doc.table_text())
        print(f"wrote {out_dir / 'comparison.json'}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    event_log = Path(args.event_log)
    report = Path(args.report) if args.report else event_log.parent / "report.json"
    problems = verify_paths(event_log, [Path(p) for p in args.chain_dumps], report)
    if problems:
        for problem in problems:
            print(f"verify: {problem}")
        return EXIT_VERIFY_FAILED
    print("verify: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainchaos",
        description="Deterministic chaos-testing harness for permissioned consensus engines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--no-plots", action="store_true")
    p_run.set_defaults(fn=_cmd_run)

    p_suite = sub.add_parser("chaos-suite", help="run the eight-phase fault sequence")
    p_suite.add_argument("scenario")
    p_suite.add_argument("--seed", type=int)
    p_suite.add_argument("--out")
    p_suite.add_argument("--no-plots", action="store_true")
    p_suite.set_defaults(fn=_cmd_chaos_suite)

    p_cmp = sub.add_parser("compare", help="compare suite/run reports side by side")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_ver = sub.add_parser("verify", help="recompute metrics and invariants from artifacts")
    p_ver.add_argument("event_log")
    p_ver.add_argument("chain_dumps", nargs="+")
    p_ver.add_argument("--report")
    p_ver.set_defaults(fn=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except IncomparableScenarios as exc:
        print(f"incomparable scenarios: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
