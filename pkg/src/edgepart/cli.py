"""Command line entry point.

    edgepart run SPEC.json [--out-dir DIR] [--jobs N] [--seed-override 1,2,3]
    edgepart report --gap SUMMARY.csv [SUMMARY.csv ...]
    edgepart presets list
    edgepart presets emit NAME [-o FILE]

Exit codes: 0 success, 1 bad spec or input, 2 some runs failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import PRESETS, ExperimentSpec, parse_seeds, preset, report_optimality_gap, run_experiment
from .model import ConfigError

EXIT_OK = 0
EXIT_SPEC = 1
EXIT_RUNS = 2


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgepart",
        description="Run and summarize head-level partitioning experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment spec")
    run.add_argument("spec", help="experiment spec (JSON) or the name of a built-in preset")
    run.add_argument("--out-dir", help="write results here instead of the experiment's outputs path")
    run.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    run.add_argument(
        "--seed-override",
        type=_seed_list,
        metavar="SEEDS",
        help="comma-separated seeds replacing the experiment's list",
    )
    run.add_argument("-q", "--quiet", action="store_true", help="do not print the summary table")

    report = sub.add_parser("report", help="summarize finished runs")
    report.add_argument("--gap", nargs="+", required=True, metavar="SUMMARY", help="summary CSV file(s)")

    presets = sub.add_parser("presets", help="list or print built-in experiment specs")
    psub = presets.add_subparsers(dest="action", required=True)
    psub.add_parser("list", help="names of the built-in presets")
    emit = psub.add_parser("emit", help="print a preset as JSON")
    emit.add_argument("name")
    emit.add_argument("-o", "--output", help="write to this file instead of stdout")
    return parser


def _load_spec(ref: str) -> ExperimentSpec:
    if ref in PRESETS and not Path(ref).exists():
        return PRESETS[ref]
    return ExperimentSpec.load(ref)


def _cmd_run(args) -> int:
    spec = _load_spec(args.spec)
    if args.seed_override:
        spec = spec.with_seeds(parse_seeds(list(args.seed_override)))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    result = run_experiment(spec, jobs=args.jobs, out_dir=args.out_dir)
    if not args.quiet:
        for r in result.results:
            if r.ok:
                t = r.trace
                print(
                    f"{r.policy.value:<14} seed {r.seed:<4} latency {t.total_latency:12.4f} s"
                    f"  carried {t.infeasible_intervals:4d}  migrations {t.migration_total:6d}"
                )
            else:
                print(f"{r.policy.value:<14} seed {r.seed:<4} FAILED: {r.error}")
    print(f"wrote {len(result.files)} file(s) to {result.out_dir}")
    if result.failures:
        print(f"{len(result.failures)} run(s) failed", file=sys.stderr)
    return result.exit_code()


def _cmd_report(args) -> int:
    report = report_optimality_gap(args.gap)
    sys.stdout.write(report.render())
    return EXIT_OK


def _cmd_presets(args) -> int:
    if args.action == "list":
        for name, spec in PRESETS.items():
            print(f"{name}: {len(spec.policies)} policies x {len(spec.seeds)} seeds")
        return EXIT_OK
    text = preset(args.name).dumps()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "report": _cmd_report, "presets": _cmd_presets}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
