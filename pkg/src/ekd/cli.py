"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import CompatibilityError, ConfigError, EKDError, NumericError, SchemaVersionError
from .experiment import (
    OUTPUT_ENV,
    compare,
    gradient_check_modes,
    load_config,
    output_dir,
    run_experiment,
)
from .synth import export_split, make_split

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_CHECK_TOLERANCE = 1e-4


def _cmd_run(args) -> int:
    result = run_experiment(args.config)
    for mode, path in result.reports.items():
        print(f"{mode}: {path}")
    for mode, kind in result.failures.items():
        print(f"{mode}: FAILED ({kind}); see {result.output_dir / 'run.log'}", file=sys.stderr)
    return result.exit_code()


def _cmd_compare(args) -> int:
    table = compare(args.reports, baseline=args.baseline)
    print(table.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(table.to_csv(), encoding="utf-8")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    errors = gradient_check_modes(seed=args.seed, eps=args.eps)
    worst = 0.0
    for mode, err in errors.items():
        status = "ok" if err < GRAD_CHECK_TOLERANCE else "FAIL"
        print(f"{mode:<12} max relative error {err:.3e}  {status}")
        worst = max(worst, err)
    return EXIT_OK if worst < GRAD_CHECK_TOLERANCE else EXIT_NUMERIC


def _cmd_gen_data(args) -> int:
    config = load_config(args.config)
    target = Path(args.out) if args.out else output_dir(config) / "data"
    target.mkdir(parents=True, exist_ok=True)
    split = make_split(config.data)
    export_split(split, target)
    print(f"wrote {len(split.train)} train and {len(split.eval_clean)}x3 eval samples to {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ekd", description="Ensemble distillation experiments on synthetic audio.",
                                     epilog=f"{OUTPUT_ENV} overrides the configured output directory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="distil, probe and report every configured mode")
    p.add_argument("config", help="TOML or JSON experiment config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="tabulate metric reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", help="mode whose row the others are compared against")
    p.add_argument("--csv", help="also write the table as CSV to this path")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference check of every mode's loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("gen-data", help="export the configured synthetic split")
    p.add_argument("config")
    p.add_argument("--out", help="target directory (default: <output_dir>/data)")
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaVersionError, CompatibilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
