"""Command-line entry point: ``msbo-bench run | generate | report``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys

from ..drivers import DRIVERS, BudgetError
from ..synthetic import export_weights, generate_cascade, preset
from .config import ConfigError, load_config
from .dataset import DatasetError
from .runner import run_experiment, summarise, with_overrides


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msbo-bench", description="Multi-stage BO benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run campaigns described by a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seeds", type=_seeds)
    run.add_argument("--budget", type=float)
    run.add_argument("--driver", choices=DRIVERS)

    gen = sub.add_parser("generate", help="generate a preset cascade and export its weights")
    gen.add_argument("--preset", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--export", required=True)
    gen.add_argument("--restarts", type=int, default=64)

    rep = sub.add_parser("report", help="summarise a results directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _cmd_run(args) -> int:
    cfg = with_overrides(load_config(args.config), args.seeds, args.budget, args.driver)
    traces = run_experiment(cfg, args.out)
    for (driver, seed), trace in sorted(traces.items()):
        last = trace.final()
        print(f"{driver}\tseed={seed}\tcost={last.cumulative_cost:.4g}\tbest={last.best_observed_y:.6g}")
    return 0


def _cmd_generate(args) -> int:
    cascade = generate_cascade(preset(args.preset), args.seed, restarts=args.restarts)
    export_weights(cascade, args.export)
    print(json.dumps({"preset": args.preset, "seed": args.seed, "y_opt": cascade.y_opt,
                      "x_opt": [float(v) for v in cascade.x_opt]}))
    return 0


def _cmd_report(args) -> int:
    rows = summarise(args.in_dir)
    if not rows:
        print(f"no traces under {args.in_dir}", file=sys.stderr)
        return 1
    if args.format == "json":
        clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]
        print(json.dumps(clean, indent=2))
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return {"run": _cmd_run, "generate": _cmd_generate, "report": _cmd_report}[args.command](args)
    except (BudgetError, ConfigError, DatasetError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
