"""Command-line interface: ``lamina run | gradcheck | list | report``."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from lamina.errors import LaminaError
from lamina.harness.config import EXPERIMENTS, load_config
from lamina.harness.data import SYNTHETIC, DatasetSpec, load_dataset
from lamina.harness.experiments import DESCRIPTIONS
from lamina.harness.metrics import dumps_csv, dumps_json, emit_metrics, format_float, read_json
from lamina.harness.runner import run_experiment


def _build_parser():
    parser = argparse.ArgumentParser(prog="lamina", description="Stacked learning machines experiment harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one experiment and write its metrics")
    run.add_argument("--experiment", choices=EXPERIMENTS, help="experiment name (or give --config)")
    run.add_argument("--config", type=Path, help="YAML config file; flags override its values")
    run.add_argument("--source", default="mnist", choices=["mnist", *SYNTHETIC], help="data source")
    run.add_argument(
        "--data-dir",
        default=os.environ.get("LAMINA_DATA_DIR"),
        help="directory with the MNIST IDX files (default: $LAMINA_DATA_DIR)",
    )
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--train-subset", type=int, default=10000)
    run.add_argument("--test-subset", type=int, default=2000)
    run.add_argument("--epochs", type=int)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--out", required=True, help="metrics file path, or - for stdout")
    run.add_argument("--format", choices=["json", "csv"], default="json")
    run.add_argument("--diagnostics", action="store_true", help="record per-step GER/LER")
    run.add_argument("--figures", type=Path, help="also render figures into this directory")

    check = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--quiet", action="store_true")

    sub.add_parser("list", help="list experiments")

    report = sub.add_parser("report", help="summarize JSON metrics files into CSV and figures")
    report.add_argument("metrics", nargs="+", type=Path)
    report.add_argument("--out-dir", type=Path, required=True)
    return parser


def cmd_run(args):
    if args.experiment is None and args.config is None:
        raise LaminaError("give --experiment or --config")
    overrides = {"seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size}
    if args.diagnostics:
        overrides["diagnostics"] = True
    config = load_config(args.experiment, args.config, **overrides)
    spec = DatasetSpec(args.source, args.data_dir, args.train_subset, args.test_subset)
    dataset = load_dataset(spec, config.seed)
    record = run_experiment(config, dataset)
    if args.out == "-":
        sys.stdout.write(dumps_json(record) if args.format == "json" else dumps_csv(record))
    else:
        emit_metrics(record, args.format, args.out)
        print(f"{config.name} seed {config.seed}: test accuracy {record.final_test_accuracy:.4f} -> {args.out}")
    if args.figures is not None:
        from lamina.plotting import render_figures

        for path in render_figures(record, args.figures):
            print(f"figure: {path}")
    return 0


def cmd_gradcheck(args):
    from lamina.gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    for r in results:
        if not args.quiet or not r.passed:
            status = "ok  " if r.passed else "FAIL"
            print(f"{status} {r.name:45s} shape={r.shape} max_rel_err={r.max_error:.3e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_list(args):
    for name in EXPERIMENTS:
        print(f"{name:18s} {DESCRIPTIONS[name]}")
    return 0


def cmd_report(args):
    from lamina.plotting import plot_accuracy, render_figures

    records = [read_json(p) for p in args.metrics]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    summary = args.out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["experiment", "seed", "epochs", "initial_test_accuracy", "final_test_accuracy"])
        for rec in records:
            writer.writerow(
                [
                    rec.experiment,
                    rec.seed,
                    len(rec.epochs),
                    format_float(rec.initial_test_accuracy),
                    format_float(rec.final_test_accuracy),
                ]
            )
    print(f"summary: {summary}")
    print(f"figure: {plot_accuracy(records, args.out_dir / 'accuracy.png')}")
    for rec in records:
        for path in render_figures(rec, args.out_dir):
            print(f"figure: {path}")
    return 0


COMMANDS = {"run": cmd_run, "gradcheck": cmd_gradcheck, "list": cmd_list, "report": cmd_report}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (LaminaError, OSError, ValueError) as exc:
        print(f"lamina: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
