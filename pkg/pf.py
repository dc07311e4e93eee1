"""Command-line entry point for the PEFT engine.

Features:
- Loads `.env` automatically (through the settings layer)
- Maps engine errors to exit codes: 2 config, 3 data, 4 runtime
- Console logging to stderr; optional file logs under LOG_DIR

Usage examples:
  # train one method and write report.json / adapter.ckpt / metrics.prom
  python pf.py train configs/copy/lora.yaml

  # evaluate a saved adapter
  python pf.py predict configs/copy/lora.yaml --checkpoint runs/copy/lora/adapter.ckpt

  # methods x datasets macro-F1 table
  python pf.py bench configs/bench/*.yaml --bench-dir runs/bench

  # registry and dataset listings
  python pf.py methods list
  python pf.py datasets list
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import Callable

import pandas as pd

from peftlab.config import get_settings, load_experiment
from peftlab.core.data import list_datasets
from peftlab.core.errors import PeftLabError
from peftlab.core.peft import discover_methods
from peftlab.core.runner import bench, predict, train
from peftlab.core.telemetry import track_run
from peftlab.logging_setup import setup_logging

logger = logging.getLogger("peftlab.cli")


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        print("(none)")
        return
    print(pd.DataFrame(rows).to_string(index=False))


def _print_report(report) -> None:
    print(f"peft_type         {report.peft_type}")
    print(f"dataset           {report.dataset}")
    print(f"trainable/total   {report.trainable_params}/{report.total_params}")
    if report.final_loss is not None:
        print(f"final loss        {report.final_loss:.6f} after {report.steps} steps")
    for split, metrics in report.metrics.items():
        values = ", ".join(f"{k}={v}" for k, v in metrics.to_flat_dict().items() if "." not in k)
        print(f"[{split}] {values}")


def cmd_train(args) -> int:
    config = load_experiment(args.config)
    args.peft_type = config.method.peft_type
    report = train(config, discover_methods(args.peft_dir), args.output_dir)
    _print_report(report)
    return 0


def cmd_predict(args) -> int:
    config = load_experiment(args.config)
    args.peft_type = config.method.peft_type
    report = predict(config, args.checkpoint, discover_methods(args.peft_dir), args.output_dir)
    _print_report(report)
    return 0


def cmd_bench(args) -> int:
    result = bench(args.configs, args.bench_dir, discover_methods(args.peft_dir), args.workers)
    print(result.markdown)
    if result.failed:
        return result.failed[0].exit_code or 4
    return 0


def cmd_methods_list(args) -> int:
    registry = discover_methods(args.peft_dir)
    _print_rows(registry.describe())
    for directory, reason in registry.report.skipped:
        print(f"skipped {directory}: {reason}", file=sys.stderr)
    return 0


def cmd_datasets_list(args) -> int:
    _print_rows(list_datasets())
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pf", description="Parameter-efficient fine-tuning engine")
    p.add_argument("--peft-dir", default=None, help="Plugin method directory (overrides PEFT_DIR)")
    p.add_argument("--log-level", default=None, help="Console log level (default from settings)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="Train a method from an experiment config")
    t.add_argument("config", help="Experiment YAML")
    t.add_argument("--output-dir", default=None, help="Override output_dir from the config")
    t.set_defaults(handler=cmd_train)

    pr = sub.add_parser("predict", help="Evaluate a saved adapter")
    pr.add_argument("config", help="Experiment YAML")
    pr.add_argument("--checkpoint", required=True, help="adapter.ckpt written by train")
    pr.add_argument("--output-dir", default=None, help="Override output_dir from the config")
    pr.set_defaults(handler=cmd_predict)

    b = sub.add_parser("bench", help="Train and evaluate several configs into one table")
    b.add_argument("configs", nargs="+", help="Experiment YAML files")
    b.add_argument("--bench-dir", default="runs/bench", help="Directory for bench.md/bench.json and per-run outputs")
    b.add_argument("--workers", type=int, default=None, help="Concurrent runs (default BENCH_WORKERS)")
    b.set_defaults(handler=cmd_bench)

    m = sub.add_parser("methods", help="Method registry")
    m_sub = m.add_subparsers(dest="action", required=True)
    m_sub.add_parser("list", help="List built-in and discovered methods").set_defaults(handler=cmd_methods_list)

    d = sub.add_parser("datasets", help="Dataset registry")
    d_sub = d.add_subparsers(dest="action", required=True)
    d_sub.add_parser("list", help="List registered datasets").set_defaults(handler=cmd_datasets_list)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    parser = build_arg_parser()
    args = parser.parse_args(argv)

    settings = get_settings()
    setup_logging(args.log_level or settings.log_level, settings.log_dir)

    handler: Callable = args.handler
    start = time.perf_counter()

    def finish(status: str) -> None:
        track_run(args.command, status, time.perf_counter() - start, getattr(args, "peft_type", ""))

    try:
        code = handler(args)
    except PeftLabError as e:
        logger.error("%s: %s", type(e).__name__, e)
        finish("failed")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        finish("failed")
        return 4
    finish("success" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
