"""Command line entry point.

Subcommands mirror the run phases: ``learn``, ``unlearn``, ``retrain``,
``eval``, and ``export-plot-data``.  Every run-style command takes a JSON
config plus optional seed and output-directory overrides.  Exit codes:
0 on success, 1 on any runtime or validation failure, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .experiments import (
    ConfigError,
    MissingStateError,
    evaluate_snapshot,
    export_plot_data,
    load_config,
    resolve_method,
    run_experiment,
    run_paths,
)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the config output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steinfed",
        description="Particle-based Bayesian federated learning and unlearning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("learn", "run federated learning with the configured method"),
        ("unlearn", "run unlearning from a saved learned state"),
        ("retrain", "retrain from scratch on the retained agents"),
    ):
        cmd = sub.add_parser(name, help=text)
        _add_run_options(cmd)

    cmd = sub.add_parser("eval", help="recompute metrics for a saved snapshot")
    _add_run_options(cmd)
    cmd.add_argument("--method", default=None,
                     help="which saved state to evaluate (default: per config method)")

    cmd = sub.add_parser("export-plot-data", help="reduce a metrics CSV to plot columns")
    _add_run_options(cmd)
    cmd.add_argument("--method", default=None,
                     help="which metrics file to export (default: per config method)")
    return parser


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        if args.command in ("learn", "unlearn", "retrain"):
            result = run_experiment(cfg, args.command)
            last = result.records[-1]
            print(f"{result.method}: {result.rounds_run} rounds -> {result.paths.metrics}")
            summary = {k: v for k, v in (
                ("forgotten_acc", last.forgotten_acc),
                ("retained_acc", last.retained_acc),
                ("kl", last.kl),
                ("forgot_loss", last.forgot_loss),
            ) if v is not None}
            print(json.dumps(summary))
        elif args.command == "eval":
            method = args.method or resolve_method(cfg.method, "learn")
            print(json.dumps(evaluate_snapshot(cfg, method), sort_keys=True))
        else:
            method = args.method or resolve_method(cfg.method, "learn")
            paths = run_paths(cfg, method)
            out = paths.metrics.replace("_metrics.csv", "_plot.csv")
            rows = export_plot_data(paths.metrics, out)
            print(f"{rows} rows -> {out}")
    except (ConfigError, MissingStateError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
