"""Command-line experiment runner.

Subcommands:
  validate <config>      parse, validate, and echo the resolved configuration
  run <config|manifest>  run all initializations and write outputs
  sample-prior <config>  write prior field realizations as gridded CSV
  report <run-dir>       aggregate a finished run into a summary table

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    config_from_manifest,
    load_config,
    run_experiment,
    sample_prior_fields,
    summarize_run,
)


def _load(path: str):
    if path.endswith(".json"):
        return config_from_manifest(path)
    return load_config(path)


def _apply_overrides(config, args) -> None:
    if getattr(args, "seed", None) is not None:
        config["experiment"]["master_seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        config["experiment"]["out_dir"] = args.out_dir
    if getattr(args, "max_iter", None) is not None:
        config["eki"]["max_outer_iterations"] = args.max_iter


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ekinv",
        description="Regularizing iterative ensemble Kalman inversion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="validate a configuration file")
    p_validate.add_argument("config")

    p_run = sub.add_parser("run", help="run an experiment from a config or manifest")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, help="override the master seed")
    p_run.add_argument("--out-dir", help="override the output directory")
    p_run.add_argument("--parallel", type=int, default=1,
                       help="number of concurrent initializations")
    p_run.add_argument("--max-iter", type=int, help="override max outer iterations")

    p_sample = sub.add_parser("sample-prior", help="write prior field realizations")
    p_sample.add_argument("config")
    p_sample.add_argument("--seed", type=int, help="override the master seed")
    p_sample.add_argument("--out-dir", help="output directory (default: prior-samples)")

    p_report = sub.add_parser("report", help="summarize a finished run directory")
    p_report.add_argument("run_dir")
    return parser


def cli(argv=None) -> int:
    """Run the command line interface; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.command == "validate":
            config = _load(args.config)
            print(config.echo())
            return 0

        if args.command == "run":
            config = _load(args.config)
            _apply_overrides(config, args)
            manifest = run_experiment(config, parallel=max(1, args.parallel))
            out_dir = config["experiment"]["out_dir"]
            n_ok = sum(init["stop_reason"] == "discrepancy"
                       for init in manifest["initializations"])
            print(f"run complete: {len(manifest['initializations'])} initializations "
                  f"({n_ok} reached the discrepancy threshold) -> {out_dir}")
            return 0

        if args.command == "sample-prior":
            config = _load(args.config)
            _apply_overrides(args=args, config=config)
            out_dir = args.out_dir or "prior-samples"
            written = sample_prior_fields(config, out_dir)
            print("\n".join(written))
            return 0

        # report
        summary = summarize_run(args.run_dir)
        header = f"{'init':>4} {'stop_reason':>14} {'iters':>6} {'misfit':>12} {'rel_error':>12}"
        print(header)
        for row in summary["rows"]:
            misfit = "-" if row["final_misfit"] is None else f"{row['final_misfit']:.5g}"
            err = "-" if row["final_rel_error"] is None else f"{row['final_rel_error']:.5g}"
            print(f"{row['index']:>4} {row['stop_reason']:>14} {row['iterations']:>6} "
                  f"{misfit:>12} {err:>12}")
        stats = {k: summary[k] for k in
                 ("n_discrepancy", "rel_error_min", "rel_error_median", "rel_error_max")}
        print(json.dumps(stats, indent=2, sort_keys=True))
        return 0

    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
