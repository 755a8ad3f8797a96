"""Faultscope command-line interface."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any

from faultscope.acceptance import AcceptanceSettings, run_acceptance, write_acceptance_artifacts
from faultscope.errors import ConfigError
from faultscope.models import Block, FaultKind, RunConfig, config_schema, load_run_config
from faultscope.observability import StageTimings, configure_logging
from faultscope.pipeline import (
    run_baseline,
    run_calibrate,
    run_monitor,
    run_select,
    run_simulate,
    run_train,
)
from faultscope.reporting import write_report
from faultscope.settings import load_settings

EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_USAGE = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="Output directory")


def _add_model_paths(parser: argparse.ArgumentParser, thresholds: bool) -> None:
    parser.add_argument("--data", default=None, help="Dataset CSV")
    parser.add_argument("--model", default=None, help="Model artifact path")
    if thresholds:
        parser.add_argument("--thresholds", default=None, help="Threshold file path")


def _add_block(parser: argparse.ArgumentParser, default: Block) -> None:
    parser.add_argument(
        "--block",
        choices=[block.value for block in Block],
        default=default.value,
        help="Contiguous split block of the dataset to use",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Faultscope process monitoring CLI")
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Simulate the synthetic plant")
    _add_common(simulate)
    simulate.add_argument("--data", default=None, help="Output dataset CSV")
    simulate.add_argument("--plant", choices=["default"], default=None)
    simulate.add_argument("--plant-seed", type=int, default=None)
    simulate.add_argument("--fault", choices=[kind.value for kind in FaultKind], default=None)
    simulate.add_argument("--T", dest="n_steps", type=int, default=None)
    simulate.add_argument("--onset", type=int, default=None)
    simulate.add_argument("--magnitude", type=float, default=None)

    train = subparsers.add_parser("train", help="Train the Bayesian RNN on NOC data")
    _add_common(train)
    _add_model_paths(train, thresholds=False)
    train.add_argument(
        "--grid", action="store_true", help="Select hyperparameters over the configured grid"
    )

    calibrate = subparsers.add_parser("calibrate", help="Calibrate detection thresholds")
    _add_common(calibrate)
    _add_model_paths(calibrate, thresholds=True)
    _add_block(calibrate, Block.VALIDATION)

    monitor = subparsers.add_parser("monitor", help="Monitor a series with a trained model")
    _add_common(monitor)
    _add_model_paths(monitor, thresholds=True)
    _add_block(monitor, Block.TEST)
    monitor.add_argument(
        "--bands", action="store_true", help="Also write predictive mean and band per step"
    )

    baseline = subparsers.add_parser("baseline", help="Run the PCA/DPCA baselines")
    _add_common(baseline)
    baseline.add_argument("--data", default=None, help="Dataset CSV with NOC train/validation")
    baseline.add_argument("--test", default=None, help="Separate test dataset CSV")
    _add_block(baseline, Block.TEST)

    report = subparsers.add_parser("report", help="Compare monitor and baseline summaries")
    report.add_argument("runs", nargs="+", help="Run directories holding summary.json files")
    report.add_argument("--out", default="out/report")

    subparsers.add_parser("schema", help="Print the run configuration JSON schema")

    acceptance = subparsers.add_parser("acceptance", help="Run desk-scale acceptance checks")
    acceptance.add_argument("--seeds", type=int, default=5)
    acceptance.add_argument("--epochs", type=int, default=50)
    acceptance.add_argument("--samples", type=int, default=200)
    acceptance.add_argument("--skip-parallel-analysis", action="store_true")
    acceptance.add_argument("--output-json", default="reports/acceptance.json")
    acceptance.add_argument("--output-md", default="reports/acceptance.md")

    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    mapping = {
        "seed": "seed",
        "out": "paths.out",
        "data": "paths.data",
        "model": "paths.model",
        "thresholds": "paths.thresholds",
        "plant": "simulate.plant",
        "plant_seed": "simulate.plant_seed",
        "fault": "simulate.fault",
        "n_steps": "simulate.n_steps",
        "onset": "simulate.onset",
        "magnitude": "simulate.magnitude",
    }
    return {key: getattr(args, name) for name, key in mapping.items() if hasattr(args, name)}


def _run(args: argparse.Namespace, timings: StageTimings) -> int:
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "report":
        csv_path, text_path = write_report(args.runs, args.out)
        print(f"Wrote comparison CSV to {csv_path}")
        print(f"Wrote comparison table to {text_path}")
        return EXIT_OK

    if args.command == "acceptance":
        if args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        settings = AcceptanceSettings(
            seeds=tuple(range(args.seeds)), epochs=args.epochs, n_samples=args.samples
        )
        report = run_acceptance(settings, include_parallel_analysis=not args.skip_parallel_analysis)
        json_path, md_path = write_acceptance_artifacts(report, args.output_json, args.output_md)
        print(f"Wrote acceptance JSON to {json_path}")
        print(f"Wrote acceptance markdown to {md_path}")
        print(f"Acceptance status: {'PASS' if report['pass'] else 'FAIL'}")
        if report["violations"]:
            print("Violations:")
            for violation in report["violations"]:
                print(f"- {violation}")
            return EXIT_COMPUTATION
        return EXIT_OK

    cfg: RunConfig = load_run_config(args.config, _overrides(args))

    if args.command == "simulate":
        simulated = run_simulate(cfg)
        print(f"Wrote dataset to {simulated.data_path}")
        print(f"Wrote truth labels to {simulated.truth_path}")
        return EXIT_OK

    if args.command == "train":
        trained = run_select(cfg, timings) if args.grid else run_train(cfg, timings)
        print(f"Wrote model artifact to {trained.model_path}")
        print(f"Wrote training report to {trained.report_path}")
        if trained.grid_path is not None:
            print(f"Wrote grid results to {trained.grid_path}")
        return EXIT_OK

    if args.command == "calibrate":
        calibrated = run_calibrate(cfg, Block(args.block), timings)
        print(f"Wrote thresholds to {calibrated.path}")
        return EXIT_OK

    if args.command == "monitor":
        monitored = run_monitor(cfg, Block(args.block), bands=args.bands, timings=timings)
        print(f"Wrote results to {monitored.results_path}")
        print(f"Wrote identification grid to {monitored.idplot_path}")
        if monitored.bands_path is not None:
            print(f"Wrote predictive bands to {monitored.bands_path}")
        print(json.dumps(monitored.summary, indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "baseline":
        outcomes = run_baseline(cfg, Block(args.block), test_path=args.test, timings=timings)
        for outcome in outcomes:
            print(f"Wrote {outcome.summary['method']} results to {outcome.results_path}")
        return EXIT_OK

    raise ConfigError(f"Unsupported command: {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(load_settings())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    timings = StageTimings()
    try:
        return _run(args, timings)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION
    finally:
        timings.log(args.command)


if __name__ == "__main__":
    raise SystemExit(main())
