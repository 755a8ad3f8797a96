"""Desk-scale acceptance experiments on the synthetic plant."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, TypedDict

import numpy as np

from faultscope.baselines import calibrate_and_monitor, fit_variant, parallel_analysis
from faultscope.data import TimeSeriesDataset, atomic_write_text, fit_normalizer, normalize
from faultscope.detection import alarms_for, calibrate_threshold, far, fdr
from faultscope.identification import build_frames, calibrate_var_thresholds, propagation_order
from faultscope.linalg import FloatArray, derive_seed, make_rng
from faultscope.models import (
    BaselineConfig,
    BaselineVariant,
    DetectionConfig,
    FaultKind,
    IdentificationConfig,
    TrainConfig,
)
from faultscope.observability import StageTimings
from faultscope.pipeline import score_block
from faultscope.plant import (
    FaultScenario,
    LabeledDataset,
    default_plant,
    default_scenario,
    simulate,
)
from faultscope.trainer import train

LOGGER = logging.getLogger("faultscope.acceptance")

FAR_RANGE = (0.025, 0.075)
MIN_FAULT_FDR = 0.90
CONTROLLABLE_MARGIN = 0.03
SIGNATURE_MV_SHARE = 0.60
SIGNATURE_MEASUREMENT_SHARE = 0.10
SEED_MAJORITY = 0.8
PARALLEL_ANALYSIS_SHARE = 0.95
_PA_ROWS = 500
_PA_VARS = 6
_PA_NOISE = 0.5


@dataclass(frozen=True, slots=True)
class AcceptanceSettings:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    hidden_size: int = 32
    dropout: float = 0.1
    l2_lambda: float = 1e-4
    epochs: int = 50
    n_samples: int = 200
    alpha: float = 0.05
    alpha_id: float = 0.01
    train_steps: int = 4000
    validation_steps: int = 2000
    test_steps: int = 2000
    onset: int = 1000
    recovery_window: int = 200
    pa_seeds: tuple[int, ...] = field(default_factory=lambda: tuple(range(40)))


class SeedResult(TypedDict):
    seed: int
    far: float
    uncontrollable_fdr: float
    uncontrollable_top2: bool
    controllable_fdr: float
    back_to_control_mv_share: float
    back_to_control_max_measurement_share: float
    back_to_control_max_other_mv_share: float
    fpca_uncontrollable_fdr: float
    fpca_controllable_fdr: float


class ParallelAnalysisResult(TypedDict):
    factor_counts: list[int]
    noise_counts: list[int]
    factor_share: float
    noise_share: float


@dataclass(frozen=True, slots=True, eq=False)
class _Runs:
    n_meas: int
    train: TimeSeriesDataset
    validation: TimeSeriesDataset
    heldout: TimeSeriesDataset
    faults: dict[FaultKind, LabeledDataset]


def _simulate_runs(seed: int, settings: AcceptanceSettings) -> _Runs:
    plant = default_plant(seed)
    noc = simulate(
        plant,
        FaultScenario(),
        settings.train_steps + settings.validation_steps,
        derive_seed(seed, "noc"),
    ).dataset
    heldout = simulate(plant, FaultScenario(), settings.test_steps, derive_seed(seed, "heldout"))
    faults = {
        kind: simulate(
            plant,
            default_scenario(plant, kind, settings.onset),
            settings.test_steps,
            derive_seed(seed, f"fault:{kind.value}"),
        )
        for kind in (FaultKind.UNCONTROLLABLE, FaultKind.CONTROLLABLE, FaultKind.BACK_TO_CONTROL)
    }
    return _Runs(
        n_meas=plant.n_meas,
        train=noc.rows(0, settings.train_steps),
        validation=noc.rows(settings.train_steps, noc.n_rows),
        heldout=heldout.dataset,
        faults=faults,
    )


def run_seed(seed: int, settings: AcceptanceSettings, timings: StageTimings) -> SeedResult:
    with timings.stage("simulate"):
        runs = _simulate_runs(seed, settings)
    train_raw, val_raw, faults = runs.train, runs.validation, runs.faults
    stats = fit_normalizer(train_raw)
    with timings.stage("train"):
        model, _ = train(
            normalize(train_raw, stats),
            normalize(val_raw, stats),
            settings.hidden_size,
            "tanh",
            TrainConfig(
                epochs=settings.epochs,
                dropout=settings.dropout,
                l2_lambda=settings.l2_lambda,
                seed=derive_seed(seed, "train"),
            ),
            stats,
        )
    detection = DetectionConfig(alpha=settings.alpha)
    identification = IdentificationConfig(alpha=settings.alpha_id)
    ensemble_seed = derive_seed(seed, "ensemble")

    def monitor(ds: TimeSeriesDataset) -> tuple[FloatArray, FloatArray]:
        statistics, scores, _ = score_block(
            model,
            normalize(ds, stats).values,
            settings.n_samples,
            ensemble_seed,
            detection,
            identification,
        )
        return statistics, scores

    with timings.stage("monitor"):
        val_statistics, val_scores = monitor(val_raw)
        threshold = calibrate_threshold(val_statistics, settings.alpha)
        var_thresholds = calibrate_var_thresholds(val_scores, settings.alpha_id)
        heldout_statistics, _ = monitor(runs.heldout)
        onset_index = settings.onset - 1
        times = list(range(1, settings.test_steps))

        uncontrollable = faults[FaultKind.UNCONTROLLABLE]
        u_statistics, u_scores = monitor(uncontrollable.dataset)
        u_frames = build_frames(times, u_scores, var_thresholds)
        order = propagation_order([frame for frame in u_frames if frame.t >= settings.onset])
        leading = [entry.variable for entry in order[:2]]

        c_statistics, _ = monitor(faults[FaultKind.CONTROLLABLE].dataset)

        recovery = faults[FaultKind.BACK_TO_CONTROL]
        _, b_scores = monitor(recovery.dataset)
        shares = var_thresholds.flags(b_scores[-settings.recovery_window :]).mean(axis=0)
        n_meas = runs.n_meas
        mv = recovery.scenario.target_channel
        other_mvs = [index for index in range(n_meas, shares.size) if index != mv]

    with timings.stage("baseline"):
        fpca = fit_variant(BaselineVariant.F_PCA, train_raw, BaselineConfig(), seed)
        fpca_fdr = {
            kind: fdr(
                calibrate_and_monitor(
                    fpca, val_raw, faults[kind].dataset, settings.alpha, BaselineVariant.F_PCA
                ).alarms,
                settings.onset,
            )
            for kind in (FaultKind.UNCONTROLLABLE, FaultKind.CONTROLLABLE)
        }

    result: SeedResult = {
        "seed": seed,
        "far": far(alarms_for(heldout_statistics, threshold)),
        "uncontrollable_fdr": fdr(alarms_for(u_statistics, threshold), onset_index),
        "uncontrollable_top2": uncontrollable.scenario.target_channel in leading,
        "controllable_fdr": fdr(alarms_for(c_statistics, threshold), onset_index),
        "back_to_control_mv_share": float(shares[mv]),
        "back_to_control_max_measurement_share": float(np.max(shares[:n_meas])),
        "back_to_control_max_other_mv_share": (
            float(np.max(shares[other_mvs])) if other_mvs else 0.0
        ),
        "fpca_uncontrollable_fdr": fpca_fdr[FaultKind.UNCONTROLLABLE],
        "fpca_controllable_fdr": fpca_fdr[FaultKind.CONTROLLABLE],
    }
    LOGGER.info("acceptance_seed %s", json.dumps(result, sort_keys=True))
    return result


def run_parallel_analysis_check(settings: AcceptanceSettings) -> ParallelAnalysisResult:
    """Planted one-factor data and independent white noise, one draw per seed."""
    names = tuple(f"x{index + 1}" for index in range(_PA_VARS))
    factor_counts: list[int] = []
    noise_counts: list[int] = []
    for seed in settings.pa_seeds:
        rng = make_rng(derive_seed(seed, "pa:data"))
        factor = rng.normal(size=(_PA_ROWS, 1))
        planted = factor @ np.ones((1, _PA_VARS)) + _PA_NOISE * rng.normal(
            size=(_PA_ROWS, _PA_VARS)
        )
        noise = rng.normal(size=(_PA_ROWS, _PA_VARS))
        pa_seed = derive_seed(seed, "pa:permutation")
        factor_counts.append(
            parallel_analysis(TimeSeriesDataset(values=planted, names=names), seed=pa_seed)
        )
        noise_counts.append(
            parallel_analysis(TimeSeriesDataset(values=noise, names=names), seed=pa_seed)
        )
    total = max(1, len(settings.pa_seeds))
    return {
        "factor_counts": factor_counts,
        "noise_counts": noise_counts,
        "factor_share": sum(count == 1 for count in factor_counts) / total,
        "noise_share": sum(count <= 2 for count in noise_counts) / total,
    }


def evaluate_criteria(
    seeds: list[SeedResult], parallel: ParallelAnalysisResult | None
) -> list[str]:
    violations: list[str] = []
    needed = math.ceil(SEED_MAJORITY * len(seeds))
    for result in seeds:
        seed = result["seed"]
        if not FAR_RANGE[0] <= result["far"] <= FAR_RANGE[1]:
            violations.append(
                f"far_out_of_range:seed={seed}:{result['far']:.4f} not in "
                f"[{FAR_RANGE[0]:.3f}, {FAR_RANGE[1]:.3f}]"
            )
        if result["uncontrollable_fdr"] < MIN_FAULT_FDR:
            violations.append(
                f"uncontrollable_fdr_low:seed={seed}:{result['uncontrollable_fdr']:.4f}"
                f"<{MIN_FAULT_FDR:.2f}"
            )
        if result["controllable_fdr"] > result["far"] + CONTROLLABLE_MARGIN:
            violations.append(
                f"controllable_fdr_high:seed={seed}:{result['controllable_fdr']:.4f}>"
                f"{result['far'] + CONTROLLABLE_MARGIN:.4f}"
            )
        if (
            result["back_to_control_mv_share"] < SIGNATURE_MV_SHARE
            or result["back_to_control_max_other_mv_share"] >= SIGNATURE_MV_SHARE
            or result["back_to_control_max_measurement_share"] > SIGNATURE_MEASUREMENT_SHARE
        ):
            violations.append(
                f"back_to_control_signature:seed={seed}:"
                f"mv={result['back_to_control_mv_share']:.3f},"
                f"measurement={result['back_to_control_max_measurement_share']:.3f},"
                f"other_mv={result['back_to_control_max_other_mv_share']:.3f}"
            )
        if result["fpca_uncontrollable_fdr"] < MIN_FAULT_FDR:
            violations.append(
                f"fpca_uncontrollable_fdr_low:seed={seed}:"
                f"{result['fpca_uncontrollable_fdr']:.4f}<{MIN_FAULT_FDR:.2f}"
            )

    top2 = sum(result["uncontrollable_top2"] for result in seeds)
    if top2 < needed:
        violations.append(f"propagation_top2:{top2}<{needed}")
    oversensitive = sum(
        result["fpca_controllable_fdr"] > result["controllable_fdr"] for result in seeds
    )
    if oversensitive < needed:
        violations.append(f"fpca_oversensitivity:{oversensitive}<{needed}")

    if parallel is not None:
        if parallel["factor_share"] < PARALLEL_ANALYSIS_SHARE:
            violations.append(
                f"parallel_analysis_factor:{parallel['factor_share']:.3f}"
                f"<{PARALLEL_ANALYSIS_SHARE:.2f}"
            )
        if parallel["noise_share"] < PARALLEL_ANALYSIS_SHARE:
            violations.append(
                f"parallel_analysis_noise:{parallel['noise_share']:.3f}"
                f"<{PARALLEL_ANALYSIS_SHARE:.2f}"
            )
    return violations


def render_acceptance_markdown(report: dict[str, Any]) -> str:
    lines: list[str] = []
    lines.append("# Faultscope Acceptance Report")
    lines.append("")
    lines.append(f"Seeds: {', '.join(str(seed) for seed in report['settings']['seeds'])}")
    lines.append("")
    lines.append("## Synthetic plant")
    lines.append("")
    lines.append(
        "| Seed | FAR | FDR uncontrollable | Top-2 | FDR controllable | "
        "MV share | Max meas share | f-PCA FDR unc. | f-PCA FDR ctrl. |"
    )
    lines.append("| ---: | ---: | ---: | --- | ---: | ---: | ---: | ---: | ---: |")
    for result in report["seeds"]:
        lines.append(
            f"| {result['seed']} | {result['far']:.4f} | {result['uncontrollable_fdr']:.4f} | "
            f"{'yes' if result['uncontrollable_top2'] else 'no'} | "
            f"{result['controllable_fdr']:.4f} | {result['back_to_control_mv_share']:.3f} | "
            f"{result['back_to_control_max_measurement_share']:.3f} | "
            f"{result['fpca_uncontrollable_fdr']:.4f} | {result['fpca_controllable_fdr']:.4f} |"
        )
    parallel = report.get("parallel_analysis")
    if parallel is not None:
        lines.append("")
        lines.append("## Parallel analysis")
        lines.append("")
        lines.append("| Data | Share meeting target |")
        lines.append("| --- | ---: |")
        lines.append(f"| one planted factor (a = 1) | {parallel['factor_share']:.3f} |")
        lines.append(f"| white noise (a <= 2) | {parallel['noise_share']:.3f} |")
    lines.append("")
    violations = report["violations"]
    if violations:
        lines.append("Status: `FAIL`")
        lines.append("")
        lines.append("Violations:")
        for violation in violations:
            lines.append(f"- `{violation}`")
    else:
        lines.append("Status: `PASS`")
    lines.append("")
    return "\n".join(lines)


def run_acceptance(
    settings: AcceptanceSettings, include_parallel_analysis: bool = True
) -> dict[str, Any]:
    timings = StageTimings()
    seeds = [run_seed(seed, settings, timings) for seed in settings.seeds]
    parallel = run_parallel_analysis_check(settings) if include_parallel_analysis else None
    violations = evaluate_criteria(seeds, parallel)
    timings.log("acceptance")
    payload = asdict(settings)
    payload["seeds"] = list(settings.seeds)
    payload["pa_seeds"] = list(settings.pa_seeds)
    return {
        "settings": payload,
        "seeds": seeds,
        "parallel_analysis": parallel,
        "violations": violations,
        "pass": not violations,
    }


def write_acceptance_artifacts(
    report: dict[str, Any], output_json: str | Path, output_md: str | Path
) -> tuple[Path, Path]:
    json_path = atomic_write_text(output_json, json.dumps(report, indent=2, sort_keys=True) + "\n")
    md_path = atomic_write_text(output_md, render_acceptance_markdown(report))
    return json_path, md_path
