"""Offline training and online monitoring pipelines behind the CLI verbs."""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, TypedDict

import numpy as np

from faultscope.artifacts import (
    ModelArtifact,
    ThresholdSet,
    load_model,
    load_thresholds,
    model_fingerprint,
    save_model,
    save_thresholds,
)
from faultscope.baselines import BaselineResult, run_variant
from faultscope.data import (
    FLOAT_FORMAT,
    NormalizationStats,
    SplitSpec,
    TimeSeriesDataset,
    atomic_write_text,
    fit_normalizer,
    format_table,
    load_csv,
    normalize,
    split,
    split_sizes,
)
from faultscope.detection import (
    MonitorFrame,
    calibrate_threshold,
    detection_delay,
    detection_statistic,
    far,
    fdr,
    monitor_frames,
)
from faultscope.errors import ConfigError, DatasetFormatError
from faultscope.identification import (
    build_frames,
    calibrate_var_thresholds,
    export_idplot,
    identification_scores,
    propagation_order,
    rank_variables,
)
from faultscope.linalg import BoolArray, FloatArray, derive_seed
from faultscope.models import (
    Block,
    DetectionConfig,
    DetectionMethod,
    FaultKind,
    IdentificationConfig,
    RunConfig,
    SplitConfig,
    TrainConfig,
)
from faultscope.observability import StageTimings
from faultscope.plant import (
    FaultScenario,
    TruthLabels,
    default_plant,
    default_scenario,
    read_truth_csv,
    simulate,
    truth_path_for,
    write_truth_csv,
)
from faultscope.posterior import iter_predictions, predictive_band
from faultscope.rnn import RnnModel
from faultscope.trainer import TrainReport, train

LOGGER = logging.getLogger("faultscope.pipeline")

RESULTS_NAME = "results.csv"
IDPLOT_NAME = "idplot.csv"
BANDS_NAME = "bands.csv"
SUMMARY_NAME = "summary.json"
BASELINE_DIR = "baseline"


class PropagationPayload(TypedDict):
    variable: str
    t: int


class SummaryPayload(TypedDict):
    method: str
    scenario: str
    n_frames: int
    first_t: int
    onset: int | None
    alarm_count: int
    far: float | None
    fdr: float | None
    detection_delay: int | None
    propagation_order: list[PropagationPayload]
    first_alarm_ranking: list[str] | None
    notes: list[str]


@dataclass(frozen=True, slots=True, eq=False)
class BlockData:
    """A contiguous block of a data file with its labels re-indexed to the block."""

    dataset: TimeSeriesDataset
    truth: TruthLabels | None
    onset: int | None
    scenario: str


@dataclass(frozen=True, slots=True)
class SimulateOutcome:
    data_path: Path
    truth_path: Path
    scenario_path: Path


@dataclass(frozen=True, slots=True)
class TrainOutcome:
    model_path: Path
    report_path: Path
    report: TrainReport
    grid_path: Path | None = None


@dataclass(frozen=True, slots=True)
class CalibrateOutcome:
    path: Path
    thresholds: ThresholdSet


@dataclass(frozen=True, slots=True)
class MonitorOutcome:
    results_path: Path
    idplot_path: Path
    flags_path: Path
    summary_path: Path
    summary: SummaryPayload
    bands_path: Path | None = None


@dataclass(frozen=True, slots=True)
class BaselineOutcome:
    results_path: Path
    summary_path: Path
    summary: SummaryPayload


def _dump_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def resolve_output(cfg: RunConfig, name: str | Path) -> Path:
    target = Path(name)
    return target if target.is_absolute() else Path(cfg.paths.out) / target


def _data_path(cfg: RunConfig) -> Path:
    if cfg.paths.data is None:
        raise ConfigError("no dataset given; set paths.data or pass --data")
    return Path(cfg.paths.data)


def _split_spec(split_cfg: SplitConfig) -> SplitSpec:
    return SplitSpec(
        train_fraction=split_cfg.train_fraction,
        validation_fraction=split_cfg.validation_fraction,
        contiguous=split_cfg.contiguous,
    )


def scenario_path_for(path: str | Path) -> Path:
    target = Path(path)
    return target.with_name(f"{target.stem}_scenario.json")


def write_scenario_json(path: str | Path, scenario: FaultScenario) -> Path:
    payload = {
        "kind": scenario.kind.value,
        "onset": scenario.onset,
        "magnitude": scenario.magnitude,
        "target_channel": scenario.target_channel,
        "recovery_horizon": scenario.recovery_horizon,
    }
    return atomic_write_text(path, _dump_json(payload))


def read_scenario_json(path: str | Path) -> FaultScenario:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return FaultScenario(
            kind=FaultKind(payload["kind"]),
            onset=int(payload["onset"]),
            magnitude=float(payload["magnitude"]),
            target_channel=int(payload["target_channel"]),
            recovery_horizon=int(payload["recovery_horizon"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed scenario file {path}: {exc}") from exc


def block_bounds(n_rows: int, block: Block, split_cfg: SplitConfig) -> tuple[int, int]:
    if block is Block.ALL:
        return 0, n_rows
    n_train, n_validation, _ = split_sizes(n_rows, _split_spec(split_cfg))
    if block is Block.TRAIN:
        return 0, n_train
    if block is Block.VALIDATION:
        return n_train, n_train + n_validation
    return n_train + n_validation, n_rows


def load_block(path: str | Path, block: Block, split_cfg: SplitConfig) -> BlockData:
    """Read a data file plus its truth and scenario sidecars, restricted to one split block."""
    dataset = load_csv(path)
    if block is not Block.ALL:
        split(dataset, _split_spec(split_cfg))
    start, stop = block_bounds(dataset.n_rows, block, split_cfg)
    part = dataset if (start, stop) == (0, dataset.n_rows) else dataset.rows(start, stop)

    truth: TruthLabels | None = None
    truth_file = truth_path_for(path)
    if truth_file.exists():
        labels = read_truth_csv(truth_file)
        if labels.truth.size != dataset.n_rows:
            raise DatasetFormatError(
                f"truth sidecar has {labels.truth.size} rows, dataset has {dataset.n_rows}"
            )
        truth = labels.rows(start, stop)

    onset: int | None = None
    scenario = Path(path).stem
    scenario_file = scenario_path_for(path)
    if scenario_file.exists():
        recorded = read_scenario_json(scenario_file)
        scenario = recorded.kind.value
        if recorded.kind is not FaultKind.NONE:
            onset = recorded.onset - start
    elif truth is not None:
        onset = truth.onset
    return BlockData(dataset=part, truth=truth, onset=onset, scenario=scenario)


def _check_names(expected: Sequence[str], ds: TimeSeriesDataset, what: str) -> None:
    if tuple(expected) != ds.names:
        raise ValueError(f"{what} columns {list(ds.names)} do not match {list(expected)}")


def detection_scores(
    alarms: BoolArray, first_t: int, data: BlockData
) -> tuple[float | None, float | None, int | None]:
    """FAR before the onset, FDR and delay from the onset on; None where a span is empty."""
    if data.truth is None and data.onset is None:
        return None, None, None
    if data.onset is None:
        return far(alarms), None, None
    onset_index = max(data.onset - first_t, 0)
    far_value = far(alarms[:onset_index]) if onset_index > 0 else None
    if onset_index >= alarms.size:
        return far_value, None, None
    return far_value, fdr(alarms, onset_index), detection_delay(alarms, onset_index)


def first_alarm_ranking(
    alarms: BoolArray, first_t: int, data: BlockData, scores: FloatArray, names: Sequence[str]
) -> list[str] | None:
    """Variables by descending |score| at the first alarm at or after the onset."""
    start = 0 if data.onset is None else max(data.onset - first_t, 0)
    hits = np.flatnonzero(alarms[start:])
    if not hits.size:
        return None
    return [names[index] for index in rank_variables(scores[start + int(hits[0])])]


def results_table(frames: Sequence[MonitorFrame]) -> FloatArray:
    """Rows of t, statistic, threshold, alarm, scores and flags, one per frame."""
    return np.array(
        [
            [
                float(frame.t),
                frame.statistic,
                frame.threshold,
                float(frame.alarm),
                *frame.scores,
                *(float(flag) for flag in frame.flags),
            ]
            for frame in frames
        ],
        dtype=np.float64,
    )


def run_simulate(cfg: RunConfig) -> SimulateOutcome:
    sim = cfg.simulate
    plant = default_plant(cfg.seed if sim.plant_seed is None else sim.plant_seed)
    if sim.saturation:
        plant = replace(plant, saturation=True)
    scenario = replace(
        default_scenario(plant, sim.fault, sim.onset), recovery_horizon=sim.recovery_horizon
    )
    if sim.magnitude is not None:
        scenario = replace(scenario, magnitude=sim.magnitude)
    if sim.target_channel is not None:
        scenario = replace(scenario, target_channel=sim.target_channel)
    labeled = simulate(plant, scenario, sim.n_steps, derive_seed(cfg.seed, "simulate"))

    data_path = Path(cfg.paths.data) if cfg.paths.data else resolve_output(cfg, "data.csv")
    atomic_write_text(data_path, format_table(labeled.dataset.names, labeled.dataset.values))
    truth_path = write_truth_csv(truth_path_for(data_path), labeled.truth, labeled.affected)
    scenario_path = write_scenario_json(scenario_path_for(data_path), scenario)
    return SimulateOutcome(data_path=data_path, truth_path=truth_path, scenario_path=scenario_path)


def _training_blocks(
    cfg: RunConfig,
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, NormalizationStats]:
    path = _data_path(cfg)
    full = load_block(path, Block.ALL, cfg.split)
    if full.truth is not None and bool(np.any(full.truth.truth)):
        raise ValueError(
            f"refusing to train on {path}: its truth sidecar marks "
            f"{int(np.count_nonzero(full.truth.truth))} faulty rows"
        )
    train_ds, val_ds, _ = split(full.dataset, _split_spec(cfg.split))
    stats = fit_normalizer(train_ds)
    return normalize(train_ds, stats), normalize(val_ds, stats), stats


def _train_config(cfg: RunConfig, **updates: Any) -> TrainConfig:
    seed = cfg.train.seed if cfg.train.seed is not None else derive_seed(cfg.seed, "train")
    return cfg.train.model_copy(update={"seed": seed, **updates})


def report_path_for(model_path: Path) -> Path:
    return model_path.with_name(f"{model_path.stem}_report.json")


def grid_path_for(model_path: Path) -> Path:
    return model_path.with_name(f"{model_path.stem}_grid.json")


def _save_trained(cfg: RunConfig, model: RnnModel, report: TrainReport) -> tuple[Path, Path]:
    model_path = save_model(
        model, resolve_output(cfg, cfg.paths.model), derive_seed(cfg.seed, "ensemble")
    )
    report_path = atomic_write_text(report_path_for(model_path), _dump_json(report.to_payload()))
    return model_path, report_path


def run_train(cfg: RunConfig, timings: StageTimings | None = None) -> TrainOutcome:
    timings = timings or StageTimings()
    with timings.stage("load"):
        train_ds, val_ds, stats = _training_blocks(cfg)
    with timings.stage("train"):
        model, report = train(
            train_ds,
            val_ds,
            cfg.model.hidden_size,
            cfg.model.activation,
            _train_config(cfg),
            stats,
        )
    model_path, report_path = _save_trained(cfg, model, report)
    return TrainOutcome(model_path=model_path, report_path=report_path, report=report)


def run_select(cfg: RunConfig, timings: StageTimings | None = None) -> TrainOutcome:
    """Train one model per grid candidate and keep the best validation log-likelihood."""
    timings = timings or StageTimings()
    with timings.stage("load"):
        train_ds, val_ds, stats = _training_blocks(cfg)
    grid = cfg.grid
    candidates = list(
        itertools.product(grid.hidden_sizes, grid.activations, grid.dropouts, grid.l2_lambdas)
    )
    entries: list[dict[str, Any]] = []
    best: tuple[RnnModel, TrainReport] | None = None
    best_index = 0
    for index, (hidden_size, activation, dropout, l2_lambda) in enumerate(candidates):
        with timings.stage("train"):
            model, report = train(
                train_ds,
                val_ds,
                hidden_size,
                activation,
                _train_config(cfg, dropout=dropout, l2_lambda=l2_lambda),
                stats,
            )
        entries.append(
            {
                "hidden_size": hidden_size,
                "activation": activation,
                "dropout": dropout,
                "l2_lambda": l2_lambda,
                "selected_epoch": report.selected_epoch,
                "validation_log_likelihood": report.best_log_likelihood,
            }
        )
        LOGGER.info(
            "grid_candidate %s", json.dumps({"index": index, **entries[-1]}, sort_keys=True)
        )
        if best is None or report.best_log_likelihood > best[1].best_log_likelihood:
            best = (model, report)
            best_index = index
    assert best is not None
    model_path, report_path = _save_trained(cfg, *best)
    grid_path = atomic_write_text(
        grid_path_for(model_path), _dump_json({"candidates": entries, "selected": best_index})
    )
    return TrainOutcome(
        model_path=model_path, report_path=report_path, report=best[1], grid_path=grid_path
    )


def session_seed(artifact: ModelArtifact, session: int) -> int:
    return derive_seed(artifact.ensemble_seed, f"session:{session}")


def score_block(
    model: RnnModel,
    values: FloatArray,
    n_samples: int,
    seed: int,
    detection: DetectionConfig,
    identification: IdentificationConfig,
    band_z: float | None = None,
) -> tuple[FloatArray, FloatArray, FloatArray | None]:
    """Detection statistic, identification scores and optional band rows for t = 1..T−1."""
    statistics: list[float] = []
    scores: list[FloatArray] = []
    bands: list[FloatArray] = []
    stats = model.stats
    for summary, observation in zip(
        iter_predictions(model, values, n_samples, seed), values[1:], strict=True
    ):
        statistics.append(detection_statistic(summary, observation, detection))
        scores.append(
            identification_scores(observation, summary, identification, detection)
        )
        if band_z is not None:
            lower, upper = predictive_band(summary, band_z)
            bands.append(
                np.concatenate(
                    [
                        summary.mean * stats.scale + stats.mean,
                        summary.std * stats.scale,
                        lower * stats.scale + stats.mean,
                        upper * stats.scale + stats.mean,
                    ]
                )
            )
    band_rows = np.array(bands, dtype=np.float64) if band_z is not None else None
    return np.array(statistics, dtype=np.float64), np.array(scores, dtype=np.float64), band_rows


def _check_ensemble(cfg: RunConfig, n_samples: int) -> None:
    if cfg.detection.method is DetectionMethod.LDR and cfg.detection.k_max >= n_samples:
        raise ConfigError(
            f"detection.k_max={cfg.detection.k_max} must be below posterior.n_samples={n_samples}"
        )


def run_calibrate(
    cfg: RunConfig, block: Block = Block.VALIDATION, timings: StageTimings | None = None
) -> CalibrateOutcome:
    timings = timings or StageTimings()
    with timings.stage("load"):
        artifact = load_model(resolve_output(cfg, cfg.paths.model))
        model = artifact.model
        data = load_block(_data_path(cfg), block, cfg.split)
        _check_names(model.names, data.dataset, "calibration data")
        values = normalize(data.dataset, model.stats).values
    n_samples = cfg.posterior.n_samples
    _check_ensemble(cfg, n_samples)
    with timings.stage("ensemble"):
        statistics, scores, _ = score_block(
            model,
            values,
            n_samples,
            session_seed(artifact, cfg.posterior.session),
            cfg.detection,
            cfg.identification,
        )
    with timings.stage("thresholds"):
        thresholds = ThresholdSet(
            detection_method=cfg.detection.method,
            detection_threshold=calibrate_threshold(statistics, cfg.detection.alpha),
            alpha=cfg.detection.alpha,
            identification=calibrate_var_thresholds(
                scores,
                cfg.identification.alpha,
                cfg.identification.method,
                cfg.identification.mode,
            ),
            alpha_id=cfg.identification.alpha,
            n_samples=n_samples,
            k_min=cfg.detection.k_min,
            k_max=cfg.detection.k_max,
            session=cfg.posterior.session,
            model_fingerprint=model_fingerprint(model),
        )
    path = save_thresholds(thresholds, resolve_output(cfg, cfg.paths.thresholds))
    LOGGER.info(
        "calibrated %s",
        json.dumps(
            {
                "method": thresholds.detection_method.value,
                "threshold": thresholds.detection_threshold,
                "frames": int(statistics.size),
                "block": block.value,
            },
            sort_keys=True,
        ),
    )
    return CalibrateOutcome(path=path, thresholds=thresholds)


def _summary(
    method: str,
    data: BlockData,
    alarms: BoolArray,
    first_t: int,
    order: list[PropagationPayload],
    ranking: list[str] | None,
    notes: Sequence[str] = (),
) -> SummaryPayload:
    far_value, fdr_value, delay = detection_scores(alarms, first_t, data)
    return {
        "method": method,
        "scenario": data.scenario,
        "n_frames": int(alarms.size),
        "first_t": first_t,
        "onset": data.onset,
        "alarm_count": int(np.count_nonzero(alarms)),
        "far": far_value,
        "fdr": fdr_value,
        "detection_delay": delay,
        "propagation_order": order,
        "first_alarm_ranking": ranking,
        "notes": list(notes),
    }


def run_monitor(
    cfg: RunConfig,
    block: Block = Block.TEST,
    bands: bool = False,
    timings: StageTimings | None = None,
) -> MonitorOutcome:
    timings = timings or StageTimings()
    with timings.stage("load"):
        artifact = load_model(resolve_output(cfg, cfg.paths.model))
        model = artifact.model
        thresholds = load_thresholds(resolve_output(cfg, cfg.paths.thresholds))
        if thresholds.model_fingerprint != model_fingerprint(model):
            raise ValueError("threshold file was calibrated for a different model")
        data = load_block(_data_path(cfg), block, cfg.split)
        _check_names(model.names, data.dataset, "monitoring data")
        values = normalize(data.dataset, model.stats).values

    detection = cfg.detection.model_copy(
        update={
            "method": thresholds.detection_method,
            "k_min": thresholds.k_min,
            "k_max": thresholds.k_max,
        }
    )
    identification = cfg.identification.model_copy(
        update={
            "method": thresholds.identification.method,
            "mode": thresholds.identification.mode,
        }
    )
    with timings.stage("ensemble"):
        statistics, scores, band_rows = score_block(
            model,
            values,
            thresholds.n_samples,
            session_seed(artifact, thresholds.session),
            detection,
            identification,
            band_z=cfg.posterior.band_z if bands else None,
        )

    names = model.names
    times = list(range(1, data.dataset.n_rows))
    frames = build_frames(times, scores, thresholds.identification)
    monitored = monitor_frames(
        times,
        statistics,
        thresholds.detection_threshold,
        scores,
        [frame.flags for frame in frames],
    )
    alarms = np.array([frame.alarm for frame in monitored], dtype=np.bool_)

    out_dir = Path(cfg.paths.out)
    with timings.stage("write"):
        header = [
            "t",
            "statistic",
            "threshold",
            "alarm",
            *(f"score_{name}" for name in names),
            *(f"flag_{name}" for name in names),
        ]
        fmt = ["%d", FLOAT_FORMAT, FLOAT_FORMAT, "%d", *[FLOAT_FORMAT] * len(names)]
        fmt += ["%d"] * len(names)
        results_path = atomic_write_text(
            out_dir / RESULTS_NAME, format_table(header, results_table(monitored), fmt)
        )
        idplot_path, flags_path = export_idplot(frames, out_dir / IDPLOT_NAME, names)

        bands_path: Path | None = None
        if band_rows is not None:
            band_header = [
                "t",
                *(f"{kind}_{name}" for kind in ("mean", "std", "lower", "upper") for name in names),
            ]
            bands_path = atomic_write_text(
                out_dir / BANDS_NAME,
                format_table(
                    band_header,
                    np.column_stack([np.asarray(times, dtype=np.float64), band_rows]),
                    ["%d", *[FLOAT_FORMAT] * (4 * len(names))],
                ),
            )

        watched = [frame for frame in frames if data.onset is None or frame.t >= data.onset]
        order: list[PropagationPayload] = [
            {"variable": names[entry.variable], "t": entry.t}
            for entry in propagation_order(watched)
        ]
        summary = _summary(
            f"brnn-{thresholds.detection_method.value}",
            data,
            alarms,
            times[0],
            order,
            first_alarm_ranking(alarms, times[0], data, scores, names),
        )
        summary_path = atomic_write_text(out_dir / SUMMARY_NAME, _dump_json(summary))

    LOGGER.info(
        "monitor_completed %s",
        json.dumps(
            {
                "frames": len(frames),
                "alarms": summary["alarm_count"],
                "far": summary["far"],
                "fdr": summary["fdr"],
            },
            sort_keys=True,
        ),
    )
    return MonitorOutcome(
        results_path=results_path,
        idplot_path=idplot_path,
        flags_path=flags_path,
        summary_path=summary_path,
        summary=summary,
        bands_path=bands_path,
    )


def write_baseline_outputs(
    result: BaselineResult, data: BlockData, names: Sequence[str], out_dir: Path
) -> BaselineOutcome:
    first_t = result.lag
    times = np.arange(first_t, first_t + result.t2.size, dtype=np.float64)
    table = np.column_stack(
        [
            times,
            result.t2,
            result.q,
            result.alarms.astype(np.float64),
            result.t2_contributions,
            result.q_contributions,
        ]
    )
    header = [
        "t",
        "t2",
        "q",
        "alarm",
        *(f"t2_{name}" for name in names),
        *(f"q_{name}" for name in names),
    ]
    fmt = ["%d", FLOAT_FORMAT, FLOAT_FORMAT, "%d", *[FLOAT_FORMAT] * (2 * len(names))]
    results_path = atomic_write_text(out_dir / RESULTS_NAME, format_table(header, table, fmt))
    contributions = result.t2_contributions + result.q_contributions
    ranking = first_alarm_ranking(result.alarms, first_t, data, contributions, names)
    summary = _summary(
        result.variant.value, data, result.alarms, first_t, [], ranking, result.notes
    )
    summary_payload = {
        **summary,
        "a": result.a,
        "lag": result.lag,
        "width": result.width,
        "t2_threshold": result.t2_threshold,
        "q_threshold": result.q_threshold,
        "validation_far": result.validation_far,
    }
    summary_path = atomic_write_text(out_dir / SUMMARY_NAME, _dump_json(summary_payload))
    return BaselineOutcome(results_path=results_path, summary_path=summary_path, summary=summary)


def run_baseline(
    cfg: RunConfig,
    block: Block = Block.TEST,
    test_path: str | Path | None = None,
    timings: StageTimings | None = None,
) -> list[BaselineOutcome]:
    """Fit every configured PCA/DPCA variant and monitor the test data with it."""
    timings = timings or StageTimings()
    with timings.stage("load"):
        path = _data_path(cfg)
        full = load_block(path, Block.ALL, cfg.split)
        train_ds, val_ds, _ = split(full.dataset, _split_spec(cfg.split))
        test = (
            load_block(test_path, Block.ALL, cfg.split)
            if test_path is not None
            else load_block(path, block, cfg.split)
        )
        _check_names(train_ds.names, test.dataset, "test data")

    outcomes: list[BaselineOutcome] = []
    for variant in cfg.baseline.variants:
        with timings.stage(variant.value):
            result = run_variant(
                variant,
                train_ds,
                val_ds,
                test.dataset,
                cfg.baseline,
                derive_seed(cfg.seed, f"baseline:{variant.value}"),
            )
        outcomes.append(
            write_baseline_outputs(
                result,
                test,
                train_ds.names,
                resolve_output(cfg, BASELINE_DIR) / variant.value,
            )
        )
    return outcomes
