from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from faultscope.artifacts import load_thresholds
from faultscope.data import TimeSeriesDataset, load_csv
from faultscope.detection import monitor_frames
from faultscope.models import Block, RunConfig, load_run_config
from faultscope.pipeline import (
    BlockData,
    block_bounds,
    detection_scores,
    first_alarm_ranking,
    load_block,
    results_table,
    run_baseline,
    run_calibrate,
    run_monitor,
    run_select,
    run_simulate,
    run_train,
    scenario_path_for,
)
from faultscope.plant import TruthLabels, read_truth_csv

SMALL_RUN: dict[str, Any] = {
    "seed": 4,
    "simulate.n_steps": 400,
    "model.hidden_size": 4,
    "train.epochs": 2,
    "train.subsequence_len": 16,
    "train.batch_size": 4,
    "train.validation_samples": 8,
    "posterior.n_samples": 30,
    "identification.alpha": 0.05,
    "baseline.n_draws": 10,
    "grid.hidden_sizes": [3, 4],
}


def small_config(out: Path, data: Path, **updates: Any) -> RunConfig:
    return load_run_config(
        None, {**SMALL_RUN, "paths.out": str(out), "paths.data": str(data), **updates}
    )


@dataclass(frozen=True)
class TrainedRun:
    root: Path
    noc: Path
    fault: Path

    def config(self, out: str = "out", **updates: Any) -> RunConfig:
        return small_config(self.root / out, self.noc, **updates)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory: pytest.TempPathFactory) -> TrainedRun:
    root = tmp_path_factory.mktemp("pipeline")
    noc = root / "noc.csv"
    fault = root / "fault.csv"
    run_simulate(small_config(root / "out", noc))
    fault_settings = {"simulate.fault": "uncontrollable", "simulate.onset": 300}
    run_simulate(small_config(root / "out", fault, **fault_settings))
    cfg = small_config(root / "out", noc)
    run_train(cfg)
    run_calibrate(cfg)
    return TrainedRun(root=root, noc=noc, fault=fault)


def test_simulate_writes_data_and_sidecars(trained_run: TrainedRun) -> None:
    dataset = load_csv(trained_run.fault)
    assert dataset.n_rows == 400
    assert dataset.n_vars == 14
    labels = read_truth_csv(trained_run.root / "fault_truth.csv")
    assert labels.onset == 300
    scenario = json.loads(scenario_path_for(trained_run.fault).read_text(encoding="utf-8"))
    assert scenario["kind"] == "uncontrollable"
    assert scenario["onset"] == 300
    assert not read_truth_csv(trained_run.root / "noc_truth.csv").truth.any()


def test_simulate_is_reproducible(tmp_path: Path, trained_run: TrainedRun) -> None:
    again = run_simulate(small_config(tmp_path, tmp_path / "noc.csv"))
    assert again.data_path.read_bytes() == trained_run.noc.read_bytes()
    assert again.truth_path.read_bytes() == (trained_run.root / "noc_truth.csv").read_bytes()


def test_train_writes_model_and_report(trained_run: TrainedRun) -> None:
    out = trained_run.root / "out"
    report = json.loads((out / "model_report.json").read_text(encoding="utf-8"))
    assert len(report["validation_log_likelihood"]) == 2
    assert 0 <= report["selected_epoch"] < 2
    thresholds = load_thresholds(out / "thresholds.json")
    assert thresholds.n_samples == 30
    assert thresholds.identification.lower is not None


def test_training_refuses_faulty_data(tmp_path: Path, trained_run: TrainedRun) -> None:
    with pytest.raises(ValueError, match="refusing to train"):
        run_train(small_config(tmp_path, trained_run.fault))


def test_monitor_noc_block(trained_run: TrainedRun) -> None:
    cfg = trained_run.config()
    outcome = run_monitor(cfg, Block.TEST, bands=True)
    summary = outcome.summary
    assert summary["scenario"] == "none"
    assert summary["onset"] is None
    assert summary["far"] is not None
    assert summary["fdr"] is None
    assert summary["n_frames"] == 99
    assert summary["method"] == "brnn-mahalanobis"

    lines = outcome.results_path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("t,statistic,threshold,alarm,score_y1,")
    assert lines[0].endswith(",flag_u4")
    assert len(lines) == 100
    assert lines[1].split(",")[0] == "1"
    assert outcome.bands_path is not None
    band_header = outcome.bands_path.read_text(encoding="utf-8").splitlines()[0]
    assert band_header.startswith("t,mean_y1,")
    assert outcome.flags_path.exists()


def test_monitor_is_byte_identical_across_reruns(trained_run: TrainedRun) -> None:
    cfg = trained_run.config()
    first = run_monitor(cfg, Block.TEST).results_path.read_bytes()
    second = run_monitor(cfg, Block.TEST).results_path.read_bytes()
    assert first == second


def test_monitor_fault_file_reports_detection_metrics(trained_run: TrainedRun) -> None:
    cfg = trained_run.config(**{"paths.data": str(trained_run.fault)})
    outcome = run_monitor(cfg, Block.ALL)
    summary = outcome.summary
    assert summary["scenario"] == "uncontrollable"
    assert summary["onset"] == 300
    assert summary["far"] is not None
    assert summary["fdr"] is not None
    assert 0.0 <= summary["fdr"] <= 1.0
    assert all(entry["t"] >= 300 for entry in summary["propagation_order"])
    ranking = summary["first_alarm_ranking"]
    if summary["detection_delay"] is None:
        assert ranking is None
    else:
        assert sorted(ranking) == sorted(load_csv(trained_run.fault).names)
    written = json.loads(outcome.summary_path.read_text(encoding="utf-8"))
    assert written == summary


def test_monitor_rejects_thresholds_of_another_model(trained_run: TrainedRun) -> None:
    out = trained_run.root / "out"
    payload = json.loads((out / "thresholds.json").read_text(encoding="utf-8"))
    payload["model_fingerprint"] = "0000000000000000"
    foreign = trained_run.root / "foreign_thresholds.json"
    foreign.write_text(json.dumps(payload), encoding="utf-8")
    cfg = trained_run.config(**{"paths.thresholds": str(foreign)})
    with pytest.raises(ValueError, match="different model"):
        run_monitor(cfg, Block.TEST)


def test_grid_selection_records_every_candidate(trained_run: TrainedRun) -> None:
    cfg = trained_run.config(out="grid", **{"train.epochs": 1})
    outcome = run_select(cfg)
    assert outcome.grid_path is not None
    grid = json.loads(outcome.grid_path.read_text(encoding="utf-8"))
    assert [entry["hidden_size"] for entry in grid["candidates"]] == [3, 4]
    likelihoods = [entry["validation_log_likelihood"] for entry in grid["candidates"]]
    assert grid["selected"] == int(np.argmax(likelihoods))


def test_baselines_write_one_directory_per_variant(trained_run: TrainedRun) -> None:
    cfg = trained_run.config(out="baseline")
    outcomes = run_baseline(cfg, Block.ALL, test_path=trained_run.fault)
    methods = [outcome.summary["method"] for outcome in outcomes]
    assert methods == ["r-pca", "f-pca", "r-dpca", "f-dpca"]
    for outcome in outcomes:
        assert outcome.results_path.parent.name == outcome.summary["method"]
        assert outcome.summary["onset"] == 300
        assert outcome.summary["fdr"] is not None
        ranking = outcome.summary["first_alarm_ranking"]
        assert ranking is None or len(ranking) == 14
    dynamic = json.loads(outcomes[2].summary_path.read_text(encoding="utf-8"))
    assert dynamic["lag"] == 1
    assert dynamic["first_t"] == 1


def test_block_bounds_are_contiguous() -> None:
    split_cfg = RunConfig().split
    assert block_bounds(400, Block.TRAIN, split_cfg) == (0, 200)
    assert block_bounds(400, Block.VALIDATION, split_cfg) == (200, 300)
    assert block_bounds(400, Block.TEST, split_cfg) == (300, 400)
    assert block_bounds(400, Block.ALL, split_cfg) == (0, 400)


def test_load_block_shifts_onset_into_the_block(trained_run: TrainedRun) -> None:
    split_cfg = RunConfig().split
    test_block = load_block(trained_run.fault, Block.TEST, split_cfg)
    assert test_block.onset == 0
    assert test_block.dataset.n_rows == 100
    assert test_block.truth is not None
    assert test_block.truth.truth.all()


def _block(onset: int | None, truth: bool = True) -> BlockData:
    labels = TruthLabels(truth=np.zeros(6, dtype=bool), affected=((),) * 6) if truth else None
    dataset = TimeSeriesDataset(values=np.zeros((6, 1)), names=("x1",))
    return BlockData(dataset=dataset, truth=labels, onset=onset, scenario="test")


def test_detection_scores_split_at_the_onset() -> None:
    alarms = np.array([False, True, False, True, True])
    assert detection_scores(alarms, 1, _block(None, truth=False)) == (None, None, None)
    assert detection_scores(alarms, 1, _block(None)) == (0.6, None, None)
    assert detection_scores(alarms, 1, _block(3)) == (0.5, 2.0 / 3.0, 1)
    assert detection_scores(alarms, 1, _block(1)) == (None, 0.6, 1)
    assert detection_scores(alarms, 1, _block(9)) == (0.6, None, None)


def test_first_alarm_ranking_orders_the_first_faulty_alarm() -> None:
    alarms = np.array([False, True, False, True, True])
    scores = np.array([[0.0, 0.0], [9.0, 1.0], [0.0, 0.0], [0.5, -2.0], [3.0, 0.0]])
    assert first_alarm_ranking(alarms, 1, _block(3), scores, ("a", "b")) == ["b", "a"]
    assert first_alarm_ranking(alarms, 1, _block(None), scores, ("a", "b")) == ["a", "b"]
    assert first_alarm_ranking(np.zeros(5, dtype=bool), 1, _block(3), scores, ("a", "b")) is None


def test_results_table_rows_follow_the_frames() -> None:
    frames = monitor_frames([7, 8], np.array([0.2, 3.0]), 1.0, [[0.5], [-2.5]], [[False], [True]])
    table = results_table(frames)
    np.testing.assert_array_equal(table, [[7, 0.2, 1.0, 0, 0.5, 0], [8, 3.0, 1.0, 1, -2.5, 1]])
