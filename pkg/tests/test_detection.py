from __future__ import annotations

import logging

import numpy as np
import pytest

from faultscope.detection import (
    MonitorFrame,
    alarms_for,
    calibrate_threshold,
    detection_delay,
    detection_statistic,
    far,
    fdr,
    knn_density,
    ldr,
    mahalanobis_sq,
    monitor_frames,
    score_frames,
)
from faultscope.linalg import make_rng
from faultscope.models import DetectionConfig, DetectionMethod
from faultscope.posterior import summarize


def _brute_density(point: np.ndarray, others: np.ndarray, k: int, eps: float) -> float:
    distances = sorted(max(float(np.linalg.norm(row - point)), eps) for row in others)
    return k / sum(distances[:k])


def _brute_ldr(x: np.ndarray, samples: np.ndarray, k_min: int, k_max: int) -> float:
    eps = 1e-12
    order = sorted(range(len(samples)), key=lambda i: float(np.linalg.norm(samples[i] - x)))
    best = -np.inf
    for k in range(k_min, k_max + 1):
        query = _brute_density(x, samples, k, eps)
        neighbor_densities = [
            _brute_density(samples[i], np.delete(samples, i, axis=0), k, eps) for i in order[:k]
        ]
        best = max(best, float(np.mean(neighbor_densities)) / query)
    return best


def test_mahalanobis_matches_inverse_oracle() -> None:
    rng = make_rng(17)
    for _ in range(50):
        d = int(rng.integers(1, 6))
        raw = rng.normal(size=(d, d))
        cov = raw @ raw.T + 0.5 * np.eye(d)
        mean = rng.normal(size=d)
        x = rng.normal(size=d)
        expected = float((x - mean) @ np.linalg.inv(cov) @ (x - mean))
        assert mahalanobis_sq(x, mean, cov, ridge=0.0) == pytest.approx(expected, rel=1e-9)


def test_mahalanobis_identity_and_zero_deviation() -> None:
    assert mahalanobis_sq([3.0, 4.0], [0.0, 0.0], np.eye(2), ridge=0.0) == pytest.approx(25.0)
    assert mahalanobis_sq([1.0, 2.0], [1.0, 2.0], np.diag([2.0, 3.0])) == 0.0


def test_knn_density_matches_brute_force() -> None:
    rng = make_rng(23)
    samples = rng.normal(size=(30, 3))
    x = rng.normal(size=3)
    for k in (1, 5, 29):
        assert knn_density(x, samples, k) == pytest.approx(
            _brute_density(x, samples, k, 1e-12), rel=1e-12
        )
    with pytest.raises(ValueError, match="requires more than"):
        knn_density(x, samples, 30)


def test_knn_density_excludes_one_exact_duplicate() -> None:
    samples = np.array([[0.0], [1.0], [3.0]])
    assert knn_density([0.0], samples, 1) == pytest.approx(1.0)


def test_ldr_matches_brute_force() -> None:
    rng = make_rng(29)
    for case in range(20):
        samples = rng.normal(size=(25, 2))
        x = rng.normal(scale=1.0 + case % 3, size=2)
        assert ldr(x, samples, 3, 8) == pytest.approx(_brute_ldr(x, samples, 3, 8), rel=1e-10)


def test_ldr_separates_outlier_from_inlier() -> None:
    samples = make_rng(31).normal(size=(200, 2))
    inlier = ldr([0.0, 0.0], samples, 10, 20)
    outlier = ldr([8.0, 8.0], samples, 10, 20)
    assert inlier < 2.0
    assert outlier > 5.0 * inlier


def test_ldr_univariate_samples_accept_a_vector() -> None:
    samples = make_rng(37).uniform(-1.0, 1.0, size=21)
    assert ldr(0.05, samples, 2, 4) == pytest.approx(
        _brute_ldr(np.array([0.05]), samples[:, np.newaxis], 2, 4), rel=1e-10
    )


def test_ldr_validates_k_range() -> None:
    samples = np.zeros((5, 1)) + np.arange(5.0)[:, np.newaxis]
    with pytest.raises(ValueError, match="k_max\\+1"):
        ldr([0.5], samples, 2, 5)
    with pytest.raises(ValueError, match="k_min"):
        ldr([0.5], samples, 3, 2)


def test_calibrate_threshold_nearest_rank() -> None:
    assert calibrate_threshold(np.arange(1, 101, dtype=float), 0.05) == 95.0
    with pytest.raises(ValueError, match="empty"):
        calibrate_threshold([], 0.05)


def test_calibrate_threshold_warns_when_resolution_is_insufficient(
    caplog: pytest.LogCaptureFixture,
) -> None:
    with caplog.at_level(logging.WARNING, logger="faultscope.detection"):
        threshold = calibrate_threshold(np.arange(1, 11, dtype=float), 0.05)
    assert threshold == 10.0
    assert any("threshold_resolution_insufficient" in r.getMessage() for r in caplog.records)


def test_calibrated_threshold_gives_nominal_far_on_validation() -> None:
    statistics = make_rng(3).chisquare(3, size=2000)
    threshold = calibrate_threshold(statistics, 0.05)
    assert far(alarms_for(statistics, threshold)) <= 0.05


def test_detection_metrics() -> None:
    alarms = [False, False, True, False, True, True]
    assert far(alarms[:3]) == pytest.approx(1.0 / 3.0)
    assert fdr(alarms, 3) == pytest.approx(2.0 / 3.0)
    assert detection_delay(alarms, 3) == 1
    assert detection_delay([False, False, False], 1) is None
    with pytest.raises(ValueError, match="empty"):
        far([])
    with pytest.raises(ValueError, match="outside"):
        fdr(alarms, 6)


def test_alarm_is_strictly_greater_than_threshold() -> None:
    assert alarms_for(np.array([0.9, 1.0, 1.1]), 1.0).tolist() == [False, False, True]
    with pytest.raises(ValueError, match="alarm must equal"):
        MonitorFrame(t=1, statistic=1.0, threshold=1.0, alarm=True)


def test_detection_statistic_dispatches_on_method() -> None:
    rng = make_rng(5)
    summary = summarize(rng.normal(size=(30, 2)), tau=4.0)
    x = np.array([0.3, -0.2])
    maha = DetectionConfig(method=DetectionMethod.MAHALANOBIS, ridge=0.0)
    assert detection_statistic(summary, x, maha) == pytest.approx(
        mahalanobis_sq(x, summary.mean, summary.cov, ridge=0.0)
    )
    density = DetectionConfig(method=DetectionMethod.LDR, k_min=3, k_max=6)
    assert detection_statistic(summary, x, density) == ldr(x, summary.samples, 3, 6)
    too_wide = DetectionConfig(method=DetectionMethod.LDR, k_min=10, k_max=30)
    with pytest.raises(ValueError, match="below the ensemble size"):
        detection_statistic(summary, x, too_wide)


def test_score_frames_pairs_summaries_with_next_observations() -> None:
    rng = make_rng(6)
    summaries = [summarize(rng.normal(size=(10, 2)), tau=1.0) for _ in range(4)]
    observations = rng.normal(size=(4, 2))
    scores = score_frames(summaries, observations, DetectionConfig())
    expected = [
        detection_statistic(summary, row, DetectionConfig())
        for summary, row in zip(summaries, observations, strict=True)
    ]
    assert scores.tolist() == expected


def test_mahalanobis_two_by_two_closed_form() -> None:
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    inverse = np.array([[1.0, -0.5], [-0.5, 2.0]]) / 1.75
    deviation = np.array([1.0, 1.0])
    expected = float(deviation @ inverse @ deviation)
    assert mahalanobis_sq(deviation, np.zeros(2), cov, ridge=0.0) == pytest.approx(
        expected, rel=1e-12
    )


def test_mahalanobis_is_invariant_under_linear_maps_and_grows_along_rays() -> None:
    rng = make_rng(47)
    raw = rng.normal(size=(3, 3))
    cov = raw @ raw.T + np.eye(3)
    mean = rng.normal(size=3)
    x = rng.normal(size=3)
    transform = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
    before = mahalanobis_sq(x, mean, cov, ridge=0.0)
    after = mahalanobis_sq(transform @ x, transform @ mean, transform @ cov @ transform.T, 0.0)
    assert after == pytest.approx(before, rel=1e-8)

    direction = rng.normal(size=3)
    values = [mahalanobis_sq(mean + c * direction, mean, cov, 0.0) for c in (0.5, 1.0, 2.0, 4.0)]
    assert values == sorted(values)
    assert len(set(values)) == len(values)


def test_knn_density_hand_cases() -> None:
    assert knn_density([0.0], np.array([0.0, 1.0, 2.0, 3.0]), 2) == pytest.approx(2.0 / 3.0)
    ring = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert knn_density([0.0, 0.0], ring, 3) == pytest.approx(1.0)
    samples = make_rng(53).normal(size=(20, 2))
    x = np.array([0.2, 0.1])
    assert knn_density(3.0 * x, 3.0 * samples, 4) == pytest.approx(
        knn_density(x, samples, 4) / 3.0, rel=1e-12
    )


def test_ldr_on_uniform_grid_and_far_away() -> None:
    grid = np.linspace(0.0, 1.0, 64)
    assert 0.8 <= ldr(grid[31], grid, 4, 4) <= 1.25
    assert ldr(100.0, grid, 4, 4) > 10.0


def test_ldr_of_exact_duplicate_is_finite() -> None:
    samples = make_rng(59).normal(size=(30, 2))
    assert np.isfinite(ldr(samples[5], samples, 3, 6))
    stacked = np.vstack([samples, samples[5], samples[5]])
    assert np.isfinite(ldr(samples[5], stacked, 1, 3))


def test_ldr_ignores_sample_order() -> None:
    rng = make_rng(61)
    samples = rng.normal(size=(40, 3))
    x = rng.normal(size=3)
    shuffled = samples[rng.permutation(40)]
    assert ldr(x, shuffled, 5, 10) == pytest.approx(ldr(x, samples, 5, 10), rel=1e-12)


def test_calibrate_threshold_small_and_constant_samples() -> None:
    assert calibrate_threshold([1.0, 2.0, 3.0, 4.0], 0.5) == 2.0
    constant = np.full(50, 3.25)
    threshold = calibrate_threshold(constant, 0.05)
    assert threshold == 3.25
    assert far(alarms_for(constant, threshold)) == 0.0


def test_far_and_fdr_reference_counts() -> None:
    alarms = np.zeros(100, dtype=bool)
    alarms[[3, 17, 40, 41, 99]] = True
    assert far(alarms) == 0.05
    assert fdr(np.ones(10, dtype=bool), 4) == 1.0


def test_threshold_is_monotone_in_alpha() -> None:
    statistics = make_rng(71).chisquare(4, size=500)
    assert calibrate_threshold(statistics, 0.5) <= calibrate_threshold(statistics, 0.01)


def test_monitor_frames_carry_alarms_and_identification() -> None:
    statistics = np.array([0.5, 2.0, 1.0])
    scores = [[0.1, -0.2], [3.0, 0.4], [-1.0, 1.0]]
    flags = [[False, False], [True, False], [False, True]]
    frames = monitor_frames([4, 5, 6], statistics, 1.0, scores, flags)
    assert [frame.t for frame in frames] == [4, 5, 6]
    assert [frame.alarm for frame in frames] == alarms_for(statistics, 1.0).tolist()
    assert frames[1].scores == (3.0, 0.4)
    assert frames[2].flags == (False, True)
    assert all(frame.threshold == 1.0 for frame in frames)
    with pytest.raises(ValueError, match="frame length mismatch"):
        monitor_frames([4, 5], statistics, 1.0, scores, flags)
