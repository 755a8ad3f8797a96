"""Fault detection statistics, FAR-calibrated thresholds and detection metrics."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from faultscope.linalg import (
    BoolArray,
    FloatArray,
    as_vector,
    percentile_nearest_rank,
    spd_solve,
)
from faultscope.models import DetectionConfig, DetectionMethod
from faultscope.posterior import PredictiveSummary

LOGGER = logging.getLogger("faultscope.detection")

DEFAULT_EPS_DIST = 1e-12


@dataclass(frozen=True, slots=True)
class MonitorFrame:
    t: int
    statistic: float
    threshold: float
    alarm: bool
    scores: tuple[float, ...] = ()
    flags: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        if self.alarm != (self.statistic > self.threshold):
            raise ValueError("alarm must equal statistic > threshold")
        if len(self.scores) != len(self.flags):
            raise ValueError("scores and flags must have equal length")


def mahalanobis_sq(
    x: npt.ArrayLike, mean: npt.ArrayLike, cov: npt.ArrayLike, ridge: float = 1e-8
) -> float:
    """(x−μ)ᵀ(S + ridge·I)⁻¹(x−μ) through a Cholesky solve."""
    deviation = as_vector(x, "x") - as_vector(mean, "mean")
    solution = spd_solve(cov, deviation, ridge=ridge)
    return max(0.0, float(deviation @ solution))


def _as_samples(samples: npt.ArrayLike) -> FloatArray:
    array = np.asarray(samples, dtype=np.float64)
    if array.ndim == 1:
        return array[:, np.newaxis]
    if array.ndim != 2:
        raise ValueError(f"samples must be a vector or an N×d matrix, got shape {array.shape}")
    return array


def _as_point(x: npt.ArrayLike, width: int) -> FloatArray:
    point = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if point.shape != (width,):
        raise ValueError(
            f"dimension mismatch: point has {point.size} entries, samples have {width}"
        )
    return point


def _distances(point: FloatArray, samples: FloatArray) -> FloatArray:
    difference = samples - point
    return np.sqrt(np.sum(difference * difference, axis=1))


def _neighbor_order(
    point: FloatArray, samples: FloatArray
) -> tuple[FloatArray, npt.NDArray[np.intp]]:
    """Distances and stable neighbor order of a query, excluding one exact duplicate of it."""
    distances = _distances(point, samples)
    coincident = np.flatnonzero(distances == 0.0)
    if coincident.size:
        distances = distances.copy()
        distances[coincident[0]] = np.inf
    order = np.argsort(distances, kind="stable")
    if coincident.size:
        order = order[:-1]
    return distances, order


def _running_sums(sorted_distances: FloatArray, eps_dist: float) -> FloatArray:
    """Left-to-right partial sums of ε-floored ascending distances."""
    return np.cumsum(np.maximum(sorted_distances, eps_dist))


def knn_density(
    x: npt.ArrayLike, samples: npt.ArrayLike, k: int, eps_dist: float = DEFAULT_EPS_DIST
) -> float:
    """k divided by the summed distance to the k nearest samples."""
    data = _as_samples(samples)
    point = _as_point(x, data.shape[1])
    if k < 1:
        raise ValueError("k must be positive")
    if k >= data.shape[0]:
        raise ValueError(f"k={k} requires more than {k} samples, got {data.shape[0]}")
    distances, order = _neighbor_order(point, data)
    sums = _running_sums(distances[order], eps_dist)
    return k / float(sums[k - 1])


def ldr(
    x: npt.ArrayLike,
    samples: npt.ArrayLike,
    k_min: int,
    k_max: int,
    eps_dist: float = DEFAULT_EPS_DIST,
) -> float:
    """Maximum over k of the mean neighbor density divided by the query's own density."""
    data = _as_samples(samples)
    point = _as_point(x, data.shape[1])
    if not 1 <= k_min <= k_max:
        raise ValueError("need 1 ≤ k_min ≤ k_max")
    n_samples = data.shape[0]
    if n_samples < k_max + 1:
        raise ValueError(f"LDR needs at least k_max+1={k_max + 1} samples, got {n_samples}")

    distances, order = _neighbor_order(point, data)
    query_sums = _running_sums(distances[order], eps_dist)
    neighbors = order[:k_max]
    neighbor_sums = np.empty((k_max, n_samples - 1))
    for row, index in enumerate(neighbors):
        own = _distances(data[index], data)
        own[index] = np.inf
        neighbor_sums[row] = _running_sums(np.sort(own, kind="stable")[:-1], eps_dist)

    best = -math.inf
    for k in range(k_min, k_max + 1):
        query_density = k / float(query_sums[k - 1])
        neighbor_density = k / neighbor_sums[:k, k - 1]
        mean_density = float(np.cumsum(neighbor_density)[-1]) / k
        best = max(best, mean_density / query_density)
    return best


def calibrate_threshold(validation_stats: Sequence[float] | FloatArray, alpha: float) -> float:
    """Nearest-rank 100(1−α)th percentile of NOC validation statistics."""
    values = np.asarray(validation_stats, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot calibrate a threshold from an empty list")
    if not 0.0 < alpha < 1.0:
        raise ValueError("α must lie in (0, 1)")
    needed = math.ceil(round(1.0 / alpha, 9))
    if values.size < needed:
        LOGGER.warning(
            "threshold_resolution_insufficient %s",
            json.dumps({"alpha": alpha, "needed": needed, "n": int(values.size)}, sort_keys=True),
        )
    return percentile_nearest_rank(values, 1.0 - alpha)


def alarms_for(statistics: FloatArray, threshold: float) -> BoolArray:
    return np.asarray(statistics, dtype=np.float64) > threshold


def monitor_frames(
    times: Sequence[int],
    statistics: FloatArray,
    threshold: float,
    scores: npt.ArrayLike,
    flags: npt.ArrayLike,
) -> list[MonitorFrame]:
    """One frame per time step with its alarm and per-variable identification result."""
    values = np.asarray(statistics, dtype=np.float64)
    score_rows = np.asarray(scores, dtype=np.float64)
    flag_rows = np.asarray(flags, dtype=np.bool_)
    if not len(times) == values.size == score_rows.shape[0] == flag_rows.shape[0]:
        raise ValueError(
            f"frame length mismatch: {len(times)} times, {values.size} statistics, "
            f"{score_rows.shape[0]} score rows, {flag_rows.shape[0]} flag rows"
        )
    return [
        MonitorFrame(
            t=int(t),
            statistic=float(statistic),
            threshold=float(threshold),
            alarm=bool(alarm),
            scores=tuple(float(value) for value in score_row),
            flags=tuple(bool(flag) for flag in flag_row),
        )
        for t, statistic, alarm, score_row, flag_row in zip(
            times, values, alarms_for(values, threshold), score_rows, flag_rows, strict=True
        )
    ]


def far(alarms: Sequence[bool] | BoolArray) -> float:
    flags = np.asarray(alarms, dtype=np.bool_)
    if flags.size == 0:
        raise ValueError("FAR of an empty NOC span is undefined")
    return float(np.count_nonzero(flags)) / flags.size


def fdr(alarms: Sequence[bool] | BoolArray, onset_index: int) -> float:
    flags = np.asarray(alarms, dtype=np.bool_)
    if not 0 <= onset_index < flags.size:
        raise ValueError(f"onset index {onset_index} lies outside the series of {flags.size}")
    faulty = flags[onset_index:]
    return float(np.count_nonzero(faulty)) / faulty.size


def detection_delay(alarms: Sequence[bool] | BoolArray, onset_index: int) -> int | None:
    flags = np.asarray(alarms, dtype=np.bool_)
    if not 0 <= onset_index < flags.size:
        raise ValueError(f"onset index {onset_index} lies outside the series of {flags.size}")
    hits = np.flatnonzero(flags[onset_index:])
    return int(hits[0]) if hits.size else None


def detection_statistic(
    summary: PredictiveSummary, observation: FloatArray, config: DetectionConfig
) -> float:
    if config.method is DetectionMethod.MAHALANOBIS:
        return mahalanobis_sq(observation, summary.mean, summary.cov, ridge=config.ridge)
    if config.k_max >= summary.n_samples:
        raise ValueError(
            f"k_max={config.k_max} must be below the ensemble size N={summary.n_samples}"
        )
    return ldr(observation, summary.samples, config.k_min, config.k_max, config.eps_dist)


def score_frames(
    summaries: Iterable[PredictiveSummary],
    observations: FloatArray,
    config: DetectionConfig,
) -> FloatArray:
    """Statistic for each (summary, next observation) pair, in time order."""
    return np.array(
        [
            detection_statistic(summary, observation, config)
            for summary, observation in zip(summaries, observations, strict=True)
        ],
        dtype=np.float64,
    )
