"""Per-variable identification scores, thresholds, plots and fault propagation order."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from faultscope.data import write_grid_csv
from faultscope.detection import DEFAULT_EPS_DIST, ldr
from faultscope.linalg import (
    BoolArray,
    FloatArray,
    as_matrix,
    as_vector,
    column_percentiles,
    percentile_nearest_rank,
)
from faultscope.models import (
    DetectionConfig,
    IdentificationConfig,
    IdentificationMethod,
    ThresholdMode,
)
from faultscope.posterior import PredictiveSummary

FLAG_FORMAT = "%d"


@dataclass(frozen=True, slots=True)
class IdentificationFrame:
    t: int
    scores: tuple[float, ...]
    flags: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.scores) != len(self.flags):
            raise ValueError("scores and flags must have equal length")


class PropagationEntry(NamedTuple):
    variable: int
    t: int


@dataclass(frozen=True, slots=True, eq=False)
class VarThresholds:
    """Upper thresholds per variable, plus lower ones for the two-sided deviation rule."""

    method: IdentificationMethod
    mode: ThresholdMode
    upper: FloatArray
    lower: FloatArray | None = None

    def __post_init__(self) -> None:
        upper = np.array(self.upper, dtype=np.float64, copy=True)
        if upper.ndim != 1:
            raise ValueError("thresholds must be one value per variable")
        upper.setflags(write=False)
        object.__setattr__(self, "upper", upper)
        if self.lower is not None:
            lower = np.array(self.lower, dtype=np.float64, copy=True)
            if lower.shape != upper.shape:
                raise ValueError("lower and upper thresholds must have equal length")
            if np.any(upper < lower):
                raise ValueError("upper thresholds must not lie below lower thresholds")
            lower.setflags(write=False)
            object.__setattr__(self, "lower", lower)

    @property
    def n_vars(self) -> int:
        return int(self.upper.size)

    def flags(self, scores: npt.ArrayLike) -> BoolArray:
        values = np.asarray(scores, dtype=np.float64)
        if values.shape[-1] != self.n_vars:
            raise ValueError(
                f"dimension mismatch: {values.shape[-1]} scores for {self.n_vars} thresholds"
            )
        flagged = values > self.upper
        if self.lower is not None:
            flagged = flagged | (values < self.lower)
        return np.asarray(flagged, dtype=np.bool_)


def deviation_scores(x: npt.ArrayLike, summary: PredictiveSummary) -> FloatArray:
    """Signed standardized deviation (x − μ)/σ of every variable."""
    observation = as_vector(x, "x")
    if observation.shape != summary.mean.shape:
        raise ValueError("dimension mismatch between observation and predictive summary")
    return (observation - summary.mean) / summary.std


def ldr_per_variable(
    x: npt.ArrayLike,
    samples: npt.ArrayLike,
    k_min: int = 10,
    k_max: int = 20,
    eps_dist: float = DEFAULT_EPS_DIST,
) -> FloatArray:
    observation = as_vector(x, "x")
    draws = as_matrix(samples, "samples")
    if draws.shape[1] != observation.size:
        raise ValueError("dimension mismatch between observation and samples")
    return np.array(
        [
            ldr(observation[column], draws[:, column], k_min, k_max, eps_dist)
            for column in range(observation.size)
        ],
        dtype=np.float64,
    )


def identification_scores(
    x: npt.ArrayLike,
    summary: PredictiveSummary,
    config: IdentificationConfig,
    detection: DetectionConfig,
) -> FloatArray:
    if config.method is IdentificationMethod.DEVIATION:
        return deviation_scores(x, summary)
    return ldr_per_variable(
        x, summary.samples, detection.k_min, detection.k_max, detection.eps_dist
    )


def calibrate_var_thresholds(
    validation_scores: npt.ArrayLike,
    alpha: float,
    method: IdentificationMethod = IdentificationMethod.DEVIATION,
    mode: ThresholdMode = ThresholdMode.TWO_SIDED,
) -> VarThresholds:
    """Nearest-rank per-variable (or pooled) thresholds from NOC validation scores."""
    scores = as_matrix(validation_scores, "validation scores")
    if not 0.0 < alpha < 1.0:
        raise ValueError("α_id must lie in (0, 1)")
    needed = math.ceil(round(1.0 / alpha, 9))
    if scores.shape[0] < needed:
        raise ValueError(
            f"insufficient validation frames: {scores.shape[0]} < ceil(1/α_id) = {needed}"
        )
    n_vars = scores.shape[1]

    if mode is ThresholdMode.GLOBAL:
        pooled = np.abs(scores) if method is IdentificationMethod.DEVIATION else scores
        level = percentile_nearest_rank(pooled, 1.0 - alpha)
        upper = np.full(n_vars, level)
        lower = -upper if method is IdentificationMethod.DEVIATION else None
        return VarThresholds(method=method, mode=mode, upper=upper, lower=lower)

    if method is IdentificationMethod.DEVIATION and mode is ThresholdMode.TWO_SIDED:
        return VarThresholds(
            method=method,
            mode=mode,
            upper=column_percentiles(scores, 1.0 - alpha / 2.0),
            lower=column_percentiles(scores, alpha / 2.0),
        )
    return VarThresholds(
        method=method,
        mode=ThresholdMode.ONE_SIDED,
        upper=column_percentiles(scores, 1.0 - alpha),
    )


def build_frames(
    times: Sequence[int], scores: npt.ArrayLike, thresholds: VarThresholds
) -> list[IdentificationFrame]:
    grid = as_matrix(scores, "scores")
    flags = thresholds.flags(grid)
    return [
        IdentificationFrame(
            t=int(t),
            scores=tuple(float(value) for value in row),
            flags=tuple(bool(flag) for flag in flag_row),
        )
        for t, row, flag_row in zip(times, grid, flags, strict=True)
    ]


def propagation_order(frames: Sequence[IdentificationFrame]) -> list[PropagationEntry]:
    """Variables ordered by the time they first cross their threshold; ties by index."""
    first_crossing: dict[int, int] = {}
    for frame in frames:
        for variable, flagged in enumerate(frame.flags):
            if flagged and variable not in first_crossing:
                first_crossing[variable] = frame.t
    return [
        PropagationEntry(variable=variable, t=t)
        for variable, t in sorted(first_crossing.items(), key=lambda item: (item[1], item[0]))
    ]


def rank_variables(scores: npt.ArrayLike) -> list[int]:
    """Variable indices by descending |score|, ties by index."""
    magnitude = np.abs(as_vector(scores, "scores"))
    return [int(index) for index in np.argsort(-magnitude, kind="stable")]


def flags_path_for(path: str | Path) -> Path:
    target = Path(path)
    return target.with_name(f"{target.stem}_flags{target.suffix or '.csv'}")


def export_idplot(
    frames: Sequence[IdentificationFrame], path: str | Path, names: Sequence[str]
) -> tuple[Path, Path]:
    """Variables × time score grid plus a 0/1 companion grid of flags."""
    if not frames:
        raise ValueError("identification plot needs at least one frame")
    columns = [str(frame.t) for frame in frames]
    scores = np.array([frame.scores for frame in frames], dtype=np.float64).T
    flags = np.array([frame.flags for frame in frames], dtype=np.float64).T
    if scores.shape[0] != len(names):
        raise ValueError(f"{scores.shape[0]} score rows for {len(names)} variable names")
    grid_path = write_grid_csv(path, names, columns, scores)
    flag_path = write_grid_csv(flags_path_for(path), names, columns, flags, fmt=FLAG_FORMAT)
    return grid_path, flag_path
