"""PCA and dynamic PCA monitoring baselines with T²/Q statistics and contributions."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt

from faultscope.data import TimeSeriesDataset, fit_normalizer
from faultscope.detection import calibrate_threshold, far
from faultscope.errors import NumericalError
from faultscope.linalg import (
    BoolArray,
    FloatArray,
    column_percentiles,
    make_rng,
    percentile_nearest_rank,
    sym_eig,
)
from faultscope.models import BaselineConfig, BaselineVariant

LOGGER = logging.getLogger("faultscope.baselines")

EIGENVALUE_FLOOR = 1e-12
FAR_TOLERANCE = 0.0025
MAX_BISECTIONS = 64
Q_INACTIVE_NOTE = "Q statistic inactive (a=m)"


@dataclass(frozen=True, slots=True, eq=False)
class PcaModel:
    names: tuple[str, ...]
    mean: FloatArray
    scale: FloatArray
    loadings: FloatArray
    eigenvalues: FloatArray
    lag: int = 0
    base_names: tuple[str, ...] = ()

    @property
    def a(self) -> int:
        return int(self.loadings.shape[1])

    @property
    def width(self) -> int:
        return int(self.mean.size)

    @property
    def is_full(self) -> bool:
        return self.a == self.width


@dataclass(frozen=True, slots=True, eq=False)
class BaselineResult:
    variant: BaselineVariant
    a: int
    lag: int
    width: int
    t2_threshold: float
    q_threshold: float | None
    scale_factor: float
    validation_far: float
    t2: FloatArray
    q: FloatArray
    alarms: BoolArray
    t2_contributions: FloatArray
    q_contributions: FloatArray
    notes: tuple[str, ...] = ()


def dpca_augment(ds: TimeSeriesDataset, lag: int) -> TimeSeriesDataset:
    """Rows [x_t, x_{t−1}, …, x_{t−lag}] for t ≥ lag; lag 0 returns the input unchanged."""
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    if lag == 0:
        return ds
    if lag >= ds.n_rows:
        raise ValueError(f"lag {lag} must be below the series length {ds.n_rows}")
    blocks = [ds.values[lag - shift : ds.n_rows - shift] for shift in range(lag + 1)]
    names = tuple(f"{name}_lag{shift}" for shift in range(lag + 1) for name in ds.names)
    return TimeSeriesDataset(
        values=np.hstack(blocks), names=names, sample_period=ds.sample_period
    )


def fit_pca(ds: TimeSeriesDataset, lag: int = 0, base_names: tuple[str, ...] = ()) -> PcaModel:
    """z-score, then eigendecompose the sample covariance; keeps every positive-variance PC."""
    if ds.n_rows < ds.n_vars + 1:
        LOGGER.warning(
            "pca_underdetermined %s",
            json.dumps({"rows": ds.n_rows, "width": ds.n_vars}, sort_keys=True),
        )
    stats = fit_normalizer(ds)
    z = (ds.values - stats.mean) / stats.scale
    cov = z.T @ z / (ds.n_rows - 1)
    cov = 0.5 * (cov + cov.T)
    eigenvalues, eigenvectors = sym_eig(cov)
    keep = int(np.count_nonzero(eigenvalues > EIGENVALUE_FLOOR * max(1.0, float(eigenvalues[0]))))
    if keep == 0:
        raise NumericalError("covariance has no positive eigenvalue")
    return PcaModel(
        names=ds.names,
        mean=stats.mean,
        scale=stats.scale,
        loadings=eigenvectors[:, :keep],
        eigenvalues=eigenvalues[:keep],
        lag=lag,
        base_names=base_names or ds.names,
    )


def fit_dpca(ds: TimeSeriesDataset, lag: int) -> PcaModel:
    return fit_pca(dpca_augment(ds, lag), lag=lag, base_names=ds.names)


def truncate(model: PcaModel, a: int) -> PcaModel:
    if not 1 <= a <= model.a:
        raise ValueError(f"cannot keep {a} of {model.a} principal components")
    return replace(model, loadings=model.loadings[:, :a], eigenvalues=model.eigenvalues[:a])


def parallel_analysis(
    ds: TimeSeriesDataset, n_draws: int = 50, quantile: float = 0.95, seed: int = 0
) -> int:
    """Leading eigenvalues that beat the `quantile` of column-permuted null eigenvalues."""
    if n_draws < 10:
        raise ValueError("parallel analysis needs at least 10 permutation draws")
    model = fit_pca(ds)
    stats = fit_normalizer(ds)
    z = (ds.values - stats.mean) / stats.scale
    rng = make_rng(seed)
    null = np.empty((n_draws, ds.n_vars))
    for draw in range(n_draws):
        permuted = rng.permuted(z, axis=0)
        cov = permuted.T @ permuted / (ds.n_rows - 1)
        null[draw], _ = sym_eig(0.5 * (cov + cov.T))
    cutoffs = column_percentiles(null, quantile)
    retained = 0
    for observed, cutoff in zip(model.eigenvalues, cutoffs, strict=False):
        if observed <= cutoff:
            break
        retained += 1
    if retained == 0:
        LOGGER.warning(
            "parallel_analysis_floor %s",
            json.dumps({"retained": 0, "floor": 1}, sort_keys=True),
        )
        retained = 1
    return retained


def _check_width(values: FloatArray, model: PcaModel) -> None:
    if values.shape[-1] != model.width:
        raise ValueError(
            f"width mismatch: observation has {values.shape[-1]} entries, model expects "
            f"{model.width}"
        )


def _decompose(values: FloatArray, model: PcaModel) -> tuple[FloatArray, FloatArray, FloatArray]:
    _check_width(values, model)
    z = (values - model.mean) / model.scale
    scores = z @ model.loadings
    residual = z - scores @ model.loadings.T
    return z, scores, residual


def score(model: PcaModel, values: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    """T² and Q for every row of `values`."""
    rows = np.atleast_2d(np.asarray(values, dtype=np.float64))
    _, scores, residual = _decompose(rows, model)
    t2 = np.sum(scores**2 / model.eigenvalues, axis=1)
    q = np.sum(residual**2, axis=1)
    return t2, q


def t2_statistic(x: npt.ArrayLike, model: PcaModel) -> float:
    return float(score(model, x)[0][0])


def q_statistic(x: npt.ArrayLike, model: PcaModel) -> float:
    return float(score(model, x)[1][0])


def _fold(values: FloatArray, model: PcaModel) -> FloatArray:
    n_base = len(model.base_names)
    if model.lag == 0 or values.shape[-1] == n_base:
        return values
    blocks = values.reshape(*values.shape[:-1], model.lag + 1, n_base)
    return np.asarray(blocks.sum(axis=-2), dtype=np.float64)


def contributions_batch(model: PcaModel, values: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    rows = np.atleast_2d(np.asarray(values, dtype=np.float64))
    z, scores, residual = _decompose(rows, model)
    weighted = (scores / model.eigenvalues) @ model.loadings.T
    t2_parts = np.maximum(weighted * z, 0.0)
    q_parts = residual**2
    return _fold(t2_parts, model), _fold(q_parts, model)


def contributions(x: npt.ArrayLike, model: PcaModel) -> tuple[FloatArray, FloatArray]:
    """Per-variable T² (clipped at zero) and Q contributions, lag copies folded by summation."""
    t2_parts, q_parts = contributions_batch(model, x)
    return t2_parts[0], q_parts[0]


def _joint_scale(
    t2: FloatArray, q: FloatArray, t2_base: float, q_base: float, alpha: float
) -> tuple[float, float]:
    if t2_base <= 0.0 or q_base <= 0.0:
        raise NumericalError("baseline thresholds must be positive for joint scaling")
    low = 0.0
    high = max(float(np.max(t2)) / t2_base, float(np.max(q)) / q_base)
    for _ in range(MAX_BISECTIONS):
        middle = 0.5 * (low + high)
        rate = far((t2 > middle * t2_base) | (q > middle * q_base))
        if abs(rate - alpha) <= FAR_TOLERANCE:
            return middle, rate
        if rate > alpha:
            low = middle
        else:
            high = middle
    raise NumericalError(
        f"joint T²/Q threshold bisection did not converge in {MAX_BISECTIONS} iterations"
    )


def calibrate_and_monitor(
    model: PcaModel,
    val_ds: TimeSeriesDataset,
    test_ds: TimeSeriesDataset,
    alpha: float,
    variant: BaselineVariant | None = None,
) -> BaselineResult:
    """Thresholds from validation data, then alarms and contributions on the test data."""
    val_rows = dpca_augment(val_ds, model.lag).values
    test_rows = dpca_augment(test_ds, model.lag).values
    val_t2, val_q = score(model, val_rows)
    t2, q = score(model, test_rows)
    t2_contrib, q_contrib = contributions_batch(model, test_rows)
    notes: list[str] = []

    if model.is_full:
        t2_threshold = calibrate_threshold(val_t2, alpha)
        q_threshold: float | None = None
        factor = 1.0
        validation_far = far(val_t2 > t2_threshold)
        alarms = t2 > t2_threshold
        notes.append(Q_INACTIVE_NOTE)
    else:
        t2_base = percentile_nearest_rank(val_t2, 1.0 - alpha)
        q_base = percentile_nearest_rank(val_q, 1.0 - alpha)
        factor, validation_far = _joint_scale(val_t2, val_q, t2_base, q_base, alpha)
        t2_threshold = factor * t2_base
        q_threshold = factor * q_base
        alarms = (t2 > t2_threshold) | (q > q_threshold)

    resolved = variant or _variant_for(model)
    LOGGER.info(
        "baseline_calibrated %s",
        json.dumps(
            {
                "variant": resolved.value,
                "a": model.a,
                "lag": model.lag,
                "width": model.width,
                "t2_threshold": t2_threshold,
                "q_threshold": q_threshold,
                "validation_far": validation_far,
                "notes": notes,
            },
            sort_keys=True,
        ),
    )
    return BaselineResult(
        variant=resolved,
        a=model.a,
        lag=model.lag,
        width=model.width,
        t2_threshold=t2_threshold,
        q_threshold=q_threshold,
        scale_factor=factor,
        validation_far=validation_far,
        t2=t2,
        q=q,
        alarms=np.asarray(alarms, dtype=np.bool_),
        t2_contributions=t2_contrib,
        q_contributions=q_contrib,
        notes=tuple(notes),
    )


def _variant_for(model: PcaModel) -> BaselineVariant:
    if model.lag == 0:
        return BaselineVariant.F_PCA if model.is_full else BaselineVariant.R_PCA
    return BaselineVariant.F_DPCA if model.is_full else BaselineVariant.R_DPCA


def fit_variant(
    variant: BaselineVariant, train_ds: TimeSeriesDataset, cfg: BaselineConfig, seed: int
) -> PcaModel:
    lag = cfg.lag if variant in {BaselineVariant.R_DPCA, BaselineVariant.F_DPCA} else 0
    augmented = dpca_augment(train_ds, lag)
    model = fit_pca(augmented, lag=lag, base_names=train_ds.names)
    if variant in {BaselineVariant.R_PCA, BaselineVariant.R_DPCA}:
        retained = parallel_analysis(augmented, cfg.n_draws, cfg.quantile, seed)
        model = truncate(model, min(retained, model.a))
    LOGGER.info(
        "baseline_fitted %s",
        json.dumps(
            {"variant": variant.value, "a": model.a, "lag": lag, "augmented_width": model.width},
            sort_keys=True,
        ),
    )
    return model


def run_variant(
    variant: BaselineVariant,
    train_ds: TimeSeriesDataset,
    val_ds: TimeSeriesDataset,
    test_ds: TimeSeriesDataset,
    cfg: BaselineConfig,
    seed: int,
) -> BaselineResult:
    model = fit_variant(variant, train_ds, cfg, seed)
    return calibrate_and_monitor(model, val_ds, test_ds, cfg.alpha, variant=variant)
