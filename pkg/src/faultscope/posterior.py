"""Monte-Carlo predictive posterior from N frozen-mask realizations of a trained model."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from faultscope.errors import NumericalError
from faultscope.linalg import FloatArray, as_matrix, as_vector, make_rng
from faultscope.rnn import DropoutMask, RnnModel, RnnState, sample_mask, step_batch

LOGGER = logging.getLogger("faultscope.posterior")

DEFAULT_SAMPLES = 400


def compute_tau(p_d: float, length_scale: float, n_train: int, l2_lambda: float) -> float:
    """Observation-noise precision p·l²/(2·N·λ) implied by the dropout prior."""
    if p_d <= 0.0 or l2_lambda <= 0.0:
        raise ValueError("τ undefined/degenerate; supply explicit noise precision")
    if length_scale <= 0.0:
        raise ValueError("prior length scale must be positive")
    if n_train < 1:
        raise ValueError("N_train must be at least 1")
    return p_d * length_scale**2 / (2.0 * n_train * l2_lambda)


def model_tau(model: RnnModel) -> float:
    if model.tau_override is not None:
        return model.tau_override
    return compute_tau(model.p_d, model.length_scale, model.n_train, model.l2_lambda)


@dataclass(frozen=True, slots=True, eq=False)
class PredictiveSummary:
    samples: FloatArray
    mean: FloatArray
    cov: FloatArray
    std: FloatArray
    tau: float

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])


def summarize(samples: npt.ArrayLike, tau: float) -> PredictiveSummary:
    """Sample moments (divide-by-N) with τ⁻¹ added on the covariance diagonal."""
    draws = as_matrix(samples, "samples")
    if draws.shape[0] < 1:
        raise ValueError("at least one sample is required")
    if not tau > 0.0:
        raise ValueError("τ must be positive")
    mean = draws.mean(axis=0)
    constant = np.min(draws, axis=0) == np.max(draws, axis=0)
    mean = np.where(constant, draws[0], mean)
    centered = draws - mean
    cov = centered.T @ centered / draws.shape[0] + np.eye(draws.shape[1]) / tau
    cov = 0.5 * (cov + cov.T)
    std = np.sqrt(np.diag(cov))
    frozen = [np.array(a, copy=True) for a in (draws, mean, cov, std)]
    for array in frozen:
        array.setflags(write=False)
    return PredictiveSummary(
        samples=frozen[0], mean=frozen[1], cov=frozen[2], std=frozen[3], tau=tau
    )


def predictive_band(summary: PredictiveSummary, z: float = 2.0) -> tuple[FloatArray, FloatArray]:
    if z < 0.0:
        raise ValueError("band width z must be nonnegative")
    return summary.mean - z * summary.std, summary.mean + z * summary.std


@dataclass(slots=True, eq=False)
class EnsembleState:
    masks: tuple[DropoutMask, ...]
    states: FloatArray
    steps: int = 0
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.masks)

    def realization(self, index: int) -> RnnState:
        return RnnState(self.states[index])


def init_ensemble(model: RnnModel, n_samples: int, seed: int) -> EnsembleState:
    if n_samples < 2:
        raise ValueError("ensemble needs N ≥ 2 realizations")
    rng = make_rng(seed)
    params = model.params
    masks = tuple(sample_mask(params.m_x, params.m_s, model.p_d, rng) for _ in range(n_samples))
    LOGGER.debug(
        "ensemble_initialized %s",
        json.dumps(
            {
                "n_samples": n_samples,
                "distinct_masks": len({mask.key() for mask in masks}),
                "seed": seed,
            },
            sort_keys=True,
        ),
    )
    return EnsembleState(
        masks=masks, states=np.zeros((n_samples, params.m_s)), steps=0, seed=seed
    )


def step(ensemble: EnsembleState, model: RnnModel, x_t: npt.ArrayLike) -> PredictiveSummary:
    """Feed the observed x_t to every realization and summarize the predictions for t+1."""
    x = as_vector(x_t, "x_t")
    if x.shape != (model.params.m_x,):
        raise ValueError(
            f"dimension mismatch: x_t has {x.size} entries, model expects {model.params.m_x}"
        )
    states, outputs = step_batch(model.params, ensemble.masks, x, ensemble.states)
    ensemble.states = states
    ensemble.steps += 1
    return summarize(outputs, model_tau(model))


def iter_predictions(
    model: RnnModel, values: FloatArray, n_samples: int, seed: int
) -> Iterator[PredictiveSummary]:
    """Yield the predictive summary for rows 1..T−1 of a normalized series, in order."""
    series = as_matrix(values, "values")
    if series.shape[0] < 2:
        raise ValueError("a series needs at least 2 rows to produce a prediction")
    ensemble = init_ensemble(model, n_samples, seed)
    for t in range(series.shape[0] - 1):
        try:
            yield step(ensemble, model, series[t])
        except NumericalError as exc:
            raise NumericalError(f"{exc} while predicting row {t + 1}") from exc


def run_ensemble(
    model: RnnModel, values: FloatArray, n_samples: int, seed: int
) -> list[PredictiveSummary]:
    return list(iter_predictions(model, values, n_samples, seed))


def gaussian_log_likelihood(target: FloatArray, samples: FloatArray, tau: float) -> float:
    """log[(1/N) Σ_i N(target | sample_i, τ⁻¹I)] computed with log-sum-exp."""
    if not tau > 0.0:
        raise ValueError("τ must be positive")
    n_samples, n_vars = samples.shape
    squared = np.sum((samples - target) ** 2, axis=1)
    log_terms = 0.5 * n_vars * math.log(tau / (2.0 * math.pi)) - 0.5 * tau * squared
    return float(logsumexp(log_terms)) - math.log(n_samples)
