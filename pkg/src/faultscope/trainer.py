"""Mini-batch BPTT training with per-subsequence dropout masks and Adam updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import TypedDict

import numpy as np

from faultscope.data import NormalizationStats, TimeSeriesDataset
from faultscope.errors import DivergenceError, NumericalError
from faultscope.linalg import FloatArray, derive_seed, make_rng
from faultscope.models import TrainConfig
from faultscope.posterior import gaussian_log_likelihood, iter_predictions, model_tau
from faultscope.rnn import (
    Activation,
    Gradients,
    RnnModel,
    RnnParams,
    bptt_batch,
    full_mask,
    init_params,
    sample_mask,
    step_batch,
)

LOGGER = logging.getLogger("faultscope.trainer")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class TrainReportPayload(TypedDict):
    train_loss: list[float]
    train_mse: list[float]
    validation_log_likelihood: list[float]
    selected_epoch: int
    initial_mse: float
    tau: float


@dataclass(frozen=True, slots=True)
class TrainReport:
    train_loss: tuple[float, ...]
    train_mse: tuple[float, ...]
    validation_log_likelihood: tuple[float, ...]
    selected_epoch: int
    initial_mse: float
    tau: float

    @property
    def best_log_likelihood(self) -> float:
        return self.validation_log_likelihood[self.selected_epoch]

    def to_payload(self) -> TrainReportPayload:
        return {
            "train_loss": list(self.train_loss),
            "train_mse": list(self.train_mse),
            "validation_log_likelihood": list(self.validation_log_likelihood),
            "selected_epoch": self.selected_epoch,
            "initial_mse": self.initial_mse,
            "tau": self.tau,
        }


def make_subsequences(
    ds: TimeSeriesDataset, length: int
) -> list[tuple[FloatArray, FloatArray]]:
    """Non-overlapping one-step-ahead windows; a trailing short remainder is dropped."""
    if length < 1:
        raise ValueError("subsequence length must be positive")
    if ds.n_rows < length + 1:
        raise ValueError(
            f"dataset too short: {ds.n_rows} rows cannot hold a subsequence of length {length}"
        )
    windows: list[tuple[FloatArray, FloatArray]] = []
    for start in range(0, (ds.n_rows - 1) // length * length, length):
        windows.append(
            (ds.values[start : start + length], ds.values[start + 1 : start + length + 1])
        )
    return windows


def clip_gradients(grads: Gradients, max_norm: float) -> tuple[Gradients, float]:
    if not max_norm > 0.0:
        raise ValueError("grad_clip must be positive")
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


class _Adam:
    def __init__(self, params: RnnParams, learning_rate: float) -> None:
        self._learning_rate = learning_rate
        self._first = [np.zeros_like(array) for array in params.arrays()]
        self._second = [np.zeros_like(array) for array in params.arrays()]
        self._steps = 0

    def update(self, params: RnnParams, grads: Gradients) -> RnnParams:
        self._steps += 1
        correction1 = 1.0 - ADAM_BETA1**self._steps
        correction2 = 1.0 - ADAM_BETA2**self._steps
        updated: list[FloatArray] = []
        for index, (value, grad) in enumerate(zip(params.arrays(), grads.arrays(), strict=True)):
            self._first[index] = ADAM_BETA1 * self._first[index] + (1.0 - ADAM_BETA1) * grad
            self._second[index] = ADAM_BETA2 * self._second[index] + (1.0 - ADAM_BETA2) * grad**2
            first_hat = self._first[index] / correction1
            second_hat = self._second[index] / correction2
            updated.append(
                value - self._learning_rate * first_hat / (np.sqrt(second_hat) + ADAM_EPSILON)
            )
        return params.with_arrays(updated)


def sequence_mse(params: RnnParams, inputs: FloatArray, targets: FloatArray) -> float:
    """Maskless mean over windows and steps of the squared one-step residual norm."""
    n_windows, n_steps, _ = inputs.shape
    masks = [full_mask(params.m_x, params.m_s)] * n_windows
    states = np.zeros((n_windows, params.m_s))
    total = 0.0
    for t in range(n_steps):
        states, outputs = step_batch(params, masks, inputs[:, t, :], states)
        total += float(np.sum((outputs - targets[:, t, :]) ** 2))
    return total / (n_windows * n_steps)


def validation_log_likelihood(
    model: RnnModel, val_ds: TimeSeriesDataset, n_samples: int, seed: int
) -> float:
    """Sum over steps of the log MC predictive density of each next observation."""
    if n_samples < 2:
        raise ValueError("validation likelihood needs N ≥ 2 samples")
    tau = model_tau(model)
    if not tau > 0.0:
        raise ValueError("τ must be positive")
    total = 0.0
    for t, summary in enumerate(iter_predictions(model, val_ds.values, n_samples, seed)):
        total += gaussian_log_likelihood(val_ds.values[t + 1], summary.samples, tau)
    return total


def _check_fingerprints(
    train_ds: TimeSeriesDataset, val_ds: TimeSeriesDataset, stats: NormalizationStats
) -> None:
    expected = stats.fingerprint()
    for label, ds in (("training", train_ds), ("validation", val_ds)):
        if ds.stats_fingerprint is None:
            raise ValueError(f"{label} data is not normalized")
        if ds.stats_fingerprint != expected:
            raise ValueError(f"{label} data was normalized with different statistics")


def train(
    train_ds: TimeSeriesDataset,
    val_ds: TimeSeriesDataset,
    m_s: int,
    activation: Activation | str,
    cfg: TrainConfig,
    stats: NormalizationStats,
) -> tuple[RnnModel, TrainReport]:
    _check_fingerprints(train_ds, val_ds, stats)
    if cfg.subsequence_len > train_ds.n_rows:
        raise ValueError("subsequence_len exceeds the training block length")
    seed = 0 if cfg.seed is None else cfg.seed
    params = init_params(train_ds.n_vars, m_s, activation, derive_seed(seed, "init"))
    model = RnnModel(
        params=params,
        p_d=cfg.dropout,
        l2_lambda=cfg.l2_lambda,
        length_scale=cfg.length_scale,
        n_train=train_ds.n_rows,
        stats=stats,
        tau_override=cfg.tau,
    )
    tau = model_tau(model)

    windows = make_subsequences(train_ds, cfg.subsequence_len)
    inputs = np.stack([window[0] for window in windows])
    targets = np.stack([window[1] for window in windows])
    mask_rng = make_rng(derive_seed(seed, "masks"))
    validation_seed = derive_seed(seed, "validation")
    optimizer = _Adam(params, cfg.learning_rate)
    initial_mse = sequence_mse(params, inputs, targets)

    losses: list[float] = []
    mses: list[float] = []
    likelihoods: list[float] = []
    best_params = params
    best_epoch = 0
    for epoch in range(cfg.epochs):
        order = mask_rng.permutation(len(windows))
        weighted_loss = 0.0
        for start in range(0, len(windows), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            masks = [
                sample_mask(params.m_x, params.m_s, cfg.dropout, mask_rng) for _ in batch
            ]
            try:
                loss, grads = bptt_batch(
                    params, masks, inputs[batch], targets[batch], cfg.l2_lambda
                )
            except NumericalError as exc:
                raise DivergenceError(epoch) from exc
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            clipped, _ = clip_gradients(grads, cfg.grad_clip)
            params = optimizer.update(params, clipped)
            weighted_loss += loss * len(batch)

        try:
            mse = sequence_mse(params, inputs, targets)
            likelihood = validation_log_likelihood(
                model.with_params(params), val_ds, cfg.validation_samples, validation_seed
            )
        except NumericalError as exc:
            raise DivergenceError(epoch) from exc
        losses.append(weighted_loss / len(windows))
        mses.append(mse)
        likelihoods.append(likelihood)
        if likelihood > likelihoods[best_epoch] or epoch == 0:
            best_epoch = epoch
            best_params = params
        LOGGER.info(
            "train_epoch %s",
            json.dumps(
                {
                    "epoch": epoch,
                    "train_loss": losses[-1],
                    "train_mse": mse,
                    "validation_log_likelihood": likelihood,
                },
                sort_keys=True,
            ),
        )

    report = TrainReport(
        train_loss=tuple(losses),
        train_mse=tuple(mses),
        validation_log_likelihood=tuple(likelihoods),
        selected_epoch=best_epoch,
        initial_mse=initial_mse,
        tau=tau,
    )
    LOGGER.info(
        "train_selected %s",
        json.dumps(
            {"selected_epoch": best_epoch, "validation_log_likelihood": likelihoods[best_epoch]},
            sort_keys=True,
        ),
    )
    return model.with_params(best_params), report
