"""Elman recurrent cell with frozen variational dropout masks and exact BPTT gradients."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from scipy.special import expit

from faultscope.data import NormalizationStats
from faultscope.errors import NumericalError
from faultscope.linalg import BoolArray, FloatArray, as_matrix, as_vector, make_rng


class Activation(StrEnum):
    LINEAR = "linear"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"


def _apply(activation: Activation, preact: FloatArray) -> FloatArray:
    if activation is Activation.LINEAR:
        return preact.copy()
    if activation is Activation.SIGMOID:
        return np.asarray(expit(preact), dtype=np.float64)
    if activation is Activation.TANH:
        return np.tanh(preact)
    return np.maximum(preact, 0.0)


def _derivative(activation: Activation, preact: FloatArray, state: FloatArray) -> FloatArray:
    if activation is Activation.LINEAR:
        return np.ones_like(preact)
    if activation is Activation.SIGMOID:
        return state * (1.0 - state)
    if activation is Activation.TANH:
        return 1.0 - state * state
    return (preact > 0.0).astype(np.float64)


def _readonly(values: FloatArray) -> FloatArray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, slots=True, eq=False)
class RnnParams:
    w_s: FloatArray
    u_s: FloatArray
    b_s: FloatArray
    w_y: FloatArray
    b_y: FloatArray
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        w_s = _readonly(as_matrix(self.w_s, "W_s"))
        u_s = _readonly(as_matrix(self.u_s, "U_s"))
        b_s = _readonly(as_vector(self.b_s, "b_s"))
        w_y = _readonly(as_matrix(self.w_y, "W_y"))
        b_y = _readonly(as_vector(self.b_y, "b_y"))
        m_s = w_s.shape[0]
        if u_s.shape != (m_s, m_s) or b_s.shape != (m_s,):
            raise ValueError(f"recurrent parameters must match hidden size {m_s}")
        if w_y.shape[1] != m_s or b_y.shape != (w_y.shape[0],):
            raise ValueError("output parameters do not match the hidden size")
        for name, array in (("W_s", w_s), ("U_s", u_s), ("b_s", b_s), ("W_y", w_y), ("b_y", b_y)):
            if not np.all(np.isfinite(array)):
                raise ValueError(f"non-finite entries in {name}")
        object.__setattr__(self, "w_s", w_s)
        object.__setattr__(self, "u_s", u_s)
        object.__setattr__(self, "b_s", b_s)
        object.__setattr__(self, "w_y", w_y)
        object.__setattr__(self, "b_y", b_y)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def m_x(self) -> int:
        return int(self.w_s.shape[1])

    @property
    def m_s(self) -> int:
        return int(self.w_s.shape[0])

    @property
    def m_y(self) -> int:
        return int(self.w_y.shape[0])

    def arrays(self) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
        return self.w_s, self.u_s, self.b_s, self.w_y, self.b_y

    def with_arrays(self, arrays: Sequence[FloatArray]) -> RnnParams:
        w_s, u_s, b_s, w_y, b_y = arrays
        return RnnParams(w_s=w_s, u_s=u_s, b_s=b_s, w_y=w_y, b_y=b_y, activation=self.activation)

    def equals(self, other: RnnParams) -> bool:
        return self.activation == other.activation and all(
            a.shape == b.shape and bool(np.array_equal(a, b))
            for a, b in zip(self.arrays(), other.arrays(), strict=True)
        )


@dataclass(frozen=True, slots=True, eq=False)
class Gradients:
    dw_s: FloatArray
    du_s: FloatArray
    db_s: FloatArray
    dw_y: FloatArray
    db_y: FloatArray

    def arrays(self) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
        return self.dw_s, self.du_s, self.db_s, self.dw_y, self.db_y

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(array * array)) for array in self.arrays()))

    def scaled(self, factor: float) -> Gradients:
        return Gradients(*(array * factor for array in self.arrays()))


@dataclass(frozen=True, slots=True, eq=False)
class DropoutMask:
    """Input, recurrent and output keep-masks; one instance serves every step of a sequence."""

    z_in: BoolArray
    z_rec: BoolArray
    z_out: BoolArray
    p_d: float

    def __post_init__(self) -> None:
        for name in ("z_in", "z_rec", "z_out"):
            array = np.array(getattr(self, name), dtype=np.bool_, copy=True)
            if array.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if self.z_rec.shape != self.z_out.shape:
            raise ValueError("recurrent and output masks must both have length m_s")
        _check_dropout(self.p_d)

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.p_d)

    def key(self) -> bytes:
        return np.concatenate([self.z_in, self.z_rec, self.z_out]).tobytes()


@dataclass(frozen=True, slots=True, eq=False)
class RnnState:
    s: FloatArray

    def __post_init__(self) -> None:
        state = _readonly(as_vector(self.s, "state"))
        if not np.all(np.isfinite(state)):
            raise NumericalError("non-finite recurrent state")
        object.__setattr__(self, "s", state)

    @classmethod
    def zeros(cls, m_s: int) -> RnnState:
        return cls(np.zeros(m_s))


@dataclass(frozen=True, slots=True, eq=False)
class RnnModel:
    """Trained parameters together with the hyperparameters the predictive posterior needs."""

    params: RnnParams
    p_d: float
    l2_lambda: float
    length_scale: float
    n_train: int
    stats: NormalizationStats
    tau_override: float | None = None

    def __post_init__(self) -> None:
        _check_dropout(self.p_d)
        if self.stats.n_vars != self.params.m_x:
            raise ValueError(
                f"normalization stats cover {self.stats.n_vars} variables, model expects "
                f"{self.params.m_x}"
            )
        if self.tau_override is not None and not self.tau_override > 0.0:
            raise ValueError("explicit noise precision must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return self.stats.names

    def with_params(self, params: RnnParams) -> RnnModel:
        return replace(self, params=params)


def _check_dropout(p_d: float) -> None:
    if p_d >= 1.0:
        raise ValueError("degenerate dropout: all units dropped")
    if p_d < 0.0 or not math.isfinite(p_d):
        raise ValueError("dropout probability must lie in [0, 1)")


def init_params(
    m_x: int, m_s: int, activation: Activation | str, seed: int, m_y: int | None = None
) -> RnnParams:
    if m_x < 1 or m_s < 1:
        raise ValueError("m_x and m_s must be positive")
    m_y = m_x if m_y is None else m_y
    rng = make_rng(seed)

    def glorot(rows: int, cols: int) -> FloatArray:
        bound = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    return RnnParams(
        w_s=glorot(m_s, m_x),
        u_s=glorot(m_s, m_s),
        b_s=np.zeros(m_s),
        w_y=glorot(m_y, m_s),
        b_y=np.zeros(m_y),
        activation=Activation(activation),
    )


def sample_mask(m_x: int, m_s: int, p_d: float, rng: np.random.Generator) -> DropoutMask:
    _check_dropout(p_d)
    return DropoutMask(
        z_in=rng.random(m_x) >= p_d,
        z_rec=rng.random(m_s) >= p_d,
        z_out=rng.random(m_s) >= p_d,
        p_d=p_d,
    )


def full_mask(m_x: int, m_s: int) -> DropoutMask:
    """Keep-everything mask: the deterministic network."""
    return DropoutMask(
        z_in=np.ones(m_x, dtype=np.bool_),
        z_rec=np.ones(m_s, dtype=np.bool_),
        z_out=np.ones(m_s, dtype=np.bool_),
        p_d=0.0,
    )


@dataclass(frozen=True, slots=True)
class _ScaledMasks:
    z_in: FloatArray
    z_rec: FloatArray
    z_out: FloatArray


def _stack(params: RnnParams, masks: Sequence[DropoutMask]) -> _ScaledMasks:
    if not masks:
        raise ValueError("at least one mask is required")
    for mask in masks:
        if mask.z_in.shape != (params.m_x,) or mask.z_rec.shape != (params.m_s,):
            raise ValueError(
                f"mask dimensions ({mask.z_in.size}, {mask.z_rec.size}) do not match "
                f"model ({params.m_x}, {params.m_s})"
            )
    scale = np.array([[mask.scale] for mask in masks])
    return _ScaledMasks(
        z_in=scale * np.stack([mask.z_in for mask in masks]),
        z_rec=scale * np.stack([mask.z_rec for mask in masks]),
        z_out=scale * np.stack([mask.z_out for mask in masks]),
    )


def _advance(
    params: RnnParams, masks: _ScaledMasks, x_t: FloatArray, s_prev: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    preact = (masks.z_in * x_t) @ params.w_s.T + (masks.z_rec * s_prev) @ params.u_s.T + params.b_s
    with np.errstate(over="ignore", invalid="ignore"):
        state = _apply(params.activation, preact)
    output = (masks.z_out * state) @ params.w_y.T + params.b_y
    return preact, state, output


def step_batch(
    params: RnnParams,
    masks: Sequence[DropoutMask],
    x_t: FloatArray,
    states: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    """Advance B realizations by one step; realization b uses masks[b] and states[b]."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] != params.m_x:
        raise ValueError(
            f"dimension mismatch: x_t has {x.shape[-1]} entries, model expects {params.m_x}"
        )
    if states.shape != (len(masks), params.m_s):
        raise ValueError(f"states must have shape ({len(masks)}, {params.m_s})")
    _, state, output = _advance(params, _stack(params, masks), x, states)
    bad = ~np.all(np.isfinite(output), axis=1) | ~np.all(np.isfinite(state), axis=1)
    if np.any(bad):
        raise NumericalError(
            f"non-finite result in realization {int(np.argmax(bad))} (exploding state)"
        )
    return state, output


def forward_step(
    params: RnnParams, mask: DropoutMask, x_t: FloatArray, s_prev: RnnState
) -> tuple[RnnState, FloatArray]:
    x = as_vector(x_t, "x_t")
    if s_prev.s.shape != (params.m_s,):
        raise ValueError(
            f"dimension mismatch: state has {s_prev.s.size} entries, expected {params.m_s}"
        )
    state, output = step_batch(params, [mask], x, s_prev.s[np.newaxis, :])
    return RnnState(state[0]), output[0]


def predict_sequence(
    params: RnnParams, inputs: FloatArray, mask: DropoutMask | None = None
) -> FloatArray:
    """One-step-ahead outputs for every row of `inputs`, starting from the zero state."""
    x = as_matrix(inputs, "inputs")
    used = full_mask(params.m_x, params.m_s) if mask is None else mask
    outputs = np.empty((x.shape[0], params.m_y))
    state = np.zeros((1, params.m_s))
    for t in range(x.shape[0]):
        state, output = step_batch(params, [used], x[t], state)
        outputs[t] = output[0]
    return outputs


def regularizer(params: RnnParams) -> float:
    return float(np.sum(params.w_s**2) + np.sum(params.w_y**2) + np.sum(params.u_s**2))


def bptt_batch(
    params: RnnParams,
    masks: Sequence[DropoutMask],
    inputs: FloatArray,
    targets: FloatArray,
    l2_lambda: float,
) -> tuple[float, Gradients]:
    """Mean over B sequences of the regularized one-step MSE objective and its exact gradient.

    inputs: B×T×m_x, targets: B×T×m_y, sequence b is unrolled with masks[b] at every step.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y_true = np.asarray(targets, dtype=np.float64)
    if x.ndim != 3 or y_true.ndim != 3:
        raise ValueError("batched inputs and targets must be B×T×m arrays")
    n_batch, n_steps, _ = x.shape
    if n_steps == 0:
        raise ValueError("empty sequence")
    if len(masks) != n_batch or y_true.shape[:2] != (n_batch, n_steps):
        raise ValueError("masks, inputs and targets disagree on batch size or length")
    if x.shape[2] != params.m_x or y_true.shape[2] != params.m_y:
        raise ValueError("dimension mismatch between sequence and model")
    if l2_lambda < 0.0:
        raise ValueError("λ must be nonnegative")

    scaled = _stack(params, masks)
    preacts = np.empty((n_steps, n_batch, params.m_s))
    states = np.empty((n_steps + 1, n_batch, params.m_s))
    states[0] = 0.0
    residuals = np.empty((n_steps, n_batch, params.m_y))
    for t in range(n_steps):
        preact, state, output = _advance(params, scaled, x[:, t, :], states[t])
        if not (np.all(np.isfinite(state)) and np.all(np.isfinite(output))):
            raise NumericalError(f"non-finite result at step {t} (exploding state)")
        preacts[t] = preact
        states[t + 1] = state
        residuals[t] = output - y_true[:, t, :]

    normalizer = 1.0 / (n_steps * n_batch)
    loss = normalizer * float(np.sum(residuals**2)) + l2_lambda * regularizer(params)

    dw_s = np.zeros_like(params.w_s)
    du_s = np.zeros_like(params.u_s)
    db_s = np.zeros_like(params.b_s)
    dw_y = np.zeros_like(params.w_y)
    db_y = np.zeros_like(params.b_y)
    carry = np.zeros((n_batch, params.m_s))
    for t in range(n_steps - 1, -1, -1):
        d_out = 2.0 * normalizer * residuals[t]
        dw_y += d_out.T @ (scaled.z_out * states[t + 1])
        db_y += d_out.sum(axis=0)
        d_state = scaled.z_out * (d_out @ params.w_y) + carry
        d_pre = d_state * _derivative(params.activation, preacts[t], states[t + 1])
        dw_s += d_pre.T @ (scaled.z_in * x[:, t, :])
        du_s += d_pre.T @ (scaled.z_rec * states[t])
        db_s += d_pre.sum(axis=0)
        carry = scaled.z_rec * (d_pre @ params.u_s)

    gradients = Gradients(
        dw_s=dw_s + 2.0 * l2_lambda * params.w_s,
        du_s=du_s + 2.0 * l2_lambda * params.u_s,
        db_s=db_s,
        dw_y=dw_y + 2.0 * l2_lambda * params.w_y,
        db_y=db_y,
    )
    if not (math.isfinite(loss) and all(np.all(np.isfinite(a)) for a in gradients.arrays())):
        raise NumericalError("non-finite loss or gradient")
    return loss, gradients


def bptt_gradients(
    params: RnnParams,
    mask: DropoutMask,
    inputs: FloatArray,
    targets: FloatArray,
    l2_lambda: float,
) -> tuple[float, Gradients]:
    x = np.asarray(inputs, dtype=np.float64)
    y_true = np.asarray(targets, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("empty sequence")
    return bptt_batch(params, [mask], x[np.newaxis], y_true[np.newaxis], l2_lambda)
