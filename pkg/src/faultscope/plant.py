"""Synthetic closed-loop plant with labeled controllable, back-to-control and uncontrollable faults.

The plant runs in deviation variables around an operating point:

    y_k     = C x_k + v_k (+ sensor bias)
    e_k     = -y_k[controlled]
    i_{k+1} = i_k + e_k
    u_k     = K (kp e_k + ki i_{k+1}),  K = (C_c (I - A)^-1 B)^-1
    x_{k+1} = A x_k + B (u_k + d_k) + w_k

Recorded channels are the measurements followed by the manipulated variables, each shifted by
its operating-point value.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from faultscope.data import TimeSeriesDataset, atomic_write_text
from faultscope.errors import DatasetFormatError, NumericalError
from faultscope.linalg import BoolArray, FloatArray, derive_seed, make_rng
from faultscope.models import FaultKind

LOGGER = logging.getLogger("faultscope.plant")

MAX_CLOSED_LOOP_RADIUS = 0.98
MIN_DEFAULT_RADIUS = 0.5
BURN_IN = 200
TRUTH_BAND = 2.0
SATURATION_LEVEL = 4.0
MIN_POST_ONSET = 50
DEFAULT_MAGNITUDE = {
    FaultKind.NONE: 0.0,
    FaultKind.CONTROLLABLE: 1.0,
    FaultKind.BACK_TO_CONTROL: 4.0,
    FaultKind.UNCONTROLLABLE: 5.0,
}
_GAIN_CANDIDATES = tuple(
    (kp, ki) for kp in (0.3, 0.2, 0.1, 0.05, 0.0) for ki in (0.2, 0.1, 0.05, 0.03)
)
_MAX_PLANT_DRAWS = 20


def _frozen(values: FloatArray) -> FloatArray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, slots=True, eq=False)
class PlantConfig:
    a: FloatArray
    b: FloatArray
    c: FloatArray
    controlled: tuple[int, ...]
    kp: float
    ki: float
    process_noise_std: float
    sensor_noise_std: float
    u_op: FloatArray
    saturation: bool = False

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "u_op"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n_state = self.a.shape[0]
        if self.a.shape != (n_state, n_state) or self.b.shape[0] != n_state:
            raise ValueError("A must be square and B must have one row per state")
        if self.c.shape[1] != n_state:
            raise ValueError("C must have one column per state")
        if len(self.controlled) != self.b.shape[1] or self.u_op.shape != (self.b.shape[1],):
            raise ValueError("one controlled measurement and operating value per MV")
        if len(set(self.controlled)) != len(self.controlled) or not all(
            0 <= index < self.c.shape[0] for index in self.controlled
        ):
            raise ValueError("controlled channels must be distinct measurement indices")
        if not (self.process_noise_std > 0.0 and self.sensor_noise_std > 0.0):
            raise ValueError("noise standard deviations must be positive")
        radius = spectral_radius(closed_loop_matrix(self))
        if not radius < MAX_CLOSED_LOOP_RADIUS:
            raise ValueError(
                f"unstable configuration: closed-loop spectral radius {radius:.4f} "
                f"≥ {MAX_CLOSED_LOOP_RADIUS}"
            )

    @property
    def n_state(self) -> int:
        return int(self.a.shape[0])

    @property
    def n_meas(self) -> int:
        return int(self.c.shape[0])

    @property
    def n_mv(self) -> int:
        return int(self.b.shape[1])

    @property
    def n_channels(self) -> int:
        return self.n_meas + self.n_mv

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(f"y{i + 1}" for i in range(self.n_meas)) + tuple(
            f"u{j + 1}" for j in range(self.n_mv)
        )

    @property
    def gain_inverse(self) -> FloatArray:
        return np.asarray(np.linalg.inv(steady_state_gain(self)), dtype=np.float64)

    @property
    def x_op(self) -> FloatArray:
        return np.asarray(
            np.linalg.solve(np.eye(self.n_state) - self.a, self.b @ self.u_op), dtype=np.float64
        )

    @property
    def y_op(self) -> FloatArray:
        return np.asarray(self.c @ self.x_op, dtype=np.float64)

    @property
    def setpoints(self) -> FloatArray:
        return self.y_op[list(self.controlled)]


@dataclass(frozen=True, slots=True)
class FaultScenario:
    kind: FaultKind = FaultKind.NONE
    onset: int = 1000
    magnitude: float = 0.0
    target_channel: int = 0
    recovery_horizon: int = 200

    def __post_init__(self) -> None:
        if self.onset < 1:
            raise ValueError("fault onset must be at least 1")
        if not np.isfinite(self.magnitude):
            raise ValueError("fault magnitude must be finite")
        if self.recovery_horizon < 1:
            raise ValueError("recovery horizon must be positive")


@dataclass(frozen=True, slots=True, eq=False)
class LabeledDataset:
    dataset: TimeSeriesDataset
    truth: BoolArray
    affected: tuple[tuple[int, ...], ...]
    scenario: FaultScenario
    deviation: FloatArray

    @property
    def onset(self) -> int:
        return self.scenario.onset


@dataclass(frozen=True, slots=True, eq=False)
class TruthLabels:
    truth: BoolArray
    affected: tuple[tuple[int, ...], ...]

    @property
    def onset(self) -> int | None:
        hits = np.flatnonzero(self.truth)
        return int(hits[0]) if hits.size else None

    def rows(self, start: int, stop: int) -> TruthLabels:
        return TruthLabels(truth=self.truth[start:stop], affected=self.affected[start:stop])


def steady_state_gain(config: PlantConfig) -> FloatArray:
    """DC gain from the manipulated variables to the controlled measurements."""
    response = np.linalg.solve(np.eye(config.a.shape[0]) - config.a, config.b)
    return np.asarray(config.c[list(config.controlled)] @ response, dtype=np.float64)


def _loop_matrix(
    a: FloatArray, b: FloatArray, c: FloatArray, controlled: tuple[int, ...], kp: float, ki: float
) -> FloatArray:
    c_ctrl = c[list(controlled)]
    gain = np.linalg.inv(c_ctrl @ np.linalg.solve(np.eye(a.shape[0]) - a, b))
    top = np.hstack([a - (kp + ki) * b @ gain @ c_ctrl, ki * b @ gain])
    bottom = np.hstack([-c_ctrl, np.eye(b.shape[1])])
    return np.asarray(np.vstack([top, bottom]), dtype=np.float64)


def closed_loop_matrix(config: PlantConfig) -> FloatArray:
    """Noise-free transition matrix of the stacked [state; integrator] vector."""
    return _loop_matrix(config.a, config.b, config.c, config.controlled, config.kp, config.ki)


def spectral_radius(matrix: FloatArray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def noc_std(config: PlantConfig) -> FloatArray:
    """Stationary standard deviation of every recorded channel under normal operation."""
    n_state, n_mv, n_meas = config.n_state, config.n_mv, config.n_meas
    gain = config.gain_inverse
    total = config.kp + config.ki
    select = np.zeros((n_mv, n_meas))
    select[np.arange(n_mv), list(config.controlled)] = 1.0
    c_ctrl = config.c[list(config.controlled)]

    process_in = np.vstack([np.eye(n_state), np.zeros((n_mv, n_state))])
    sensor_in = np.vstack([-total * config.b @ gain @ select, -select])
    forcing = config.process_noise_std**2 * process_in @ process_in.T
    forcing += config.sensor_noise_std**2 * sensor_in @ sensor_in.T
    covariance = sla.solve_discrete_lyapunov(closed_loop_matrix(config), forcing)

    state_cov = covariance[:n_state, :n_state]
    meas_var = np.diag(config.c @ state_cov @ config.c.T) + config.sensor_noise_std**2
    control_map = np.hstack([-total * gain @ c_ctrl, config.ki * gain])
    control_noise = -total * gain @ select
    mv_var = np.diag(control_map @ covariance @ control_map.T)
    mv_var = mv_var + config.sensor_noise_std**2 * np.diag(control_noise @ control_noise.T)
    return np.sqrt(np.concatenate([meas_var, mv_var]))


def innovation_std(config: PlantConfig) -> FloatArray:
    """One-step prediction error std of every measurement for the steady-state Kalman predictor."""
    q = config.process_noise_std**2 * np.eye(config.n_state)
    r = config.sensor_noise_std**2
    riccati = sla.solve_discrete_are(config.a.T, config.c.T, q, r * np.eye(config.n_meas))
    return np.sqrt(np.diag(config.c @ riccati @ config.c.T) + r)


def offset_visibility(config: PlantConfig) -> FloatArray:
    """Largest one-step measurement shift of a 1-std MV offset, in innovation stds, per MV."""
    shift = np.abs(config.c @ config.b) * noc_std(config)[config.n_meas :]
    return np.max(shift / innovation_std(config)[:, np.newaxis], axis=0)


def _draw_plant(
    rng: np.random.Generator,
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    n_state, n_meas, n_mv = 8, 10, 4
    eigenvalues = rng.uniform(0.3, 0.9, size=n_state)
    eigenvalues[0] = 0.9
    basis, _ = np.linalg.qr(rng.normal(size=(n_state, n_state)))
    a = basis @ np.diag(eigenvalues) @ basis.T
    b = rng.normal(size=(n_state, n_mv))
    c = rng.normal(size=(n_meas, n_state))
    u_op = rng.normal(size=n_mv)
    return 0.5 * (a + a.T), b, c, u_op


def default_plant(seed: int) -> PlantConfig:
    """Reference plant: 8 states, 10 measurements (the first 4 controlled), 4 MVs, PI control."""
    controlled = (0, 1, 2, 3)
    for attempt in range(_MAX_PLANT_DRAWS):
        rng = make_rng(derive_seed(seed, f"plant:{attempt}"))
        a, b, c, u_op = _draw_plant(rng)
        gain = c[list(controlled)] @ np.linalg.solve(np.eye(a.shape[0]) - a, b)
        if np.linalg.cond(gain) > 1e6:
            continue
        best: tuple[float, float, float] | None = None
        for kp, ki in _GAIN_CANDIDATES:
            radius = spectral_radius(_loop_matrix(a, b, c, controlled, kp, ki))
            if MIN_DEFAULT_RADIUS < radius < MAX_CLOSED_LOOP_RADIUS and (
                best is None or radius < best[0]
            ):
                best = (radius, kp, ki)
        if best is None:
            continue
        radius, kp, ki = best
        LOGGER.debug(
            "default_plant %s",
            json.dumps(
                {"attempt": attempt, "kp": kp, "ki": ki, "radius": radius, "seed": seed},
                sort_keys=True,
            ),
        )
        return PlantConfig(
            a=a,
            b=b,
            c=c,
            controlled=controlled,
            kp=kp,
            ki=ki,
            process_noise_std=0.1,
            sensor_noise_std=0.1,
            u_op=u_op,
        )
    raise NumericalError(f"no stabilizing reference plant found for seed {seed}")


def default_scenario(config: PlantConfig, kind: FaultKind, onset: int = 1000) -> FaultScenario:
    """Canonical scenario for one fault kind.

    Sensor faults hit the first uncontrolled measurement and controllable faults the first MV.
    Back-to-control faults hit the MV whose offset is least visible in the next measurements,
    so the controller settles with the offset carried by that MV alone.
    """
    uncontrolled = [i for i in range(config.n_meas) if i not in config.controlled]
    if kind is FaultKind.UNCONTROLLABLE:
        target = uncontrolled[0]
    elif kind is FaultKind.BACK_TO_CONTROL:
        target = config.n_meas + int(np.argmin(offset_visibility(config)))
    else:
        target = config.n_meas
    return FaultScenario(
        kind=kind, onset=onset, magnitude=DEFAULT_MAGNITUDE[kind], target_channel=target
    )


def _validate_scenario(config: PlantConfig, scenario: FaultScenario, n_steps: int) -> None:
    if scenario.kind is FaultKind.NONE:
        return
    if n_steps <= scenario.onset + MIN_POST_ONSET:
        raise ValueError(
            f"T={n_steps} must exceed onset + {MIN_POST_ONSET} = "
            f"{scenario.onset + MIN_POST_ONSET}"
        )
    magnitude = abs(scenario.magnitude)
    target = scenario.target_channel
    if scenario.kind in {FaultKind.CONTROLLABLE, FaultKind.BACK_TO_CONTROL}:
        if not config.n_meas <= target < config.n_channels:
            raise ValueError("input-side faults must target a manipulated-variable channel")
        if scenario.kind is FaultKind.CONTROLLABLE and magnitude > 1.0:
            raise ValueError("controllable faults are limited to 1 NOC std")
        if scenario.kind is FaultKind.BACK_TO_CONTROL:
            if magnitude < 3.0:
                raise ValueError("back-to-control faults need a magnitude of at least 3 NOC stds")
            if n_steps < scenario.onset + scenario.recovery_horizon:
                raise ValueError("T leaves no room for the back-to-control recovery horizon")
    else:
        if not 0 <= target < config.n_meas or target in config.controlled:
            raise ValueError("uncontrollable faults must target an uncontrolled measurement")
        if magnitude < 5.0:
            raise ValueError("uncontrollable faults need a magnitude of at least 5 NOC stds")


def _run(
    config: PlantConfig,
    n_steps: int,
    disturbance: FloatArray,
    bias: FloatArray,
    process_noise: FloatArray,
    sensor_noise: FloatArray,
    onset: int,
) -> tuple[FloatArray, FloatArray]:
    """Deviation trajectories of measurements and MVs for rows 0..n_steps−1 after burn-in."""
    gain = config.gain_inverse
    controlled = list(config.controlled)
    state = np.zeros(config.n_state)
    integral = np.zeros(config.n_mv)
    measurements = np.empty((n_steps, config.n_meas))
    controls = np.empty((n_steps, config.n_mv))
    for k in range(BURN_IN + n_steps):
        t = k - BURN_IN
        active = t >= onset
        measured = config.c @ state + sensor_noise[k] + (bias if active else 0.0)
        error = -measured[controlled]
        integral = integral + error
        control = gain @ (config.kp * error + config.ki * integral)
        if t >= 0:
            measurements[t] = measured
            controls[t] = control
        forcing = control + (disturbance if active else 0.0)
        state = config.a @ state + config.b @ forcing + process_noise[k]
    return measurements, controls


def simulate(
    config: PlantConfig, scenario: FaultScenario, n_steps: int, seed: int
) -> LabeledDataset:
    _validate_scenario(config, scenario, n_steps)
    if n_steps < 2:
        raise ValueError("a simulation needs at least 2 steps")
    std = noc_std(config)
    disturbance = np.zeros(config.n_mv)
    bias = np.zeros(config.n_meas)
    if scenario.kind in {FaultKind.CONTROLLABLE, FaultKind.BACK_TO_CONTROL}:
        mv = scenario.target_channel - config.n_meas
        disturbance[mv] = scenario.magnitude * std[scenario.target_channel]
    elif scenario.kind is FaultKind.UNCONTROLLABLE:
        bias[scenario.target_channel] = scenario.magnitude * std[scenario.target_channel]

    rng = make_rng(seed)
    total = BURN_IN + n_steps
    process_noise = rng.normal(0.0, config.process_noise_std, size=(total, config.n_state))
    sensor_noise = rng.normal(0.0, config.sensor_noise_std, size=(total, config.n_meas))
    measurements, controls = _run(
        config, n_steps, disturbance, bias, process_noise, sensor_noise, scenario.onset
    )
    quiet_state = np.zeros((total, config.n_state))
    quiet_sensor = np.zeros((total, config.n_meas))
    twin_meas, twin_controls = _run(
        config, n_steps, disturbance, bias, quiet_state, quiet_sensor, scenario.onset
    )

    if config.saturation:
        level = SATURATION_LEVEL * std[: config.n_meas]
        measurements = level * np.tanh(measurements / level)
    deviation = np.hstack([twin_meas, twin_controls]) / std
    exceeded = np.abs(deviation) > TRUTH_BAND
    if scenario.kind is not FaultKind.NONE:
        exceeded[: scenario.onset] = False
    truth = np.any(exceeded, axis=1)
    affected = tuple(tuple(int(index) for index in np.flatnonzero(row)) for row in exceeded)

    values = np.hstack([measurements + config.y_op, controls + config.u_op])
    dataset = TimeSeriesDataset(values=values, names=config.channel_names)
    LOGGER.info(
        "plant_simulated %s",
        json.dumps(
            {
                "kind": scenario.kind.value,
                "n_steps": n_steps,
                "onset": scenario.onset,
                "target_channel": scenario.target_channel,
                "truth_rows": int(np.count_nonzero(truth)),
                "seed": seed,
            },
            sort_keys=True,
        ),
    )
    return LabeledDataset(
        dataset=dataset,
        truth=truth,
        affected=affected,
        scenario=scenario,
        deviation=deviation,
    )


def truth_path_for(path: str | Path) -> Path:
    target = Path(path)
    return target.with_name(f"{target.stem}_truth.csv")


def write_truth_csv(
    path: str | Path, truth: BoolArray, affected: tuple[tuple[int, ...], ...]
) -> Path:
    lines = ["t,truth,affected"]
    for t, (flag, indices) in enumerate(zip(truth, affected, strict=True)):
        lines.append(f"{t},{int(bool(flag))},{';'.join(str(index) for index in indices)}")
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_truth_csv(path: str | Path) -> TruthLabels:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "t,truth,affected":
        raise DatasetFormatError(f"truth sidecar {path} must start with header t,truth,affected")
    truth: list[bool] = []
    affected: list[tuple[int, ...]] = []
    for row_number, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != 3 or cells[1] not in {"0", "1"}:
            raise DatasetFormatError(f"malformed truth row at row {row_number}")
        if int(cells[0]) != row_number - 1:
            raise DatasetFormatError(f"truth rows out of order at row {row_number}")
        truth.append(cells[1] == "1")
        affected.append(tuple(int(index) for index in cells[2].split(";") if index))
    return TruthLabels(truth=np.array(truth, dtype=np.bool_), affected=tuple(affected))
