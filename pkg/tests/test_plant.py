from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from faultscope.errors import DatasetFormatError
from faultscope.models import FaultKind
from faultscope.plant import (
    SATURATION_LEVEL,
    FaultScenario,
    PlantConfig,
    closed_loop_matrix,
    default_plant,
    default_scenario,
    innovation_std,
    noc_std,
    offset_visibility,
    read_truth_csv,
    simulate,
    spectral_radius,
    truth_path_for,
    write_truth_csv,
)


def _tiny_plant(kp: float, ki: float) -> PlantConfig:
    return PlantConfig(
        a=np.array([[0.5]]),
        b=np.array([[1.0]]),
        c=np.array([[1.0]]),
        controlled=(0,),
        kp=kp,
        ki=ki,
        process_noise_std=0.1,
        sensor_noise_std=0.1,
        u_op=np.array([2.0]),
    )


def test_tiny_plant_closed_loop_roots() -> None:
    plant = _tiny_plant(0.2, 0.2)
    roots = np.sort(np.abs(np.linalg.eigvals(closed_loop_matrix(plant))))
    np.testing.assert_allclose(roots, [0.5, 0.8], atol=1e-12)
    assert plant.setpoints.tolist() == pytest.approx([4.0])


def test_unstable_configuration_is_rejected() -> None:
    with pytest.raises(ValueError, match="unstable configuration"):
        _tiny_plant(0.0, 0.0)
    with pytest.raises(ValueError, match="noise standard deviations"):
        replace(_tiny_plant(0.2, 0.2), sensor_noise_std=0.0)


def test_default_plant_is_reproducible_and_shaped() -> None:
    first = default_plant(3)
    second = default_plant(3)
    for name in ("a", "b", "c", "u_op"):
        assert np.array_equal(getattr(first, name), getattr(second, name))
    assert (first.kp, first.ki) == (second.kp, second.ki)
    assert (first.n_state, first.n_meas, first.n_mv) == (8, 10, 4)
    assert first.n_channels == 14
    assert first.channel_names[:2] == ("y1", "y2")
    assert first.channel_names[-1] == "u4"
    assert 0.5 < spectral_radius(closed_loop_matrix(first)) < 0.98


def test_default_scenarios_target_expected_channels() -> None:
    plant = default_plant(0)
    assert default_scenario(plant, FaultKind.UNCONTROLLABLE).target_channel == 4
    assert default_scenario(plant, FaultKind.CONTROLLABLE).target_channel == plant.n_meas
    recovery = default_scenario(plant, FaultKind.BACK_TO_CONTROL)
    assert plant.n_meas <= recovery.target_channel < plant.n_channels
    assert default_scenario(plant, FaultKind.CONTROLLABLE).magnitude == 1.0


def test_noc_std_matches_long_simulation() -> None:
    plant = default_plant(1)
    run = simulate(plant, FaultScenario(), 6000, seed=4)
    empirical = run.dataset.values.std(axis=0, ddof=1)
    np.testing.assert_allclose(empirical, noc_std(plant), rtol=0.2)


def test_noc_run_is_clean_and_deterministic() -> None:
    plant = default_plant(2)
    first = simulate(plant, FaultScenario(), 500, seed=9)
    second = simulate(plant, FaultScenario(), 500, seed=9)
    other = simulate(plant, FaultScenario(), 500, seed=10)
    assert not first.truth.any()
    assert all(indices == () for indices in first.affected)
    assert float(np.max(np.abs(first.deviation))) < 1e-12
    assert first.dataset.equals(second.dataset)
    assert not first.dataset.equals(other.dataset)
    operating_point = np.concatenate([plant.y_op, plant.u_op])
    np.testing.assert_allclose(
        first.dataset.values.mean(axis=0), operating_point, atol=float(np.max(noc_std(plant)))
    )


def test_uncontrollable_fault_persists_on_its_sensor() -> None:
    plant = default_plant(0)
    scenario = default_scenario(plant, FaultKind.UNCONTROLLABLE, onset=300)
    run = simulate(plant, scenario, 800, seed=1)
    target = scenario.target_channel
    assert not run.truth[:300].any()
    assert run.truth[300:].all()
    assert float(run.deviation[300:, target].mean()) >= 4.0
    assert all(target in indices for indices in run.affected[300:])
    std = noc_std(plant)
    noisy_shift = run.dataset.values[300:, target].mean() - run.dataset.values[:300, target].mean()
    assert noisy_shift / std[target] > 4.0


def test_back_to_control_leaves_mv_offset() -> None:
    plant = default_plant(0)
    scenario = default_scenario(plant, FaultKind.BACK_TO_CONTROL, onset=200)
    run = simulate(plant, scenario, 1200, seed=2)
    tail = run.deviation[-100:]
    assert float(np.max(np.abs(tail[:, : plant.n_meas]))) < 0.5
    assert float(np.min(np.abs(tail[:, scenario.target_channel]))) >= 3.0
    assert not run.truth[:200].any()
    assert run.truth[-100:].all()


def test_controllable_fault_settles_inside_the_band() -> None:
    plant = default_plant(0)
    scenario = default_scenario(plant, FaultKind.CONTROLLABLE, onset=200)
    run = simulate(plant, scenario, 1000, seed=3)
    assert not run.truth[:200].any()
    assert not run.truth[-100:].any()
    assert float(np.max(np.abs(run.deviation[-100:, : plant.n_meas]))) < 0.5


@pytest.mark.parametrize(
    ("kind", "target", "magnitude", "n_steps", "message"),
    [
        (FaultKind.CONTROLLABLE, 10, 2.0, 1000, "limited to 1 NOC std"),
        (FaultKind.CONTROLLABLE, 4, 1.0, 1000, "manipulated-variable channel"),
        (FaultKind.BACK_TO_CONTROL, 10, 2.0, 1000, "at least 3 NOC stds"),
        (FaultKind.UNCONTROLLABLE, 0, 5.0, 1000, "uncontrolled measurement"),
        (FaultKind.UNCONTROLLABLE, 4, 4.0, 1000, "at least 5 NOC stds"),
        (FaultKind.UNCONTROLLABLE, 4, 5.0, 240, "must exceed onset"),
    ],
)
def test_scenario_validation(
    kind: FaultKind, target: int, magnitude: float, n_steps: int, message: str
) -> None:
    scenario = FaultScenario(kind=kind, onset=200, magnitude=magnitude, target_channel=target)
    with pytest.raises(ValueError, match=message):
        simulate(default_plant(0), scenario, n_steps, seed=0)


def test_fault_scenario_invariants() -> None:
    with pytest.raises(ValueError, match="onset"):
        FaultScenario(onset=0)
    with pytest.raises(ValueError, match="finite"):
        FaultScenario(magnitude=float("inf"))


def test_saturation_bounds_recorded_measurements() -> None:
    plant = replace(default_plant(0), saturation=True)
    scenario = FaultScenario(
        kind=FaultKind.UNCONTROLLABLE, onset=100, magnitude=20.0, target_channel=4
    )
    run = simulate(plant, scenario, 300, seed=5)
    level = SATURATION_LEVEL * noc_std(plant)[: plant.n_meas]
    measurements = run.dataset.values[:, : plant.n_meas] - plant.y_op
    assert np.all(np.abs(measurements) <= level + 1e-12)
    assert run.truth[100:].all()


def test_truth_sidecar_round_trip(tmp_path: Path) -> None:
    path = truth_path_for(tmp_path / "run.csv")
    assert path.name == "run_truth.csv"
    truth = np.array([False, True, True])
    affected = ((), (4,), (4, 10))
    write_truth_csv(path, truth, affected)
    assert path.read_text(encoding="utf-8") == "t,truth,affected\n0,0,\n1,1,4\n2,1,4;10\n"
    labels = read_truth_csv(path)
    assert labels.truth.tolist() == [False, True, True]
    assert labels.affected == affected
    assert labels.onset == 1
    assert labels.rows(0, 1).onset is None


def test_truth_sidecar_rejects_malformed_rows(tmp_path: Path) -> None:
    path = tmp_path / "bad_truth.csv"
    path.write_text("t,truth,affected\n0,2,\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError, match="malformed truth row"):
        read_truth_csv(path)
    path.write_text("time,flag\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError, match="header"):
        read_truth_csv(path)


def test_innovation_std_matches_iterated_riccati() -> None:
    plant = default_plant(3)
    q = plant.process_noise_std**2 * np.eye(plant.n_state)
    r = plant.sensor_noise_std**2 * np.eye(plant.n_meas)
    p = q.copy()
    for _ in range(500):
        innovation = plant.c @ p @ plant.c.T + r
        gain = plant.a @ p @ plant.c.T @ np.linalg.inv(innovation)
        p = plant.a @ p @ plant.a.T + q - gain @ innovation @ gain.T
    expected = np.sqrt(np.diag(plant.c @ p @ plant.c.T) + plant.sensor_noise_std**2)
    np.testing.assert_allclose(innovation_std(plant), expected, rtol=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_back_to_control_targets_least_visible_mv(seed: int) -> None:
    plant = default_plant(seed)
    mv_std = noc_std(plant)[plant.n_meas :]
    innovation = innovation_std(plant)
    impulse = plant.c @ plant.b
    visibility = [
        max(abs(impulse[i, j]) * mv_std[j] / innovation[i] for i in range(plant.n_meas))
        for j in range(plant.n_mv)
    ]
    np.testing.assert_allclose(offset_visibility(plant), visibility, rtol=1e-12)
    scenario = default_scenario(plant, FaultKind.BACK_TO_CONTROL)
    assert scenario.target_channel == plant.n_meas + int(np.argmin(visibility))


def test_noc_run_is_weakly_stationary() -> None:
    drifts = []
    for seed in range(16):
        plant = default_plant(seed % 4)
        values = simulate(plant, FaultScenario(), 4000, seed=seed + 10).dataset.values
        first, second = values[:2000].mean(axis=0), values[2000:].mean(axis=0)
        drifts.append(np.abs(first - second) / noc_std(plant))
    assert float(np.max(np.mean(drifts, axis=0))) < 0.2
