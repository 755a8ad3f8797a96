from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from faultscope.errors import NumericalError
from faultscope.linalg import (
    column_percentiles,
    derive_seed,
    make_rng,
    percentile_nearest_rank,
    spd_solve,
    sym_eig,
)


def _sort_oracle(values: np.ndarray, q: float) -> float:
    ordered = sorted(values.tolist())
    return float(ordered[math.ceil(q * len(ordered)) - 1])


def test_sym_eig_diagonal_returns_descending_axis_vectors() -> None:
    eigenvalues, eigenvectors = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert eigenvalues.tolist() == [3.0, 2.0, 1.0]
    np.testing.assert_allclose(np.abs(eigenvectors), np.eye(3)[:, [0, 2, 1]], atol=1e-12)


def test_sym_eig_reconstructs_and_matches_characteristic_roots() -> None:
    rng = make_rng(11)
    raw = rng.normal(size=(5, 5))
    matrix = 0.5 * (raw + raw.T)
    eigenvalues, eigenvectors = sym_eig(matrix)
    np.testing.assert_allclose(
        eigenvectors @ np.diag(eigenvalues) @ eigenvectors.T, matrix, atol=1e-8
    )
    np.testing.assert_allclose(eigenvectors.T @ eigenvectors, np.eye(5), atol=1e-10)
    roots = np.sort(np.real(np.roots(np.poly(matrix))))[::-1]
    np.testing.assert_allclose(eigenvalues, roots, atol=1e-6)
    residual = matrix @ eigenvectors - eigenvectors * eigenvalues
    assert float(np.max(np.linalg.norm(residual, axis=0))) < 1e-8 * np.linalg.norm(matrix)


def test_sym_eig_sign_convention_is_deterministic() -> None:
    matrix = np.array([[2.0, -1.0], [-1.0, 2.0]])
    _, first = sym_eig(matrix)
    _, second = sym_eig(matrix.copy())
    assert np.array_equal(first, second)
    for column in range(2):
        pivot = int(np.argmax(np.abs(first[:, column])))
        assert first[pivot, column] > 0.0


def test_sym_eig_rejects_asymmetric_input() -> None:
    with pytest.raises(ValueError, match="not symmetric"):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_spd_solve_identity_and_two_by_two_cofactor() -> None:
    b = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(spd_solve(np.eye(3), b), b, rtol=0, atol=1e-15)

    a, c, d = 4.0, 1.0, 3.0
    matrix = np.array([[a, c], [c, d]])
    rhs = np.array([1.0, 2.0])
    inverse = np.array([[d, -c], [-c, a]]) / (a * d - c * c)
    np.testing.assert_allclose(spd_solve(matrix, rhs), inverse @ rhs, rtol=1e-12)


def test_spd_solve_residual_on_well_conditioned_system() -> None:
    rng = make_rng(3)
    raw = rng.normal(size=(8, 8))
    matrix = raw @ raw.T + 8.0 * np.eye(8)
    rhs = rng.normal(size=8)
    solution = spd_solve(matrix, rhs)
    assert np.linalg.norm(matrix @ solution - rhs) < 1e-10 * np.linalg.norm(rhs)


def test_spd_solve_escalates_ridge_on_indefinite_matrix(
    caplog: pytest.LogCaptureFixture,
) -> None:
    with caplog.at_level(logging.DEBUG, logger="faultscope.linalg"):
        solution = spd_solve(np.diag([1.0, -1e-9]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(solution, [1.0, 0.0], rtol=1e-7, atol=1e-12)
    assert any("ridge_escalated" in record.getMessage() for record in caplog.records)


def test_spd_solve_fails_after_ridge_cap() -> None:
    with pytest.raises(NumericalError, match="ridge escalation"):
        spd_solve(-np.eye(2), np.array([1.0, 1.0]))


def test_spd_solve_validates_dimensions() -> None:
    with pytest.raises(ValueError, match="dimension mismatch"):
        spd_solve(np.eye(3), np.ones(2))


def test_percentile_examples() -> None:
    assert percentile_nearest_rank(np.arange(1, 101, dtype=float), 0.95) == 95.0
    for q in (0.01, 0.5, 0.99):
        assert percentile_nearest_rank([7.5], q) == 7.5
    with pytest.raises(ValueError, match="empty"):
        percentile_nearest_rank([], 0.5)
    with pytest.raises(ValueError):
        percentile_nearest_rank([1.0, 2.0], 1.0)


def test_percentile_matches_sort_oracle() -> None:
    rng = make_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        values = rng.normal(size=n)
        q = float(rng.uniform(0.01, 0.99))
        assert percentile_nearest_rank(values, q) == _sort_oracle(values, q)


def test_column_percentiles_apply_per_column() -> None:
    values = np.column_stack([np.arange(1, 101, dtype=float), -np.arange(1, 101, dtype=float)])
    assert column_percentiles(values, 0.95).tolist() == [95.0, -6.0]


def test_rng_and_derived_seeds_are_reproducible() -> None:
    assert np.array_equal(make_rng(5).random(8), make_rng(5).random(8))
    assert derive_seed(5, "plant") == derive_seed(5, "plant")
    assert derive_seed(5, "plant") != derive_seed(5, "train")
    assert 0 <= derive_seed(5, "plant") < 2**64
