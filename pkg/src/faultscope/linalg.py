"""Dense linear algebra, seeding and percentile helpers shared by every module."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
from scipy import linalg as sla

from faultscope.errors import NumericalError

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

LOGGER = logging.getLogger("faultscope.linalg")

SYMMETRY_TOLERANCE = 1e-10
MAX_RIDGE = 1e-2
_FIRST_RIDGE = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the bit stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).hexdigest()
    return int(digest[:16], 16)


def as_matrix(values: npt.ArrayLike, name: str = "matrix") -> FloatArray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {array.shape}")
    return array


def as_vector(values: npt.ArrayLike, name: str = "vector") -> FloatArray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {array.shape}")
    return array


def ensure_finite(values: npt.NDArray[np.float64], what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


def check_symmetric(matrix: FloatArray, name: str = "matrix") -> None:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    if float(np.max(np.abs(matrix - matrix.T), initial=0.0)) > SYMMETRY_TOLERANCE * scale:
        raise ValueError(f"{name} is not symmetric")


def orient_columns(vectors: FloatArray) -> FloatArray:
    """Flip each column so its largest-magnitude entry is positive (first index wins ties)."""
    oriented = vectors.copy()
    for column in range(oriented.shape[1]):
        pivot = int(np.argmax(np.abs(oriented[:, column])))
        if oriented[pivot, column] < 0.0:
            oriented[:, column] = -oriented[:, column]
    return oriented


def sym_eig(matrix: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    """Eigenvalues in descending order with orthonormal, sign-normalized eigenvectors."""
    symmetric = as_matrix(matrix, "S")
    check_symmetric(symmetric, "S")
    try:
        eigenvalues, eigenvectors = sla.eigh(symmetric)
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"symmetric eigensolver failed: {exc}") from exc
    order = np.argsort(eigenvalues, kind="stable")[::-1]
    return (
        np.asarray(eigenvalues[order], dtype=np.float64),
        orient_columns(np.asarray(eigenvectors[:, order], dtype=np.float64)),
    )


def spd_solve(
    matrix: npt.ArrayLike,
    rhs: npt.ArrayLike,
    ridge: float = 0.0,
    max_ridge: float = MAX_RIDGE,
) -> FloatArray:
    """Solve (S + ridge·I) x = b by Cholesky, escalating the ridge tenfold on failure."""
    symmetric = as_matrix(matrix, "S")
    check_symmetric(symmetric, "S")
    b = np.asarray(rhs, dtype=np.float64)
    if b.shape[0] != symmetric.shape[0]:
        raise ValueError(
            f"dimension mismatch: S is {symmetric.shape[0]}x{symmetric.shape[0]}, "
            f"b has {b.shape[0]} rows"
        )
    if ridge < 0.0:
        raise ValueError("ridge must be nonnegative")
    identity = np.eye(symmetric.shape[0])
    current = float(ridge)
    while True:
        try:
            factor = sla.cho_factor(symmetric + current * identity, lower=True)
            solution = sla.cho_solve(factor, b)
        except sla.LinAlgError:
            solution = None
        if solution is not None and np.all(np.isfinite(solution)):
            if current != ridge:
                LOGGER.debug(
                    "ridge_escalated %s",
                    json.dumps({"requested": ridge, "used": current}, sort_keys=True),
                )
            return np.asarray(solution, dtype=np.float64)
        current = current * 10.0 if current > 0.0 else _FIRST_RIDGE
        if current > max_ridge * (1.0 + 1e-9):
            raise NumericalError(
                f"Cholesky factorization failed after ridge escalation to {max_ridge:g}"
            )


def nearest_rank_index(n: int, q: float) -> int:
    """Zero-based position of the ceil(q·n)-th order statistic."""
    rank = math.ceil(round(q * n, 9))
    return min(n, max(1, rank)) - 1


def percentile_nearest_rank(values: Sequence[float] | FloatArray, q: float) -> float:
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size == 0:
        raise ValueError("percentile of an empty sample is undefined")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie strictly between 0 and 1")
    ordered = np.sort(data, kind="stable")
    return float(ordered[nearest_rank_index(int(ordered.size), q)])


def column_percentiles(values: FloatArray, q: float) -> FloatArray:
    """percentile_nearest_rank applied to every column."""
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("column percentiles need a nonempty 2-dimensional sample")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie strictly between 0 and 1")
    ordered = np.sort(values, axis=0, kind="stable")
    return np.asarray(ordered[nearest_rank_index(int(values.shape[0]), q)], dtype=np.float64)
