"""Time-series datasets: CSV contract, normalization and contiguous splits."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from faultscope.errors import DatasetFormatError
from faultscope.linalg import FloatArray

LOGGER = logging.getLogger("faultscope.data")

SCALE_FLOOR = 1e-8
FLOAT_FORMAT = "%.17g"


def _frozen(values: npt.ArrayLike) -> FloatArray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, slots=True, eq=False)
class TimeSeriesDataset:
    values: FloatArray
    names: tuple[str, ...]
    sample_period: float = 1.0
    stats_fingerprint: str | None = None

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim != 2:
            raise ValueError(f"dataset values must be a T×m matrix, got shape {values.shape}")
        n_rows, n_cols = values.shape
        if n_rows < 2 or n_cols < 1:
            raise ValueError(f"dataset needs at least 2 rows and 1 column, got {n_rows}×{n_cols}")
        if not np.all(np.isfinite(values)):
            row, col = (int(index) for index in np.argwhere(~np.isfinite(values))[0])
            raise ValueError(f"non-finite value at row {row + 1}, column {col + 1}")
        names = tuple(str(name) for name in self.names)
        if len(names) != n_cols:
            raise ValueError(f"expected {n_cols} variable names, got {len(names)}")
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"duplicate variable name: {duplicates[0]}")
        if not self.sample_period > 0.0:
            raise ValueError("sample_period must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_vars(self) -> int:
        return int(self.values.shape[1])

    def rows(self, start: int, stop: int) -> TimeSeriesDataset:
        return TimeSeriesDataset(
            values=self.values[start:stop],
            names=self.names,
            sample_period=self.sample_period,
            stats_fingerprint=self.stats_fingerprint,
        )

    def equals(self, other: TimeSeriesDataset) -> bool:
        return (
            self.names == other.names
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )


@dataclass(frozen=True, slots=True, eq=False)
class NormalizationStats:
    names: tuple[str, ...]
    mean: FloatArray
    scale: FloatArray
    floored: tuple[str, ...] = ()
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        mean = _frozen(self.mean)
        scale = _frozen(self.scale)
        if mean.shape != scale.shape or mean.ndim != 1 or mean.size != len(self.names):
            raise ValueError("normalization mean, scale and names must have equal length")
        if not np.all(scale > 0.0):
            raise ValueError("normalization scale must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_vars(self) -> int:
        return int(self.mean.size)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update("\x1f".join(self.names).encode("utf-8"))
        digest.update(self.mean.tobytes())
        digest.update(self.scale.tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class SplitSpec:
    train_fraction: float
    validation_fraction: float
    contiguous: bool = True

    def __post_init__(self) -> None:
        for label, value in (
            ("train_fraction", self.train_fraction),
            ("validation_fraction", self.validation_fraction),
        ):
            if not 0.0 < value < 1.0:
                raise ValueError(f"{label} must lie in (0, 1)")
        if self.train_fraction + self.validation_fraction >= 1.0:
            raise ValueError("train_fraction + validation_fraction must be below 1")
        if not self.contiguous:
            raise ValueError("time-series splits are contiguous; shuffled splits are not supported")


def load_csv(path: str | Path, sample_period: float = 1.0) -> TimeSeriesDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"empty file: {path}")

    names = [name.strip() for name in lines[0].split(",")]
    if any(not name for name in names):
        raise DatasetFormatError("empty variable name in header")
    seen: set[str] = set()
    for name in names:
        if name in seen:
            raise DatasetFormatError(f"duplicate variable name: {name}")
        seen.add(name)

    rows: list[list[float]] = []
    for row_number, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != len(names):
            raise DatasetFormatError(
                f"ragged row at row {row_number}: expected {len(names)} fields, found {len(cells)}"
            )
        parsed: list[float] = []
        for name, cell in zip(names, cells, strict=True):
            try:
                value = float(cell)
            except ValueError:
                raise DatasetFormatError(
                    f"non-numeric cell at row {row_number}, column {name}"
                ) from None
            if not math.isfinite(value):
                raise DatasetFormatError(f"non-finite cell at row {row_number}, column {name}")
            parsed.append(value)
        rows.append(parsed)

    if len(rows) < 2:
        raise DatasetFormatError(f"dataset needs at least 2 data rows, found {len(rows)}")
    return TimeSeriesDataset(values=np.array(rows), names=tuple(names), sample_period=sample_period)


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write through a temporary file in the target directory, then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(
        dir=target.parent, prefix=f".{target.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as stream:
            stream.write(text)
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise
    return target


def format_table(
    header: Sequence[str], values: FloatArray, fmt: str | Sequence[str] = FLOAT_FORMAT
) -> str:
    buffer = io.StringIO()
    np.savetxt(
        buffer,
        np.atleast_2d(values),
        fmt=fmt,
        delimiter=",",
        header=",".join(header),
        comments="",
        newline="\n",
    )
    return buffer.getvalue()


def write_csv(ds: TimeSeriesDataset, path: str | Path) -> Path:
    return atomic_write_text(path, format_table(ds.names, ds.values))


def write_grid_csv(
    path: str | Path,
    row_labels: Sequence[str],
    column_labels: Sequence[str],
    grid: FloatArray,
    fmt: str = FLOAT_FORMAT,
    corner: str = "variable",
) -> Path:
    """Variables-by-time grid: header row of column labels, first column of row labels."""
    if grid.shape != (len(row_labels), len(column_labels)):
        raise ValueError(
            f"grid shape {grid.shape} does not match "
            f"{len(row_labels)} rows × {len(column_labels)} columns"
        )
    lines = [",".join([corner, *column_labels])]
    for label, row in zip(row_labels, grid, strict=True):
        lines.append(",".join([label, *(fmt % value for value in row)]))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid_csv(path: str | Path) -> tuple[list[str], list[str], FloatArray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"empty file: {path}")
    column_labels = lines[0].split(",")[1:]
    row_labels: list[str] = []
    rows: list[list[float]] = []
    for line in lines[1:]:
        label, *cells = line.split(",")
        row_labels.append(label)
        rows.append([float(cell) for cell in cells])
    return row_labels, column_labels, np.array(rows, dtype=np.float64).reshape(
        len(row_labels), len(column_labels)
    )


def fit_normalizer(ds: TimeSeriesDataset) -> NormalizationStats:
    mean = ds.values.mean(axis=0)
    scale = ds.values.std(axis=0, ddof=1)
    floored_mask = scale < SCALE_FLOOR
    floored = tuple(name for name, low in zip(ds.names, floored_mask, strict=True) if low)
    warnings: tuple[str, ...] = ()
    if floored:
        scale = np.where(floored_mask, SCALE_FLOOR, scale)
        warnings = tuple(f"scale_floored:{name}" for name in floored)
        LOGGER.warning(
            "normalizer_floored_columns %s",
            json.dumps({"columns": list(floored), "floor": SCALE_FLOOR}, sort_keys=True),
        )
    return NormalizationStats(
        names=ds.names, mean=mean, scale=scale, floored=floored, warnings=warnings
    )


def _check_dimensions(ds: TimeSeriesDataset, stats: NormalizationStats) -> None:
    if ds.n_vars != stats.n_vars:
        raise ValueError(
            f"dimension mismatch: dataset has {ds.n_vars} variables, stats have {stats.n_vars}"
        )


def normalize(ds: TimeSeriesDataset, stats: NormalizationStats) -> TimeSeriesDataset:
    _check_dimensions(ds, stats)
    return TimeSeriesDataset(
        values=(ds.values - stats.mean) / stats.scale,
        names=ds.names,
        sample_period=ds.sample_period,
        stats_fingerprint=stats.fingerprint(),
    )


def denormalize(ds: TimeSeriesDataset, stats: NormalizationStats) -> TimeSeriesDataset:
    _check_dimensions(ds, stats)
    return TimeSeriesDataset(
        values=ds.values * stats.scale + stats.mean,
        names=ds.names,
        sample_period=ds.sample_period,
    )


def split_sizes(n_rows: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = math.floor(round(n_rows * spec.train_fraction, 9))
    n_validation = math.floor(round(n_rows * spec.validation_fraction, 9))
    return n_train, n_validation, n_rows - n_train - n_validation


def split(
    ds: TimeSeriesDataset, spec: SplitSpec
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    sizes = split_sizes(ds.n_rows, spec)
    for label, size in zip(("train", "validation", "test"), sizes, strict=True):
        if size == 0:
            raise ValueError(f"split produces an empty {label} block")
        if size < 2:
            raise ValueError(f"split produces a {label} block with fewer than 2 rows")
    n_train, n_validation, _ = sizes
    boundary = n_train + n_validation
    return ds.rows(0, n_train), ds.rows(n_train, boundary), ds.rows(boundary, ds.n_rows)
