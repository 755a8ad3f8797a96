"""Comparison tables over monitor and baseline run summaries."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any, TypedDict

from faultscope.data import atomic_write_text
from faultscope.errors import DatasetFormatError

MISSING = "n/a"
SUMMARY_NAME = "summary.json"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
_COLUMNS = ("method", "scenario", "far", "fdr", "detection_delay")


class ReportRow(TypedDict):
    method: str
    scenario: str
    far: float | None
    fdr: float | None
    detection_delay: int | None
    propagation_order: list[dict[str, Any]]
    source: str


def find_summaries(run_dirs: Sequence[str | Path]) -> list[Path]:
    found: list[Path] = []
    for run_dir in run_dirs:
        root = Path(run_dir)
        if root.is_file() and root.name == SUMMARY_NAME:
            found.append(root)
            continue
        if not root.is_dir():
            raise FileNotFoundError(f"run directory not found: {root}")
        found.extend(sorted(root.rglob(SUMMARY_NAME)))
    if not found:
        raise ValueError("no summary.json found under the given run directories")
    return found


def load_rows(paths: Sequence[Path]) -> list[ReportRow]:
    rows: list[ReportRow] = []
    seen: dict[tuple[str, str], Path] = {}
    for path in paths:
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            row: ReportRow = {
                "method": str(payload["method"]),
                "scenario": str(payload["scenario"]),
                "far": payload.get("far"),
                "fdr": payload.get("fdr"),
                "detection_delay": payload.get("detection_delay"),
                "propagation_order": list(payload.get("propagation_order", [])),
                "source": str(path),
            }
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"malformed run summary {path}: {exc}") from exc
        key = (row["method"], row["scenario"])
        if key in seen:
            raise ValueError(
                f"duplicate result for method {key[0]} on scenario {key[1]}: "
                f"{seen[key]} and {path}"
            )
        seen[key] = path
        rows.append(row)
    rows.sort(key=lambda item: (item["scenario"], item["method"]))
    return rows


def _cell(value: float | int | None, fmt: str) -> str:
    if value is None:
        return MISSING
    if isinstance(value, int):
        return str(value)
    return format(value, fmt)


def render_csv(rows: Sequence[ReportRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["method"],
                row["scenario"],
                _cell(row["far"], ".17g"),
                _cell(row["fdr"], ".17g"),
                _cell(row["detection_delay"], "d"),
            ]
        )
    return buffer.getvalue()


def render_text(rows: Sequence[ReportRow]) -> str:
    table = [list(_COLUMNS)]
    for row in rows:
        table.append(
            [
                row["method"],
                row["scenario"],
                _cell(row["far"], ".4f"),
                _cell(row["fdr"], ".4f"),
                _cell(row["detection_delay"], "d"),
            ]
        )
    widths = [max(len(line[column]) for line in table) for column in range(len(_COLUMNS))]
    lines = ["Fault detection results", ""]
    for index, line in enumerate(table):
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(line, widths, strict=True)))
        if index == 0:
            lines.append("  ".join("-" * width for width in widths))

    lines.extend(["", "Propagation order", ""])
    listed = [row for row in rows if row["propagation_order"]]
    if not listed:
        lines.append(MISSING)
    for row in listed:
        lines.append(f"{row['method']} / {row['scenario']}:")
        ordered = sorted(row["propagation_order"], key=lambda entry: int(entry["t"]))
        for rank, entry in enumerate(ordered, start=1):
            lines.append(f"  {rank}. {entry['variable']} t={entry['t']}")
    return "\n".join(lines).rstrip() + "\n"


def write_report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> tuple[Path, Path]:
    rows = load_rows(find_summaries(run_dirs))
    target = Path(out_dir)
    csv_path = atomic_write_text(target / REPORT_CSV, render_csv(rows))
    text_path = atomic_write_text(target / REPORT_TXT, render_text(rows))
    return csv_path, text_path
