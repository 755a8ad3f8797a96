"""Logging setup and stage timing for Faultscope commands."""

from __future__ import annotations

import json
import logging
import sys
from collections import defaultdict
from collections.abc import Iterator
from contextlib import contextmanager
from statistics import mean
from threading import RLock
from time import perf_counter
from typing import TextIO, TypedDict

from faultscope.settings import Settings, log_level_number

LOGGER = logging.getLogger("faultscope.observability")
ROOT_LOGGER_NAME = "faultscope"
_HANDLER_MARK = "_faultscope_handler"


class StageSummary(TypedDict):
    count: int
    avg_ms: float
    max_ms: float


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
            },
            sort_keys=True,
        )


def configure_logging(settings: Settings, stream: TextIO | None = None) -> logging.Logger:
    """Install one stream handler on the package logger; repeated calls replace it."""
    logger = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in list(logger.handlers):
        if getattr(handler, _HANDLER_MARK, False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    setattr(handler, _HANDLER_MARK, True)
    if settings.log_json:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(log_level_number(settings))
    return logger


class StageTimings:
    def __init__(self) -> None:
        self._lock = RLock()
        self._latencies: dict[str, list[float]] = defaultdict(list)

    def record(self, stage: str, timing_ms: float) -> None:
        with self._lock:
            self._latencies[stage].append(timing_ms)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start_time = perf_counter()
        try:
            yield
        finally:
            self.record(name, duration_ms(start_time))

    def snapshot(self) -> dict[str, StageSummary]:
        with self._lock:
            return {
                stage: {
                    "count": len(values),
                    "avg_ms": round(mean(values), 2),
                    "max_ms": round(max(values), 2),
                }
                for stage, values in self._latencies.items()
                if values
            }

    def log(self, command: str) -> None:
        LOGGER.info(
            "stage_timing %s",
            json.dumps({"command": command, "stages": self.snapshot()}, sort_keys=True),
        )


def duration_ms(start_time: float) -> float:
    return (perf_counter() - start_time) * 1000.0
