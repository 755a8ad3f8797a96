from __future__ import annotations

import io
import json
import logging
from collections.abc import Iterator

import pytest

from faultscope.observability import ROOT_LOGGER_NAME, StageTimings, configure_logging
from faultscope.settings import Settings


def _settings(log_json: bool, level: str = "INFO") -> Settings:
    return Settings(log_level=level, log_json=log_json, run_acceptance=False)


def _installed(logger: logging.Logger) -> list[logging.Handler]:
    return [handler for handler in logger.handlers if isinstance(handler, logging.StreamHandler)]


@pytest.fixture
def package_logger() -> Iterator[logging.Logger]:
    logger = logging.getLogger(ROOT_LOGGER_NAME)
    original = list(logger.handlers)
    level = logger.level
    yield logger
    logger.handlers = original
    logger.setLevel(level)


def test_configure_logging_replaces_its_own_handler(package_logger: logging.Logger) -> None:
    first = io.StringIO()
    second = io.StringIO()
    configure_logging(_settings(log_json=False), first)
    count = len(_installed(package_logger))
    configure_logging(_settings(log_json=False), second)
    assert len(_installed(package_logger)) == count
    logging.getLogger("faultscope.pipeline").info("calibrated %s", "{}")
    assert first.getvalue() == ""
    assert second.getvalue() == "INFO faultscope.pipeline calibrated {}\n"


def test_json_formatter_emits_one_object_per_record(package_logger: logging.Logger) -> None:
    stream = io.StringIO()
    configure_logging(_settings(log_json=True, level="WARNING"), stream)
    logging.getLogger("faultscope.detection").info("hidden")
    logging.getLogger("faultscope.detection").warning("shown %d", 3)
    lines = stream.getvalue().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0]) == {
        "level": "WARNING",
        "logger": "faultscope.detection",
        "message": "shown 3",
    }


def test_stage_timings_snapshot() -> None:
    timings = StageTimings()
    timings.record("train", 10.0)
    timings.record("train", 30.0)
    with timings.stage("load"):
        pass
    snapshot = timings.snapshot()
    assert snapshot["train"] == {"count": 2, "avg_ms": 20.0, "max_ms": 30.0}
    assert snapshot["load"]["count"] == 1
    assert snapshot["load"]["max_ms"] >= 0.0


def test_stage_is_recorded_when_the_block_raises() -> None:
    timings = StageTimings()
    with pytest.raises(RuntimeError), timings.stage("ensemble"):
        raise RuntimeError("boom")
    assert timings.snapshot()["ensemble"]["count"] == 1


def test_stage_timing_log_line(caplog: pytest.LogCaptureFixture) -> None:
    timings = StageTimings()
    timings.record("monitor", 5.0)
    with caplog.at_level(logging.INFO, logger="faultscope.observability"):
        timings.log("monitor")
    message = caplog.records[-1].getMessage()
    assert message.startswith("stage_timing ")
    payload = json.loads(message.removeprefix("stage_timing "))
    assert payload["command"] == "monitor"
    assert payload["stages"]["monitor"]["count"] == 1
