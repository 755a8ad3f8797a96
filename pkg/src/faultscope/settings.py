"""Runtime settings for Faultscope."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


@dataclass(frozen=True, slots=True)
class Settings:
    log_level: str
    log_json: bool
    run_acceptance: bool


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    normalized = raw.strip().lower()
    if normalized in {"1", "true", "yes", "on"}:
        return True
    if normalized in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"{name} must be a boolean-like value")


def load_settings() -> Settings:
    level = os.getenv("FAULTSCOPE_LOG_LEVEL", "INFO").strip().upper()
    if level not in _LEVELS:
        raise ValueError(f"FAULTSCOPE_LOG_LEVEL must be one of {sorted(_LEVELS)}")
    return Settings(
        log_level=level,
        log_json=_env_bool("FAULTSCOPE_LOG_JSON", False),
        run_acceptance=_env_bool("FAULTSCOPE_RUN_ACCEPTANCE", False),
    )


def log_level_number(settings: Settings) -> int:
    return int(logging.getLevelName(settings.log_level))
