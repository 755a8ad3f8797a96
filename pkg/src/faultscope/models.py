"""Declarative run configuration for Faultscope."""

from __future__ import annotations

import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Annotated, Any, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from faultscope.errors import ConfigError

MAX_SEED = 2**64 - 1
ACTIVATION_PATTERN = "^(linear|sigmoid|tanh|relu)$"


class FaultKind(StrEnum):
    NONE = "none"
    CONTROLLABLE = "controllable"
    BACK_TO_CONTROL = "back_to_control"
    UNCONTROLLABLE = "uncontrollable"


class DetectionMethod(StrEnum):
    MAHALANOBIS = "mahalanobis"
    LDR = "ldr"


class IdentificationMethod(StrEnum):
    DEVIATION = "deviation"
    LDR = "ldr"


class ThresholdMode(StrEnum):
    TWO_SIDED = "two_sided"
    ONE_SIDED = "one_sided"
    GLOBAL = "global"


class BaselineVariant(StrEnum):
    R_PCA = "r-pca"
    F_PCA = "f-pca"
    R_DPCA = "r-dpca"
    F_DPCA = "f-dpca"


class Block(StrEnum):
    ALL = "all"
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimulateConfig(_Section):
    plant: str = Field(default="default", pattern="^default$")
    plant_seed: int | None = Field(default=None, ge=0, le=MAX_SEED)
    fault: FaultKind = FaultKind.NONE
    n_steps: int = Field(default=4000, ge=2)
    onset: int = Field(default=1000, ge=1)
    magnitude: float | None = None
    target_channel: int | None = Field(default=None, ge=0)
    recovery_horizon: int = Field(default=200, ge=1)
    saturation: bool = False


class SplitConfig(_Section):
    train_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    validation_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)
    contiguous: bool = True

    @model_validator(mode="after")
    def _fractions_leave_test_block(self) -> Self:
        if self.train_fraction + self.validation_fraction >= 1.0:
            raise ValueError("train_fraction + validation_fraction must be below 1")
        if not self.contiguous:
            raise ValueError("time-series splits are contiguous; shuffled splits are not supported")
        return self


class ModelConfig(_Section):
    hidden_size: int = Field(default=32, ge=1)
    activation: str = Field(default="tanh", pattern=ACTIVATION_PATTERN)


class TrainConfig(_Section):
    subsequence_len: int = Field(default=32, ge=2)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    l2_lambda: float = Field(default=1e-4, ge=0.0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int | None = Field(default=None, ge=0, le=MAX_SEED)
    grad_clip: float = Field(default=5.0, gt=0.0)
    validation_samples: int = Field(default=100, ge=2)
    length_scale: float = Field(default=1.0, gt=0.0)
    tau: float | None = Field(default=None, gt=0.0)


class PosteriorConfig(_Section):
    n_samples: int = Field(default=400, ge=2)
    session: int = Field(default=0, ge=0)
    band_z: float = Field(default=2.0, ge=0.0)


class DetectionConfig(_Section):
    method: DetectionMethod = DetectionMethod.MAHALANOBIS
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    k_min: int = Field(default=10, ge=2)
    k_max: int = Field(default=20, ge=2)
    ridge: float = Field(default=1e-8, ge=0.0)
    eps_dist: float = Field(default=1e-12, gt=0.0)

    @model_validator(mode="after")
    def _ordered_k_range(self) -> Self:
        if self.k_min > self.k_max:
            raise ValueError("k_min must not exceed k_max")
        return self


class IdentificationConfig(_Section):
    method: IdentificationMethod = IdentificationMethod.DEVIATION
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    mode: ThresholdMode = ThresholdMode.TWO_SIDED


class BaselineConfig(_Section):
    variants: list[BaselineVariant] = Field(
        default_factory=lambda: list(BaselineVariant), min_length=1
    )
    lag: int = Field(default=1, ge=1)
    n_draws: int = Field(default=50, ge=10)
    quantile: float = Field(default=0.95, gt=0.0, lt=1.0)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)


class GridConfig(_Section):
    hidden_sizes: list[Annotated[int, Field(ge=1)]] = Field(
        default_factory=lambda: [16, 32], min_length=1
    )
    activations: list[Annotated[str, Field(pattern=ACTIVATION_PATTERN)]] = Field(
        default_factory=lambda: ["tanh"], min_length=1
    )
    dropouts: list[Annotated[float, Field(ge=0.0, lt=1.0)]] = Field(
        default_factory=lambda: [0.1], min_length=1
    )
    l2_lambdas: list[Annotated[float, Field(ge=0.0)]] = Field(
        default_factory=lambda: [1e-4], min_length=1
    )


class PathsConfig(_Section):
    data: str | None = None
    model: str = "model.json"
    thresholds: str = "thresholds.json"
    out: str = "out"


class RunConfig(_Section):
    seed: int = Field(default=0, ge=0, le=MAX_SEED)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    posterior: PosteriorConfig = Field(default_factory=PosteriorConfig)
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    identification: IdentificationConfig = Field(default_factory=IdentificationConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)


def _apply_override(document: dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = document
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted_key} addresses a non-table key {part}")
        node = child
    node[parts[-1]] = value


def load_run_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Read a TOML run document, apply dotted-key overrides and validate the result."""
    document: dict[str, Any] = {}
    if path is not None:
        try:
            document = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for dotted_key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(document, dotted_key, value)
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
            for error in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from exc


def config_schema() -> dict[str, Any]:
    return RunConfig.model_json_schema()
