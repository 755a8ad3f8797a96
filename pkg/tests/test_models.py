from __future__ import annotations

from pathlib import Path

import pytest

from faultscope.errors import ConfigError
from faultscope.models import (
    BaselineVariant,
    DetectionMethod,
    FaultKind,
    RunConfig,
    config_schema,
    load_run_config,
)


def test_defaults_without_a_document() -> None:
    cfg = load_run_config()
    assert cfg == RunConfig()
    assert cfg.detection.method is DetectionMethod.MAHALANOBIS
    assert cfg.baseline.variants == list(BaselineVariant)
    assert cfg.simulate.fault is FaultKind.NONE
    assert cfg.paths.out == "out"


def test_toml_document_and_dotted_overrides(tmp_path: Path) -> None:
    path = tmp_path / "run.toml"
    path.write_text(
        "seed = 7\n"
        "[train]\nepochs = 3\ndropout = 0.2\n"
        "[detection]\nmethod = \"ldr\"\nk_min = 4\nk_max = 6\n",
        encoding="utf-8",
    )
    cfg = load_run_config(path, {"paths.out": str(tmp_path / "run"), "seed": None})
    assert cfg.seed == 7
    assert cfg.train.epochs == 3
    assert cfg.train.dropout == 0.2
    assert cfg.detection.method is DetectionMethod.LDR
    assert cfg.paths.out == str(tmp_path / "run")

    overridden = load_run_config(path, {"seed": 11, "simulate.fault": "uncontrollable"})
    assert overridden.seed == 11
    assert overridden.simulate.fault is FaultKind.UNCONTROLLABLE


@pytest.mark.parametrize(
    ("document", "message"),
    [
        ("[train]\nepochs = 0\n", "train.epochs"),
        ("[train]\ndropout = 1.0\n", "train.dropout"),
        ("[detection]\nk_min = 8\nk_max = 4\n", "k_min must not exceed k_max"),
        ("[split]\ntrain_fraction = 0.8\nvalidation_fraction = 0.3\n", "must be below 1"),
        ("[split]\ncontiguous = false\n", "contiguous"),
        ("[model]\nactivation = \"softmax\"\n", "model.activation"),
        ("[grid]\nhidden_sizes = [8, 0]\n", "grid.hidden_sizes"),
        ("[baseline]\nn_draws = 5\n", "baseline.n_draws"),
        ("[unknown]\nvalue = 1\n", "unknown"),
        ("seed = -1\n", "seed"),
    ],
)
def test_invalid_documents_raise_config_error(
    tmp_path: Path, document: str, message: str
) -> None:
    path = tmp_path / "bad.toml"
    path.write_text(document, encoding="utf-8")
    with pytest.raises(ConfigError, match=message):
        load_run_config(path)


def test_missing_and_malformed_files(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_run_config(broken)


def test_override_cannot_descend_into_a_scalar() -> None:
    with pytest.raises(ConfigError, match="non-table"):
        load_run_config(None, {"seed": 1, "seed.inner": 2})


def test_config_error_is_a_value_error() -> None:
    assert issubclass(ConfigError, ValueError)


def test_schema_lists_every_section() -> None:
    schema = config_schema()
    properties = set(schema["properties"])
    assert {
        "seed",
        "paths",
        "simulate",
        "split",
        "model",
        "train",
        "grid",
        "posterior",
        "detection",
        "identification",
        "baseline",
    } <= properties
