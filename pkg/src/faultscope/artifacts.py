"""JSON model artifacts and threshold files.

Floats are written with their shortest round-trip decimal form, so
``load_model(save_model(m))`` reproduces every parameter bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypedDict

import numpy as np

from faultscope.data import NormalizationStats, atomic_write_text
from faultscope.errors import DatasetFormatError
from faultscope.identification import VarThresholds
from faultscope.linalg import FloatArray
from faultscope.models import DetectionMethod, IdentificationMethod, ThresholdMode
from faultscope.posterior import model_tau
from faultscope.rnn import Activation, RnnModel, RnnParams

FORMAT_VERSION = 1
_PARAM_KEYS = ("w_s", "u_s", "b_s", "w_y", "b_y")


class StatsPayload(TypedDict):
    names: list[str]
    mean: list[float]
    scale: list[float]
    floored: list[str]


@dataclass(frozen=True, slots=True)
class ModelArtifact:
    model: RnnModel
    ensemble_seed: int


@dataclass(frozen=True, slots=True)
class ThresholdSet:
    """Detection and identification decisions fixed at calibration time."""

    detection_method: DetectionMethod
    detection_threshold: float
    alpha: float
    identification: VarThresholds
    alpha_id: float
    n_samples: int
    k_min: int
    k_max: int
    session: int
    model_fingerprint: str


def _dump(payload: dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_json(path: str | Path, what: str) -> dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DatasetFormatError(f"{what} {path} must hold a JSON object")
    return payload


def _floats(values: FloatArray) -> list[Any]:
    result: list[Any] = values.tolist()
    return result


def stats_payload(stats: NormalizationStats) -> StatsPayload:
    return {
        "names": list(stats.names),
        "mean": _floats(stats.mean),
        "scale": _floats(stats.scale),
        "floored": list(stats.floored),
    }


def stats_from_payload(payload: dict[str, Any]) -> NormalizationStats:
    return NormalizationStats(
        names=tuple(str(name) for name in payload["names"]),
        mean=np.asarray(payload["mean"], dtype=np.float64),
        scale=np.asarray(payload["scale"], dtype=np.float64),
        floored=tuple(str(name) for name in payload.get("floored", [])),
    )


def model_payload(model: RnnModel, ensemble_seed: int) -> dict[str, Any]:
    params = model.params
    return {
        "format_version": FORMAT_VERSION,
        "dims": {"m_x": params.m_x, "m_s": params.m_s, "m_y": params.m_y},
        "activation": params.activation.value,
        "params": {
            key: _floats(array) for key, array in zip(_PARAM_KEYS, params.arrays(), strict=True)
        },
        "stats": stats_payload(model.stats),
        "tau": model_tau(model),
        "tau_override": model.tau_override,
        "p_d": model.p_d,
        "l2_lambda": model.l2_lambda,
        "length_scale": model.length_scale,
        "n_train": model.n_train,
        "ensemble_seed": ensemble_seed,
    }


def save_model(model: RnnModel, path: str | Path, ensemble_seed: int) -> Path:
    return atomic_write_text(path, _dump(model_payload(model, ensemble_seed)))


def load_model(path: str | Path) -> ModelArtifact:
    payload = _read_json(path, "model artifact")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported model artifact version {version!r}; expected {FORMAT_VERSION}"
        )
    try:
        raw = payload["params"]
        params = RnnParams(
            w_s=np.asarray(raw["w_s"], dtype=np.float64),
            u_s=np.asarray(raw["u_s"], dtype=np.float64),
            b_s=np.asarray(raw["b_s"], dtype=np.float64),
            w_y=np.asarray(raw["w_y"], dtype=np.float64),
            b_y=np.asarray(raw["b_y"], dtype=np.float64),
            activation=Activation(payload["activation"]),
        )
        dims = payload["dims"]
        if (params.m_x, params.m_s, params.m_y) != (dims["m_x"], dims["m_s"], dims["m_y"]):
            raise DatasetFormatError("model artifact dimensions disagree with its parameters")
        model = RnnModel(
            params=params,
            p_d=float(payload["p_d"]),
            l2_lambda=float(payload["l2_lambda"]),
            length_scale=float(payload["length_scale"]),
            n_train=int(payload["n_train"]),
            stats=stats_from_payload(payload["stats"]),
            tau_override=payload.get("tau_override"),
        )
        ensemble_seed = int(payload["ensemble_seed"])
    except KeyError as exc:
        raise DatasetFormatError(f"model artifact {path} is missing key {exc}") from exc
    return ModelArtifact(model=model, ensemble_seed=ensemble_seed)


def model_fingerprint(model: RnnModel) -> str:
    """Stable identity of a trained model, recorded in threshold files."""
    digest = hashlib.sha256(json.dumps(model_payload(model, 0), sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]


def save_thresholds(thresholds: ThresholdSet, path: str | Path) -> Path:
    identification = thresholds.identification
    payload: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "detection": {
            "method": thresholds.detection_method.value,
            "threshold": thresholds.detection_threshold,
            "alpha": thresholds.alpha,
            "n_samples": thresholds.n_samples,
            "k_min": thresholds.k_min,
            "k_max": thresholds.k_max,
            "session": thresholds.session,
        },
        "identification": {
            "method": identification.method.value,
            "mode": identification.mode.value,
            "alpha": thresholds.alpha_id,
            "upper": _floats(identification.upper),
            "lower": None if identification.lower is None else _floats(identification.lower),
        },
        "model_fingerprint": thresholds.model_fingerprint,
    }
    return atomic_write_text(path, _dump(payload))


def load_thresholds(path: str | Path) -> ThresholdSet:
    payload = _read_json(path, "threshold file")
    try:
        detection = payload["detection"]
        identification = payload["identification"]
        lower = identification.get("lower")
        return ThresholdSet(
            detection_method=DetectionMethod(detection["method"]),
            detection_threshold=float(detection["threshold"]),
            alpha=float(detection["alpha"]),
            identification=VarThresholds(
                method=IdentificationMethod(identification["method"]),
                mode=ThresholdMode(identification["mode"]),
                upper=np.asarray(identification["upper"], dtype=np.float64),
                lower=None if lower is None else np.asarray(lower, dtype=np.float64),
            ),
            alpha_id=float(identification["alpha"]),
            n_samples=int(detection["n_samples"]),
            k_min=int(detection["k_min"]),
            k_max=int(detection["k_max"]),
            session=int(detection["session"]),
            model_fingerprint=str(payload["model_fingerprint"]),
        )
    except KeyError as exc:
        raise DatasetFormatError(f"threshold file {path} is missing key {exc}") from exc
