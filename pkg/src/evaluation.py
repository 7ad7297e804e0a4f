#!/usr/bin/env python3
"""
HierLoc evaluation
Hit rates, 2D/3D positioning errors and report rendering
"""

import os
import json
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from tensor_core import DTYPE, HierLocError
from dataset import FingerprintRecord, features_and_targets
from hierloc_model import DecodedPrediction, HierLocModel, predict

logger = logging.getLogger(__name__)

CHUNK_SIZE = 256


class EvaluationError(HierLocError, ValueError):
    pass


class PenaltyConfig(BaseModel):
    """Penalties added to the planar error: per wrong building, and per floor level of difference"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    building_penalty: float = Field(50.0, ge=0.0)
    floor_penalty: float = Field(4.0, ge=0.0)


@dataclass
class EvalReport:
    building_hit_rate: float
    floor_hit_rate: float
    building_floor_hit_rate: float
    mean_2d_error: float
    mean_3d_error: float
    errors_2d: np.ndarray
    errors_3d: np.ndarray
    predictions: DecodedPrediction
    truth: DecodedPrediction
    config: dict = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return len(self.errors_2d)

    def to_dict(self) -> dict:
        return {
            "building_hit_rate": self.building_hit_rate,
            "floor_hit_rate": self.floor_hit_rate,
            "building_floor_hit_rate": self.building_floor_hit_rate,
            "mean_2d_error": self.mean_2d_error,
            "mean_3d_error": self.mean_3d_error,
            "record_count": self.record_count,
            "errors_2d": [float(e) for e in self.errors_2d],
            "errors_3d": [float(e) for e in self.errors_3d],
            "config": self.config,
        }


def _mean(values: Sequence[float]) -> float:
    # exactly rounded sum, so duplicating every value leaves the mean unchanged
    return math.fsum(values) / len(values)


def _check_pair(decoded: DecodedPrediction, truth: DecodedPrediction) -> None:
    if len(decoded) != len(truth):
        raise EvaluationError(f"{len(decoded)} predictions but {len(truth)} ground-truth records")
    if len(decoded) == 0:
        raise EvaluationError("nothing to score: empty prediction list")


def hit_rates(decoded: DecodedPrediction, truth: DecodedPrediction) -> Tuple[float, float, float]:
    """(building, floor, building-and-floor) exact-match fractions"""
    _check_pair(decoded, truth)
    building_ok = decoded.building_id == truth.building_id
    floor_ok = decoded.floor == truth.floor
    n = len(decoded)
    return (
        int(building_ok.sum()) / n,
        int(floor_ok.sum()) / n,
        int((building_ok & floor_ok).sum()) / n,
    )


def positioning_error_2d(pred_xy, true_xy):
    """Planar Euclidean distance; a pair of points gives a float, (n, 2) arrays give n distances"""
    delta = np.asarray(pred_xy, dtype=DTYPE) - np.asarray(true_xy, dtype=DTYPE)
    dist = np.hypot(delta[..., 0], delta[..., 1])
    if dist.ndim == 0:
        return float(dist)
    return dist


def positioning_error_3d(
    pred: DecodedPrediction, truth: DecodedPrediction, penalties: Optional[PenaltyConfig] = None
) -> np.ndarray:
    """Planar error plus building_penalty per wrong building and floor_penalty per floor level off"""
    _check_pair(pred, truth)
    penalties = penalties or PenaltyConfig()
    planar = positioning_error_2d(pred.xy, truth.xy)
    wrong_building = (pred.building_id != truth.building_id).astype(DTYPE)
    floor_gap = np.abs(pred.floor - truth.floor).astype(DTYPE)
    return planar + penalties.building_penalty * wrong_building + penalties.floor_penalty * floor_gap


def thread_count() -> int:
    raw = os.getenv("HIERLOC_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise EvaluationError(f"HIERLOC_THREADS must be a positive integer, got {raw!r}")
    if threads < 1:
        raise EvaluationError(f"HIERLOC_THREADS must be a positive integer, got {raw!r}")
    return threads


def _check_meta(model: HierLocModel, records: Sequence[FingerprintRecord]) -> None:
    meta = model.meta
    for i, record in enumerate(records):
        if not 0 <= record.building_id < meta.building_count:
            raise EvaluationError(
                f"record {i} has building {record.building_id}, model knows {meta.building_count} buildings"
            )
        if not 0 <= record.floor < meta.floor_count:
            raise EvaluationError(f"record {i} has floor {record.floor}, model knows {meta.floor_count} floors")


def evaluate(
    model: HierLocModel,
    records: Sequence[FingerprintRecord],
    penalties: Optional[PenaltyConfig] = None,
    threads: Optional[int] = None,
) -> EvalReport:
    if not records:
        raise EvaluationError("cannot evaluate an empty record list")
    penalties = penalties or PenaltyConfig()
    threads = threads or thread_count()
    _check_meta(model, records)

    features = features_and_targets(records).features
    chunks = [features[start:start + CHUNK_SIZE] for start in range(0, len(features), CHUNK_SIZE)]
    logger.info(f"📊 Evaluating {len(records)} records in {len(chunks)} chunks on {threads} thread(s)")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map keeps chunk order whatever the completion order
        parts: List[DecodedPrediction] = list(pool.map(lambda chunk: predict(model, chunk), chunks))
    decoded = DecodedPrediction(
        np.concatenate([p.building_id for p in parts]),
        np.concatenate([p.floor for p in parts]),
        np.concatenate([p.xy for p in parts]),
    )
    truth = DecodedPrediction.from_records(records)

    building, floor, both = hit_rates(decoded, truth)
    errors_2d = positioning_error_2d(decoded.xy, truth.xy)
    errors_3d = positioning_error_3d(decoded, truth, penalties)
    report = EvalReport(
        building_hit_rate=building,
        floor_hit_rate=floor,
        building_floor_hit_rate=both,
        mean_2d_error=_mean(errors_2d),
        mean_3d_error=_mean(errors_3d),
        errors_2d=errors_2d,
        errors_3d=errors_3d,
        predictions=decoded,
        truth=truth,
        config={
            "seed": model.params.seed,
            "hyperparams": model.params.model_dump(mode="json"),
            "penalties": penalties.model_dump(mode="json"),
            "meta": model.meta.to_dict(),
        },
    )
    logger.info(
        f"✅ building {building:.2%}, floor {floor:.2%}, building/floor {both:.2%}, "
        f"2D {report.mean_2d_error:.3f} m, 3D {report.mean_3d_error:.3f} m"
    )
    return report


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


def render_text(report: EvalReport) -> str:
    penalties = report.config.get("penalties", {})
    hp = report.config.get("hyperparams", {})
    rows = [
        ("records", f"{report.record_count}"),
        ("building hit rate", f"{report.building_hit_rate * 100:.2f} %"),
        ("floor hit rate", f"{report.floor_hit_rate * 100:.2f} %"),
        ("building/floor hit rate", f"{report.building_floor_hit_rate * 100:.2f} %"),
        ("mean 2D error", f"{report.mean_2d_error:.3f} m"),
        ("mean 3D error", f"{report.mean_3d_error:.3f} m"),
        ("building penalty", f"{penalties.get('building_penalty', '-')} m"),
        ("floor penalty", f"{penalties.get('floor_penalty', '-')} m/level"),
        ("rnn", f"{hp.get('rnn_kind', '-')}"),
        ("seed", f"{report.config.get('seed', '-')}"),
    ]
    width = max(len(label) for label, _ in rows)
    lines = ["HierLoc evaluation report", "=" * (width + 16)]
    lines += [f"{label.ljust(width)}  {value.rjust(12)}" for label, value in rows]
    return "\n".join(lines) + "\n"


def error_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame({
        "building_pred": report.predictions.building_id,
        "floor_pred": report.predictions.floor,
        "x_pred": report.predictions.xy[:, 0],
        "y_pred": report.predictions.xy[:, 1],
        "building_true": report.truth.building_id,
        "floor_true": report.truth.floor,
        "x_true": report.truth.xy[:, 0],
        "y_true": report.truth.xy[:, 1],
        "err2d": report.errors_2d,
        "err3d": report.errors_3d,
    })


def write_error_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    """Per-record predictions and errors, one row per record in input order, with a JSON sidecar
    carrying the seed and configuration that produced them"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    error_frame(report).to_csv(tmp, index_label="record")
    os.replace(tmp, path)
    sidecar = path.with_suffix(".json")
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    payload = {"config": report.config, "seed": report.config.get("seed"), "records": report.record_count}
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, sidecar)
    logger.info(f"💾 Wrote per-record errors to {path} (configuration in {sidecar.name})")
    return path
