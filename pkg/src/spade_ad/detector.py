"""Per-sample anomaly scores (four methods) and the threshold decision.

All scores share one convention: higher means more anomalous. The weighted
method multiplies the reconstruction error map by the normalized ROI before
summing; the baselines use the raw error sum, the unnormalized input-only ROI
product, and the classifier's anomaly likelihood.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import ClassRole, DatasetSplit, ImageSample
from .models import CnnModel, VaeModel, _to_batch, reconstruct, to_unit_image
from .saliency import naive_roi, spade_roi

METHODS = ("spade", "naive_spade", "vae", "cnn")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    method: str
    score: float
    role: ClassRole
    digit_label: int


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float
    method: str = "spade"

    def __post_init__(self):
        # +-inf is legal (it disables one side of the decision); NaN is not.
        if np.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class ModelSet:
    vae: VaeModel | None = None
    cnn: CnnModel | None = None


def error_map(u: np.ndarray, u_hat: np.ndarray) -> np.ndarray:
    """Per-pixel absolute difference, both images in [0, 1]."""
    return np.abs(np.asarray(u, dtype=np.float64) - np.asarray(u_hat, dtype=np.float64))


def weighted_error_sum(e: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(e * weights))


def spade_score(vae: VaeModel, cnn: CnnModel, u: np.ndarray) -> float:
    """Sum of the reconstruction error weighted by the normalized dual-branch ROI."""
    unit = to_unit_image(np.asarray(u))
    u_hat = reconstruct(vae, unit)
    roi = spade_roi(cnn, unit, u_hat)
    return weighted_error_sum(error_map(unit, u_hat), roi.values)


def naive_spade_score(vae: VaeModel, cnn: CnnModel, u: np.ndarray) -> float:
    """Error sum weighted by the unnormalized input-only ReLU ROI (ablation)."""
    unit = to_unit_image(np.asarray(u))
    u_hat = reconstruct(vae, unit)
    return weighted_error_sum(error_map(unit, u_hat), naive_roi(cnn, unit))


def vae_score(vae: VaeModel, u: np.ndarray) -> float:
    """Plain reconstruction-error sum."""
    unit = to_unit_image(np.asarray(u))
    return float(error_map(unit, reconstruct(vae, unit)).sum())


def cnn_score(cnn: CnnModel, u: np.ndarray) -> float:
    """Classifier anomaly likelihood, 1 - p(normal); always in (0, 1)."""
    unit = to_unit_image(np.asarray(u))
    cnn.eval()
    with torch.no_grad():
        p = cnn.prob_normal(_to_batch(unit, cnn))
    return float(1.0 - p.item())


def classify(score: float, config: DetectorConfig) -> str:
    """Strictly-greater threshold rule; ties classify as the correct pattern."""
    return "incorrect_pattern" if score > config.threshold else "correct_pattern"


def _score_one(models: ModelSet, method: str, pixels: np.ndarray) -> float:
    if method == "spade":
        return spade_score(models.vae, models.cnn, pixels)
    if method == "naive_spade":
        return naive_spade_score(models.vae, models.cnn, pixels)
    if method == "vae":
        return vae_score(models.vae, pixels)
    if method == "cnn":
        return cnn_score(models.cnn, pixels)
    raise ValueError(f"unknown method {method!r}")


def _require_models(models: ModelSet, method: str) -> None:
    needs_vae = method in ("spade", "naive_spade", "vae")
    needs_cnn = method in ("spade", "naive_spade", "cnn")
    if needs_vae and models.vae is None:
        raise ValueError(f"method {method!r} needs a VAE model")
    if needs_cnn and models.cnn is None:
        raise ValueError(f"method {method!r} needs a CNN model")


def score_corpus(models: ModelSet, split: DatasetSplit, method: str) -> list[ScoreRecord]:
    """Score every evaluation sample; output is ordered by sample_id."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r} (expected one of {METHODS})")
    _require_models(models, method)
    records = []
    for sample in sorted(split.eval_all, key=lambda s: s.sample_id):
        records.append(
            ScoreRecord(
                sample_id=sample.sample_id,
                method=method,
                score=_score_one(models, method, sample.pixels),
                role=split.role_of(sample),
                digit_label=sample.digit_label,
            )
        )
    return records


def score_samples(models: ModelSet, samples: list[ImageSample], method: str) -> list[float]:
    _require_models(models, method)
    return [_score_one(models, method, s.pixels) for s in samples]


def youden_threshold(scores, is_anomaly) -> float:
    """Threshold maximizing TPR - FPR under the strict-greater decision rule.

    Candidates are the observed scores (ties broken toward the lowest
    qualifying threshold), computed on training-visible data only.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_anomaly, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("need both classes to pick a threshold")
    candidates = np.unique(scores)
    best_j, best_t = -np.inf, candidates[0]
    for t in candidates:
        pred = scores > t
        tpr = np.mean(pred[labels])
        fpr = np.mean(pred[~labels])
        if tpr - fpr > best_j:
            best_j, best_t = tpr - fpr, t
    return float(best_t)


def select_threshold(models: ModelSet, split: DatasetSplit, method: str) -> float:
    """Youden-optimal threshold from the training lists only (never touches the
    evaluation set)."""
    samples = split.train_normal + split.train_known_anomaly
    scores = score_samples(models, samples, method)
    labels = [split.role_of(s) != ClassRole.NORMAL for s in samples]
    return youden_threshold(scores, labels)


def write_scores_csv(records: list[ScoreRecord], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "method", "role", "digit_label", "score"])
        for r in records:
            writer.writerow([r.sample_id, r.method, r.role.value, r.digit_label, repr(r.score)])
    return out


def write_scores_json(records: list[ScoreRecord], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "sample_id": r.sample_id,
            "method": r.method,
            "role": r.role.value,
            "digit_label": r.digit_label,
            "score": r.score,
        }
        for r in records
    ]
    out.write_text(json.dumps(payload, indent=1))
    return out
