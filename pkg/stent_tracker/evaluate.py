"""
Detection and localization metrics for tracked landmark pairs

Predictions are matched to the ground-truth marker pair frame by frame. A
prediction counts as a true positive only when both of its landmarks lie
within the matching radius of the two true markers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import GroundTruth
from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 5.0


@dataclass(frozen=True)
class EvalConfig:
    radius: float = DEFAULT_RADIUS
    # size of the synthetic test corpus used by ablation runs
    sequences: int = 50

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("eval.radius", f"must be positive, got {self.radius}")
        if self.sequences < 1:
            raise ConfigError("eval.sequences", f"must be >= 1, got {self.sequences}")


@dataclass(frozen=True)
class FrameMatch:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    # (predicted point, true point, distance) for landmarks of true positives
    matches: tuple = ()


@dataclass(frozen=True)
class MatchResult:
    frames: tuple = field(default_factory=tuple)

    @property
    def tp(self) -> int:
        return sum(f.tp for f in self.frames)

    @property
    def fp(self) -> int:
        return sum(f.fp for f in self.frames)

    @property
    def fn(self) -> int:
        return sum(f.fn for f in self.frames)

    @property
    def tn(self) -> int:
        return sum(f.tn for f in self.frames)

    def distances(self) -> np.ndarray:
        return np.array([d for f in self.frames for _, _, d in f.matches], dtype=float)

    @classmethod
    def combine(cls, results) -> MatchResult:
        return cls(tuple(f for r in results for f in r.frames))


def _as_prediction_lists(predictions, n_frames: int) -> list:
    if hasattr(predictions, "predictions"):
        predictions = predictions.predictions()
    predictions = list(predictions)
    if len(predictions) < n_frames:
        predictions += [[]] * (n_frames - len(predictions))
    elif len(predictions) > n_frames:
        raise ValueError(f"predictions cover {len(predictions)} frames, ground truth {n_frames}")
    return [list(p) if p is not None else [] for p in predictions]


def _pair_landmarks(pred: tuple, truth: tuple) -> list:
    """Greedy nearest pairing of two predicted landmarks to two true ones"""
    options = [(pred[i].distance(truth[j]), i, j) for i in range(2) for j in range(2)]
    d, i, j = min(options)
    first = (pred[i], truth[j], d)
    i2, j2 = 1 - i, 1 - j
    second = (pred[i2], truth[j2], pred[i2].distance(truth[j2]))
    return [first, second]


def match_frame(preds: list, truth: Optional[tuple], radius: float) -> FrameMatch:
    if truth is None:
        return FrameMatch(fp=len(preds), tn=int(not preds))
    order = sorted(range(len(preds)),
                   key=lambda k: (max(d for _, _, d in _pair_landmarks(preds[k], truth)), k))
    tp = fp = 0
    matches = ()
    for k in order:
        pairs = _pair_landmarks(preds[k], truth)
        if tp == 0 and all(d <= radius for _, _, d in pairs):
            tp = 1
            matches = tuple(pairs)
        else:
            fp += 1
    return FrameMatch(tp=tp, fp=fp, fn=1 - tp, tn=0, matches=matches)


def match_predictions(predictions, gt: GroundTruth, radius: float = DEFAULT_RADIUS) -> MatchResult:
    """
    Match a Track (or per-frame lists of landmark pairs) against ground truth

    Within a frame, predictions are visited in ascending order of their
    worse landmark distance, ties by prediction index; the first one with
    both landmarks inside `radius` claims the true pair.
    """
    if radius <= 0:
        raise ValueError(f"matching radius must be positive, got {radius}")
    preds = _as_prediction_lists(predictions, len(gt))
    return MatchResult(tuple(match_frame(preds[t], gt.pair(t), radius) for t in range(len(gt))))


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float


def detection_metrics(m: MatchResult) -> DetectionMetrics:
    tp, fp, fn, tn = m.tp, m.fp, m.fn, m.tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fn + fp) if tp + fn + fp else 0.0
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 1.0
    return DetectionMetrics(precision, recall, f1, accuracy)


@dataclass(frozen=True)
class LocalizationMetrics:
    """Euclidean landmark errors over matched landmarks; None when nothing matched"""

    mae: Optional[float]
    rmse: Optional[float]
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


def localization_metrics(m: MatchResult) -> LocalizationMetrics:
    d = m.distances()
    if len(d) == 0:
        return LocalizationMetrics(None, None, 0)
    return LocalizationMetrics(float(d.mean()), float(math.sqrt(np.mean(d * d))), len(d))


def evaluate_sequences(pairs, radius: float = DEFAULT_RADIUS) -> MatchResult:
    """Pool the matches of several (predictions, GroundTruth) pairs"""
    return MatchResult.combine(match_predictions(p, gt, radius) for p, gt in pairs)


def metrics_report(m: MatchResult, radius: float = DEFAULT_RADIUS) -> dict:
    det = detection_metrics(m)
    loc = localization_metrics(m)
    return {
        "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn,
        "precision": det.precision, "recall": det.recall, "f1": det.f1, "accuracy": det.accuracy,
        "mae": loc.mae, "rmse": loc.rmse, "matched_landmarks": loc.count,
        "radius": radius, "tn_unit": "frame",
    }


def format_report(report: dict) -> str:
    lines = []
    for key, value in report.items():
        if value is None:
            value = "undefined"
        elif isinstance(value, float):
            value = f"{value:.6g}"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
