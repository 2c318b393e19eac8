"""
Landmark detection as heatmap regression

The shipped detector is morphological: a dark top-hat (closing minus
image) normalized per frame acts as the landmark heatmap. Anything that
implements `LandmarkDetector` (a learned heatmap regressor, say) can
replace it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .core import GrayFrame, LandmarkDetection, Point2
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

# Pixels below this value are treated as zero when fitting in the log domain
_LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Per-pixel landmark likelihood in [0, 1], stored as a (height, width) array"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DimensionError(f"heatmap must be 2D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, width: int, height: int) -> Heatmap:
        return cls(np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Heatmap):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class DetectorParams:
    radius: int = 6
    threshold: float = 0.35
    nms_radius: float = 5.0
    sigma: float = 2.0
    max_detections: int = 12

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError("detector.radius", f"must be >= 1, got {self.radius}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("detector.threshold", f"must be in (0, 1), got {self.threshold}")
        if self.nms_radius < 0:
            raise ConfigError("detector.nms_radius", f"must be >= 0, got {self.nms_radius}")
        if self.sigma <= 0:
            raise ConfigError("detector.sigma", f"must be positive, got {self.sigma}")
        if self.max_detections < 1:
            raise ConfigError("detector.max_detections", f"must be >= 1, got {self.max_detections}")


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def tophat_response(frame: GrayFrame, params: DetectorParams) -> Heatmap:
    """Dark top-hat response scaled so the strongest pixel of the frame is 1"""
    image = frame.as_float()
    closed = ndimage.grey_closing(image, footprint=disk(params.radius), mode="nearest")
    response = closed - image
    peak = response.max()
    if peak <= 0:
        return Heatmap(np.zeros_like(image))
    return Heatmap(np.clip(response / peak, 0.0, 1.0))


def _vertex_offset(left: float, mid: float, right: float) -> float:
    """Offset of the parabola vertex through three equally spaced samples"""
    if min(left, mid, right) > _LOG_FLOOR:
        # A Gaussian is a parabola in the log domain
        left, mid, right = math.log(left), math.log(mid), math.log(right)
    curvature = left - 2.0 * mid + right
    if curvature >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def _refine(values: np.ndarray, row: int, col: int) -> tuple:
    height, width = values.shape
    x, y = float(col), float(row)
    if 0 < col < width - 1:
        x += _vertex_offset(values[row, col - 1], values[row, col], values[row, col + 1])
    if 0 < row < height - 1:
        y += _vertex_offset(values[row - 1, col], values[row, col], values[row + 1, col])
    return x, y


def _find_peaks(values: np.ndarray, threshold: float, nms_radius: float,
                max_count=None) -> list:
    """
    Local maxima at or above threshold after greedy non-maximum suppression

    Returns (x, y, value) tuples ordered by decreasing value; ties are
    ordered by row then column.
    """
    if values.size == 0 or values.max() < threshold or values.max() <= 0:
        return []
    local_max = ndimage.maximum_filter(values, size=3, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((values == local_max) & (values >= threshold) & (values > 0))
    order = np.lexsort((cols, rows, -values[rows, cols]))

    kept = []
    r2 = nms_radius * nms_radius
    for idx in order:
        row, col = int(rows[idx]), int(cols[idx])
        if any((row - kr) ** 2 + (col - kc) ** 2 <= r2 for kr, kc in kept):
            continue
        kept.append((row, col))
        if max_count is not None and len(kept) >= max_count:
            break

    peaks = []
    for row, col in kept:
        x, y = _refine(values, row, col)
        peaks.append((x, y, float(values[row, col])))
    return peaks


def extract_peaks(hm: Heatmap, threshold: float, nms_radius: float, frame: int = 0,
                  max_count=None) -> list:
    """Landmark detections at heatmap peaks, scored by the heatmap value at the peak"""
    return [
        LandmarkDetection(Point2(x, y), min(1.0, max(0.0, v)), frame)
        for x, y, v in _find_peaks(hm.values, threshold, nms_radius, max_count)
    ]


def tophat_detect(frame: GrayFrame, params: DetectorParams, index: int = 0) -> list:
    """Top-hat response, then thresholded non-maximum suppression with subpixel peaks"""
    hm = tophat_response(frame, params)
    return extract_peaks(hm, params.threshold, params.nms_radius, index, params.max_detections)


def render_heatmap(points, sigma: float, dims: tuple) -> Heatmap:
    """
    Gaussian landmark heatmap of size dims = (width, height)

    Overlapping Gaussians are composed by maximum so each landmark keeps
    a peak of exactly 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    width, height = dims
    values = np.zeros((height, width))
    if not points:
        return Heatmap(values)
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    for p in points:
        g = np.exp(-((xx - p.x) ** 2 + (yy - p.y) ** 2) / (2.0 * sigma * sigma))
        np.maximum(values, g, out=values)
    return Heatmap(values)


def heatmap_loss(pred: Heatmap, gt: Heatmap, lambda1: float = 1.0, lambda2: float = 2.0) -> float:
    """Squared error plus an extra penalty on under-predicted pixels"""
    if pred.shape != gt.shape:
        raise DimensionError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    n = gt.values.size
    diff = gt.values - pred.values
    under = np.maximum(diff, 0.0)
    return float(lambda1 * np.sum(diff * diff) / n + lambda2 * np.sum(under * under) / n)


def correct_heatmap(hm: Heatmap, detections, node_probs, w: int = 9) -> Heatmap:
    """
    Scale a w x w window around each detection by its best node probability

    Where windows overlap the largest multiplier wins; pixels outside every
    window are left as they are.
    """
    if w < 1 or w % 2 == 0:
        raise ValueError(f"correction window must be a positive odd size, got {w}")
    if len(detections) != len(node_probs):
        raise DimensionError(
            f"{len(detections)} detections but {len(node_probs)} node probabilities")
    factor = np.full(hm.shape, np.nan)
    half = w // 2
    height, width = hm.shape
    for det, prob in zip(detections, node_probs):
        col = int(math.floor(det.position.x + 0.5))
        row = int(math.floor(det.position.y + 0.5))
        r0, r1 = max(0, row - half), min(height, row + half + 1)
        c0, c1 = max(0, col - half), min(width, col + half + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        window = factor[r0:r1, c0:c1]
        factor[r0:r1, c0:c1] = np.fmax(window, float(prob))
    scale = np.where(np.isnan(factor), 1.0, factor)
    return Heatmap(hm.values * scale)


class LandmarkDetector(Protocol):
    """Anything that turns a frame into a landmark heatmap and detections"""

    def heatmap(self, frame: GrayFrame) -> Heatmap:
        ...

    def peaks(self, hm: Heatmap, index: int = 0) -> list:
        ...

    def detect(self, frame: GrayFrame, index: int = 0) -> list:
        ...


class TophatDetector:
    """Morphological stand-in for a learned heatmap regressor"""

    def __init__(self, params: DetectorParams = DetectorParams()):
        self.params = params

    def heatmap(self, frame: GrayFrame) -> Heatmap:
        return tophat_response(frame, self.params)

    def peaks(self, hm: Heatmap, index: int = 0) -> list:
        return extract_peaks(hm, self.params.threshold, self.params.nms_radius, index,
                             self.params.max_detections)

    def detect(self, frame: GrayFrame, index: int = 0) -> list:
        return self.peaks(self.heatmap(frame), index)
