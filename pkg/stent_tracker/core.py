"""
Shared geometry and detection types

Coordinates are continuous pixels with the origin at the center of the
top-left pixel; x grows to the right and y grows downwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Smallest bounding-box side in pixels. Axis-aligned marker pairs would
# otherwise give zero-area boxes.
MIN_SIDE = 8.0


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def distance(self, other: Point2) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class LandmarkDetection:
    """A candidate balloon marker in one frame"""

    position: Point2
    score: float
    frame: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")
        if self.frame < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame}")


@dataclass(frozen=True)
class BoundingBox:
    center: Point2
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"box sides must be positive, got {self.width}x{self.height}")

    @property
    def x0(self) -> float:
        return self.center.x - self.width / 2.0

    @property
    def x1(self) -> float:
        return self.center.x + self.width / 2.0

    @property
    def y0(self) -> float:
        return self.center.y - self.height / 2.0

    @property
    def y1(self) -> float:
        return self.center.y + self.height / 2.0

    @property
    def area(self) -> float:
        return self.width * self.height


def bbox_from_pair(a: Point2, b: Point2) -> BoundingBox:
    """Box centered on the midpoint of a landmark pair, sides clamped to MIN_SIDE"""
    center = Point2((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
    return BoundingBox(
        center=center,
        width=max(abs(a.x - b.x), MIN_SIDE),
        height=max(abs(a.y - b.y), MIN_SIDE),
    )


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    """Intersection over union of two axis-aligned boxes"""
    ix = max(0.0, min(b1.x1, b2.x1) - max(b1.x0, b2.x0))
    iy = max(0.0, min(b1.y1, b2.y1) - max(b1.y0, b2.y0))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = b1.area + b2.area - inter
    return min(1.0, inter / union)


def _landmark_key(det: LandmarkDetection):
    return (det.position.x, det.position.y, det.score)


@dataclass(frozen=True)
class StentCandidate:
    """
    An ordered landmark pair hypothesized to bracket one stent

    Build instances with `StentCandidate.from_pair`, which fixes the
    canonical landmark order (lexicographic by x, then y) and derives
    the score and bounding box.
    """

    landmarks: tuple
    score: float
    bbox: BoundingBox
    frame: int

    @classmethod
    def from_pair(cls, a: LandmarkDetection, b: LandmarkDetection) -> StentCandidate:
        if a.frame != b.frame:
            raise ValueError(f"landmarks come from different frames ({a.frame} and {b.frame})")
        first, second = sorted((a, b), key=_landmark_key)
        return cls(
            landmarks=(first, second),
            score=(a.score + b.score) / 2.0,
            bbox=bbox_from_pair(first.position, second.position),
            frame=a.frame,
        )

    @property
    def vector(self) -> np.ndarray:
        """Landmark-pair vector from the first to the second canonical landmark"""
        p, q = self.landmarks
        return np.array([q.position.x - p.position.x, q.position.y - p.position.y])

    @property
    def length(self) -> float:
        p, q = self.landmarks
        return p.position.distance(q.position)

    @property
    def points(self) -> tuple:
        return (self.landmarks[0].position, self.landmarks[1].position)


@dataclass(frozen=True, eq=False)
class GrayFrame:
    """An 8-bit grayscale frame stored as a read-only (height, width) array"""

    intensities: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.intensities)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"frame must be a non-empty 2D array, got shape {values.shape}")
        values = np.ascontiguousarray(values, dtype=np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "intensities", values)

    @classmethod
    def from_float(cls, values) -> GrayFrame:
        """Round and clamp real intensities into an 8-bit frame"""
        return cls(np.clip(np.floor(np.asarray(values, dtype=float) + 0.5), 0, 255).astype(np.uint8))

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def shape(self) -> tuple:
        return self.intensities.shape

    def as_float(self) -> np.ndarray:
        return self.intensities.astype(float)

    def __eq__(self, other):
        if not isinstance(other, GrayFrame):
            return NotImplemented
        return np.array_equal(self.intensities, other.intensities)

    __hash__ = None


@dataclass(frozen=True)
class GroundTruth:
    """
    Per-frame true marker pairs for one sequence

    `clutter` lists the static marker-like blobs a simulator rendered; it
    is metadata and is not part of the on-disk ground-truth format.
    """

    markers: tuple
    present: tuple
    clutter: tuple = ()

    def __post_init__(self):
        if len(self.markers) != len(self.present):
            raise ValueError("markers and presence flags must have one entry per frame")
        for t, (pair, flag) in enumerate(zip(self.markers, self.present)):
            if flag and (pair is None or len(pair) != 2):
                raise ValueError(f"frame {t}: a present stent needs exactly two markers")

    def __len__(self):
        return len(self.markers)

    def pair(self, frame: int) -> Optional[tuple]:
        if not self.present[frame]:
            return None
        return self.markers[frame]


@dataclass(frozen=True)
class Sequence:
    frames: tuple
    ground_truth: Optional[GroundTruth] = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        shapes = {f.shape for f in frames}
        if len(shapes) > 1:
            raise ValueError(f"all frames must share dimensions, got {sorted(shapes)}")
        if self.ground_truth is not None and len(self.ground_truth) != len(frames):
            raise ValueError(
                f"ground truth covers {len(self.ground_truth)} frames, sequence has {len(frames)}")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape if self.frames else (0, 0)
