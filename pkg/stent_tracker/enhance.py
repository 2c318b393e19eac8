"""
Digital stent enhancement

Tracked marker pairs fix a similarity transform from each frame onto a
reference frame. Registered frames are averaged with a validity mask so
samples from outside the source frame never enter the mean.
"""

from __future__ import annotations

import cmath
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import GrayFrame, Point2, Sequence, StentCandidate
from .errors import ConfigError, RegistrationError

log = logging.getLogger(__name__)

# Sample positions this far outside the frame still count as inside
_EDGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EnhanceConfig:
    n_frames: int = 7
    # -1 picks the middle tracked frame
    reference: int = -1

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("enhance.n_frames", f"must be >= 1, got {self.n_frames}")
        if self.reference < -1:
            raise ConfigError("enhance.reference", "must be a frame index or -1")


@dataclass(frozen=True)
class Similarity2D:
    """p -> scale * R(rotation) p + (tx, ty)"""

    rotation: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not all(math.isfinite(v) for v in (self.rotation, self.tx, self.ty)):
            raise ValueError("similarity parameters must be finite")

    @property
    def _a(self) -> complex:
        return cmath.rect(self.scale, self.rotation)

    def apply(self, p: Point2) -> Point2:
        z = self._a * complex(p.x, p.y) + complex(self.tx, self.ty)
        return Point2(z.real, z.imag)

    def apply_xy(self, xs: np.ndarray, ys: np.ndarray) -> tuple:
        a = self._a
        return (a.real * xs - a.imag * ys + self.tx, a.imag * xs + a.real * ys + self.ty)

    def inverse(self) -> Similarity2D:
        a_inv = 1.0 / self._a
        t = -a_inv * complex(self.tx, self.ty)
        return Similarity2D(cmath.phase(a_inv), abs(a_inv), t.real, t.imag)


def similarity_from_pairs(src: tuple, dst: tuple) -> Similarity2D:
    """The similarity taking src[0] to dst[0] and src[1] to dst[1]"""
    s1, s2 = (complex(p.x, p.y) for p in src)
    d1, d2 = (complex(p.x, p.y) for p in dst)
    if abs(s2 - s1) < 1e-12:
        raise RegistrationError("source points coincide; the transform is undetermined")
    if abs(d2 - d1) < 1e-12:
        raise RegistrationError("destination points coincide; the transform is degenerate")
    a = (d2 - d1) / (s2 - s1)
    t = d1 - a * s1
    return Similarity2D(cmath.phase(a), abs(a), t.real, t.imag)


def warp_with_mask(image: np.ndarray, T: Similarity2D) -> tuple:
    """
    Resample `image` so that source point p lands on T(p)

    Returns (values, mask); mask is 1 where the source sample lies inside
    the frame and 0 elsewhere, and values are 0 outside the mask.
    """
    height, width = image.shape
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    sx, sy = T.inverse().apply_xy(xx, yy)
    mask = ((sx >= -_EDGE_TOLERANCE) & (sx <= width - 1 + _EDGE_TOLERANCE)
            & (sy >= -_EDGE_TOLERANCE) & (sy <= height - 1 + _EDGE_TOLERANCE))
    sx = np.clip(sx, 0.0, width - 1)
    sy = np.clip(sy, 0.0, height - 1)
    values = ndimage.map_coordinates(image.astype(float), [sy, sx], order=1, mode="nearest")
    return np.where(mask, values, 0.0), mask.astype(float)


def warp_frame(frame: GrayFrame, T: Similarity2D) -> GrayFrame:
    """Resample the frame under T; pixels mapped from outside the source are black"""
    values, _ = warp_with_mask(frame.as_float(), T)
    return GrayFrame.from_float(values)


def marker_transform(src: StentCandidate, dst: StentCandidate) -> Similarity2D:
    """Transform between two tracked pairs, using the marker order with the smaller rotation"""
    p, q = src.points
    straight = similarity_from_pairs((p, q), dst.points)
    swapped = similarity_from_pairs((q, p), dst.points)
    return straight if abs(straight.rotation) <= abs(swapped.rotation) else swapped


@dataclass(frozen=True, eq=False)
class EnhanceResult:
    frame: GrayFrame
    reference: int
    indices: tuple

    @property
    def used(self) -> int:
        return len(self.indices)


def default_reference(track) -> int:
    tracked = track.selected_frames()
    if not tracked:
        raise RegistrationError("track has no selected frames")
    return tracked[len(tracked) // 2]


def enhance(seq: Sequence, track, n: int = 7, reference: int = None) -> EnhanceResult:
    """
    Average the n tracked frames nearest the reference after registering
    their markers onto the reference markers

    With fewer than n tracked frames all of them are used; `used` on the
    result reports how many.
    """
    if n < 1:
        raise ValueError(f"need at least one frame to average, got {n}")
    if reference is None or reference < 0:
        reference = default_reference(track)
    if not 0 <= reference < len(seq) or reference >= len(track) or track[reference] is None:
        raise RegistrationError(f"reference frame {reference} has no tracked markers")
    target = track[reference].candidate
    tracked = [t for t in track.selected_frames() if t < len(seq)]
    indices = sorted(sorted(tracked, key=lambda t: (abs(t - reference), t))[:n])
    if len(indices) < n:
        log.warning("only %d tracked frames available for enhancement (asked for %d)", len(indices), n)

    total = np.zeros(seq.shape)
    weight = np.zeros(seq.shape)
    for t in indices:
        T = marker_transform(track[t].candidate, target)
        values, mask = warp_with_mask(seq.frames[t].as_float(), T)
        total += values
        weight += mask
    mean = np.divide(total, weight, out=np.zeros_like(total), where=weight > 0)
    log.info("enhanced frame %d from %d frames", reference, len(indices))
    return EnhanceResult(GrayFrame.from_float(mean), reference, tuple(indices))


def overlay_markers(frame: GrayFrame, candidate: StentCandidate, radius: int = 3,
                    value: int = 255) -> GrayFrame:
    """Copy of the frame with a cross burned in at each tracked marker"""
    image = np.array(frame.intensities)
    height, width = image.shape
    for p in candidate.points:
        col, row = int(math.floor(p.x + 0.5)), int(math.floor(p.y + 0.5))
        for d in range(-radius, radius + 1):
            if 0 <= row < height and 0 <= col + d < width:
                image[row, col + d] = value
            if 0 <= row + d < height and 0 <= col < width:
                image[row + d, col] = value
    return GrayFrame(image)
