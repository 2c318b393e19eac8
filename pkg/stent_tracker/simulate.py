"""
Synthetic fluoroscopy generator

Renders a balloon-marker pair with a textured stent band between the
markers, moving with a cardiac plus a respiratory sinusoid, over a flat
background with static marker-like clutter and Gaussian pixel noise.
Each sequence draws its clutter count from [clutter_min, clutter_blobs].
In a `band_dropout` share of frames the stent band is not visible, so
only the markers tell the stent apart from clutter pairs.
Every output is a pure function of the SimConfig (including its seed).
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import GrayFrame, GroundTruth, LandmarkDetection, Point2, Sequence
from .errors import ConfigError, TrajectoryError

log = logging.getLogger(__name__)

# Beta parameters for simulated detection scores
TRUE_SCORE_BETA = (8.0, 2.0)
FALSE_SCORE_BETA = (4.0, 4.0)

# Spatial period of the alternating stent mesh, in pixels along the stent axis
MESH_PERIOD = 4.0


@dataclass(frozen=True)
class SimConfig:
    frames: int = 10
    width: int = 128
    height: int = 128
    cardiac_amplitude: float = 6.0
    cardiac_frequency: float = 0.1
    respiratory_amplitude: float = 3.0
    respiratory_frequency: float = 0.02
    marker_sigma: float = 1.5
    marker_depth: float = 80.0
    stent_contrast: float = 14.0
    stent_length: float = 40.0
    band_sigma: float = 2.0
    background: float = 170.0
    clutter_blobs: int = 2
    clutter_min: int = 0
    band_dropout: float = 0.3
    fp_rate: float = 2.0
    jitter_sigma: float = 0.5
    miss_probability: float = 0.05
    noise_sigma: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("sim.frames", f"must be >= 1, got {self.frames}")
        if self.width < 8 or self.height < 8:
            raise ConfigError("sim.width", f"frame must be at least 8x8, got {self.width}x{self.height}")
        for name in ("cardiac_frequency", "respiratory_frequency"):
            value = getattr(self, name)
            if not 0.0 <= value < 0.5:
                raise ConfigError(f"sim.{name}", f"must be in [0, 0.5) cycles/frame, got {value}")
        for name in ("cardiac_amplitude", "respiratory_amplitude", "jitter_sigma",
                     "noise_sigma", "fp_rate", "stent_contrast", "marker_depth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"sim.{name}", f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.miss_probability <= 1.0:
            raise ConfigError("sim.miss_probability", f"must be in [0, 1], got {self.miss_probability}")
        if self.marker_sigma <= 0 or self.band_sigma <= 0:
            raise ConfigError("sim.marker_sigma", "Gaussian widths must be positive")
        if self.stent_length <= 0:
            raise ConfigError("sim.stent_length", f"must be positive, got {self.stent_length}")
        if self.clutter_blobs < 0:
            raise ConfigError("sim.clutter_blobs", f"must be >= 0, got {self.clutter_blobs}")
        if not 0 <= self.clutter_min <= self.clutter_blobs:
            raise ConfigError("sim.clutter_min", f"must be in [0, clutter_blobs], got {self.clutter_min}")
        if not 0.0 <= self.band_dropout <= 1.0:
            raise ConfigError("sim.band_dropout", f"must be in [0, 1], got {self.band_dropout}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("sim.seed", f"must fit in 64 bits, got {self.seed}")


def _name_entropy(name: str) -> int:
    digest = hashlib.sha256(name.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """
    Independent random stream for one named entity

    Streams are keyed by (seed, name, index...), so adding a clutter blob
    or a frame never shifts the numbers another entity draws.
    """
    entropy = [int(seed), _name_entropy(name)] + [int(i) for i in index]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _motion_phases(config: SimConfig) -> np.ndarray:
    # cardiac x, cardiac y, respiratory x, respiratory y
    return stream(config.seed, "phases").uniform(0.0, 2.0 * math.pi, size=4)


def _orientation(config: SimConfig) -> float:
    return float(stream(config.seed, "orientation").uniform(0.0, math.pi))


def midpoint_trajectory(config: SimConfig) -> np.ndarray:
    """(frames, 2) array of stent midpoints from the two-sinusoid motion model"""
    t = np.arange(config.frames, dtype=float)
    phases = _motion_phases(config)
    cx = (config.width - 1) / 2.0
    cy = (config.height - 1) / 2.0
    ac, fc = config.cardiac_amplitude, config.cardiac_frequency
    ab, fb = config.respiratory_amplitude, config.respiratory_frequency
    x = cx + ac * np.sin(2 * np.pi * fc * t + phases[0]) + ab * np.sin(2 * np.pi * fb * t + phases[2])
    y = cy + ac * np.sin(2 * np.pi * fc * t + phases[1]) + ab * np.sin(2 * np.pi * fb * t + phases[3])
    return np.stack([x, y], axis=1)


def _marker_positions(config: SimConfig) -> np.ndarray:
    """(frames, 2, 2) array: frame, marker, (x, y)"""
    mid = midpoint_trajectory(config)
    theta = _orientation(config)
    half = 0.5 * config.stent_length * np.array([math.cos(theta), math.sin(theta)])
    markers = np.stack([mid - half, mid + half], axis=1)

    margin = 3.0 * config.marker_sigma
    xs, ys = markers[..., 0], markers[..., 1]
    if (xs.min() < margin or ys.min() < margin
            or xs.max() > config.width - 1 - margin or ys.max() > config.height - 1 - margin):
        raise TrajectoryError(
            "sim.cardiac_amplitude",
            "stent trajectory leaves the frame; reduce amplitudes or stent length, or enlarge the frame")
    return markers


def clutter_count(config: SimConfig) -> int:
    """Number of clutter blobs in the sequence, uniform over [clutter_min, clutter_blobs]"""
    if config.clutter_min == config.clutter_blobs:
        return config.clutter_blobs
    rng = stream(config.seed, "clutter-count")
    return int(rng.integers(config.clutter_min, config.clutter_blobs + 1))


def band_visible(config: SimConfig, t: int) -> bool:
    if config.band_dropout <= 0.0:
        return True
    return bool(stream(config.seed, "band-dropout", t).random() >= config.band_dropout)


def _clutter_positions(config: SimConfig) -> list:
    margin = 3.0 * config.marker_sigma
    blobs = []
    for k in range(clutter_count(config)):
        rng = stream(config.seed, "clutter", k)
        x = rng.uniform(margin, config.width - 1 - margin)
        y = rng.uniform(margin, config.height - 1 - margin)
        blobs.append(Point2(float(x), float(y)))
    return blobs


def simulate_ground_truth(config: SimConfig) -> GroundTruth:
    """Marker trajectory and clutter layout without rendering any frame"""
    markers = _marker_positions(config)
    pairs = tuple(
        (Point2(float(m[0, 0]), float(m[0, 1])), Point2(float(m[1, 0]), float(m[1, 1])))
        for m in markers
    )
    return GroundTruth(
        markers=pairs,
        present=(True,) * config.frames,
        clutter=tuple(_clutter_positions(config)),
    )


def _dip(xx, yy, center: Point2, sigma: float, depth: float) -> np.ndarray:
    r2 = (xx - center.x) ** 2 + (yy - center.y) ** 2
    return depth * np.exp(-r2 / (2.0 * sigma * sigma))


def _stent_band(xx, yy, a: Point2, b: Point2, config: SimConfig) -> np.ndarray:
    """Alternating-contrast mesh between the markers, kept clear of the marker dips"""
    axis = np.array([b.x - a.x, b.y - a.y])
    length = float(np.hypot(*axis))
    u = axis / length
    s = (xx - a.x) * u[0] + (yy - a.y) * u[1]
    q = -(xx - a.x) * u[1] + (yy - a.y) * u[0]
    edge = 3.0 * config.marker_sigma + 1.0
    inside = (s >= edge) & (s <= length - edge)
    mesh = 0.4 + 0.3 * (1.0 + np.cos(2.0 * np.pi * s / MESH_PERIOD))
    across = np.exp(-q * q / (2.0 * config.band_sigma ** 2))
    return np.where(inside, config.stent_contrast * mesh * across, 0.0)


def render_frame(config: SimConfig, pair: tuple, clutter: list, t: int) -> GrayFrame:
    yy, xx = np.mgrid[0:config.height, 0:config.width].astype(float)
    image = np.full((config.height, config.width), config.background, dtype=float)
    a, b = pair
    if band_visible(config, t):
        image -= _stent_band(xx, yy, a, b, config)
    for center in (a, b, *clutter):
        image -= _dip(xx, yy, center, config.marker_sigma, config.marker_depth)
    if config.noise_sigma > 0:
        image += stream(config.seed, "noise", t).normal(0.0, config.noise_sigma, size=image.shape)
    return GrayFrame.from_float(image)


def simulate_sequence(config: SimConfig) -> tuple:
    """
    Render a full synthetic sequence

    Returns:
        (Sequence, GroundTruth); the Sequence carries the same ground truth.
    """
    gt = simulate_ground_truth(config)
    clutter = list(gt.clutter)
    frames = [render_frame(config, gt.markers[t], clutter, t) for t in range(config.frames)]
    log.debug("rendered %d frames (%dx%d) with %d clutter blobs, seed %d",
              config.frames, config.width, config.height, len(clutter), config.seed)
    return Sequence(frames=tuple(frames), ground_truth=gt, name=f"sim-{config.seed}"), gt


def simulate_detections(gt: GroundTruth, config: SimConfig) -> list:
    """
    Noisy per-frame detection lists derived from ground truth

    True markers are jittered and scored from Beta(8, 2) unless missed;
    a Poisson number of false positives per frame is scattered uniformly
    with Beta(4, 4) scores.
    """
    detections = []
    for t in range(len(gt)):
        frame_dets = []
        pair = gt.pair(t)
        if pair is not None:
            for k, marker in enumerate(pair):
                rng = stream(config.seed, "marker-detection", t, k)
                if rng.random() < config.miss_probability:
                    continue
                x, y = marker.x, marker.y
                if config.jitter_sigma > 0:
                    dx, dy = rng.normal(0.0, config.jitter_sigma, size=2)
                    x, y = x + dx, y + dy
                score = float(np.clip(rng.beta(*TRUE_SCORE_BETA), 0.0, 1.0))
                frame_dets.append(LandmarkDetection(Point2(float(x), float(y)), score, t))
        rng = stream(config.seed, "false-positives", t)
        count = int(rng.poisson(config.fp_rate)) if config.fp_rate > 0 else 0
        for _ in range(count):
            x = rng.uniform(0.0, config.width - 1)
            y = rng.uniform(0.0, config.height - 1)
            score = float(np.clip(rng.beta(*FALSE_SCORE_BETA), 0.0, 1.0))
            frame_dets.append(LandmarkDetection(Point2(float(x), float(y)), score, t))
        detections.append(frame_dets)
    return detections
