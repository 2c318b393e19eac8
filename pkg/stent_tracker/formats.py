"""
On-disk formats

Frames are 8-bit binary PGM files named frame_0000.pgm, frame_0001.pgm,
... inside a sequence directory, next to gt.jsonl when ground truth is
known. Detections, ground truth and tracks are JSON-lines with one record
per line and a fixed key order.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .core import GrayFrame, GroundTruth, LandmarkDetection, Point2, Sequence, StentCandidate
from .errors import FormatError
from .gcn import GcnParams
from .propose import MlpParams
from .track import Track, TrackEntry, TrackerModels

log = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:04d}.pgm"
GT_FILE = "gt.jsonl"
DETECTIONS_FILE = "detections.jsonl"
TRACK_FILE = "track.jsonl"
CLASSIFIER_FILE = "classifier.mlp"
GCN_FILE = "tracker.gcn"


def write_pgm(path, frame: GrayFrame) -> None:
    # a 2D uint8 array maps to Pillow mode "L", which the PPM plugin writes as P5
    Image.fromarray(np.ascontiguousarray(frame.intensities, dtype=np.uint8)).save(path, format="PPM")


def read_pgm(path) -> GrayFrame:
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "L":
                raise FormatError(path, "header", f"expected an 8-bit grayscale PGM, got {img.format} {img.mode}")
            return GrayFrame(np.array(img, dtype=np.uint8))
    except UnidentifiedImageError:
        raise FormatError(path, "header", "not a PGM image") from None


def frame_paths(directory) -> list:
    return sorted(Path(directory).glob("frame_*.pgm"))


def is_sequence_dir(path) -> bool:
    return Path(path).is_dir() and bool(frame_paths(path))


def write_sequence(directory, seq: Sequence) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for t, frame in enumerate(seq.frames):
        path = Path(directory) / FRAME_PATTERN.format(t)
        write_pgm(path, frame)
        paths.append(path)
    if seq.ground_truth is not None:
        write_ground_truth(Path(directory) / GT_FILE, seq.ground_truth)
    return paths


def read_sequence(directory) -> Sequence:
    paths = frame_paths(directory)
    if not paths:
        raise FormatError(directory, "frames", "no frame_*.pgm files")
    frames = tuple(read_pgm(p) for p in paths)
    gt_path = Path(directory) / GT_FILE
    gt = read_ground_truth(gt_path, len(frames)) if gt_path.exists() else None
    return Sequence(frames, gt, name=Path(directory).name)


def _write_records(path, records) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def _read_records(path) -> list:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(path, f"line {lineno}", exc.msg) from None
    return records


def _point(record: dict, key: str, path) -> Point2:
    try:
        x, y = record[key]
        return Point2(float(x), float(y))
    except KeyError:
        raise FormatError(path, key, f"missing in frame {record.get('frame')}") from None
    except (TypeError, ValueError):
        raise FormatError(path, key, "expected [x, y]") from None


def _frame_index(record: dict, path, n_frames) -> int:
    t = record.get("frame")
    if not isinstance(t, int) or t < 0 or (n_frames is not None and t >= n_frames):
        raise FormatError(path, "frame", f"bad frame index {t!r}")
    return t


def _marker_pair(record: dict, path):
    if "markers" not in record:
        raise FormatError(path, "markers", f"missing in frame {record.get('frame')}")
    value = record["markers"]
    if value is None:
        return None
    try:
        (x1, y1), (x2, y2) = value
        return Point2(float(x1), float(y1)), Point2(float(x2), float(y2))
    except (TypeError, ValueError):
        raise FormatError(path, "markers", "expected [[x1, y1], [x2, y2]]") from None


def write_ground_truth(path, gt: GroundTruth) -> None:
    """One {"frame", "markers", "present"} record per frame; markers is null when unknown"""
    records = []
    for t, (pair, flag) in enumerate(zip(gt.markers, gt.present)):
        value = None if pair is None else [[p.x, p.y] for p in pair]
        records.append({"frame": t, "markers": value, "present": bool(flag)})
    _write_records(path, records)


def read_ground_truth(path, n_frames: int = None) -> GroundTruth:
    records = _read_records(path)
    n = n_frames if n_frames is not None else len(records)
    markers, present = [None] * n, [False] * n
    for record in records:
        t = _frame_index(record, path, n)
        flag = record.get("present")
        if not isinstance(flag, bool):
            raise FormatError(path, "present", f"expected true or false in frame {t}")
        pair = _marker_pair(record, path)
        if flag and pair is None:
            raise FormatError(path, "markers", f"frame {t} is present but has no markers")
        markers[t], present[t] = pair, flag
    return GroundTruth(tuple(markers), tuple(present))


def write_detections(path, detections: list) -> None:
    records = []
    for frame_dets in detections:
        for d in frame_dets:
            records.append({"frame": d.frame, "x": d.position.x, "y": d.position.y, "score": d.score})
    _write_records(path, records)


def read_detections(path, n_frames: int) -> list:
    out = [[] for _ in range(n_frames)]
    for record in _read_records(path):
        t = _frame_index(record, path, n_frames)
        try:
            det = LandmarkDetection(Point2(float(record["x"]), float(record["y"])), float(record["score"]), t)
        except KeyError as exc:
            raise FormatError(path, exc.args[0], f"missing in frame {t}") from None
        except ValueError as exc:
            raise FormatError(path, "score", str(exc)) from None
        out[t].append(det)
    return out


def write_track(path, track: Track) -> None:
    records = []
    for t, entry in enumerate(track.entries):
        if entry is None:
            records.append({"frame": t, "none": True})
            continue
        p, q = entry.candidate.points
        records.append({"frame": t, "m1": [p.x, p.y], "m2": [q.x, q.y], "prob": entry.probability})
    _write_records(path, records)


def read_track(path, n_frames: int = None) -> Track:
    records = _read_records(path)
    n = n_frames if n_frames is not None else len(records)
    entries = [None] * n
    for record in records:
        t = _frame_index(record, path, n)
        if record.get("none"):
            continue
        try:
            prob = float(record["prob"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(path, "prob", f"missing or invalid in frame {t}") from None
        if not 0.0 <= prob <= 1.0:
            raise FormatError(path, "prob", f"{prob} outside [0, 1] in frame {t}")
        a = LandmarkDetection(_point(record, "m1", path), prob, t)
        b = LandmarkDetection(_point(record, "m2", path), prob, t)
        entries[t] = TrackEntry(StentCandidate.from_pair(a, b), prob)
    return Track(entries)


def save_models(directory, models: TrackerModels) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = [Path(directory) / GCN_FILE]
    paths[0].write_text(models.gcn.dumps())
    if models.classifier is not None:
        paths.append(Path(directory) / CLASSIFIER_FILE)
        paths[1].write_text(models.classifier.dumps())
    return paths


def load_models(directory) -> TrackerModels:
    gcn_path = Path(directory) / GCN_FILE
    if not gcn_path.exists():
        raise FormatError(gcn_path, "file", "tracking head parameters not found")
    gcn = GcnParams.loads(gcn_path.read_text(), str(gcn_path))
    mlp_path = Path(directory) / CLASSIFIER_FILE
    classifier = MlpParams.loads(mlp_path.read_text(), str(mlp_path)) if mlp_path.exists() else None
    return TrackerModels(gcn, classifier)


def write_table(path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path)
