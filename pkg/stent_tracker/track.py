"""
End-to-end stent tracking

A sequence is cut into overlapping clips. Each clip runs detection,
proposal, graph construction and the tracking head; the detector heatmap
is then corrected with the node probabilities and the clip is processed
again. Clip results are merged per (frame, candidate) and one stent is
selected per frame.

The Viterbi tracker and the two ablation baselines live here too.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from .core import Sequence, StentCandidate
from .detect import DetectorParams, LandmarkDetector, TophatDetector, correct_heatmap
from .errors import ConfigError
from .gcn import GcnParams, gcn_forward
from .graph import GraphConfig, StentGraph, build_graph, clip_windows
from .propose import MlpParams, ProposalConfig, classify_object, patch_descriptor, propose_candidates

log = logging.getLogger(__name__)

SELECTION_MODES = ("threshold-argmax", "top2-markers")

# Guards log(0) in the Viterbi objective
VITERBI_EPS = 1e-9


@dataclass(frozen=True)
class TrackEntry:
    candidate: StentCandidate
    probability: float


@dataclass(frozen=True)
class Track:
    """
    One optional TrackEntry per frame of the sequence

    Entries chosen by the tracker carry a probability at or above the
    selection threshold in both selection modes.
    """

    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @classmethod
    def empty(cls, n_frames: int) -> Track:
        return cls((None,) * n_frames)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, frame: int) -> Optional[TrackEntry]:
        return self.entries[frame]

    def selected_frames(self) -> list:
        return [t for t, e in enumerate(self.entries) if e is not None]

    def predictions(self) -> list:
        """Per-frame lists of predicted landmark pairs, for evaluation"""
        return [[] if e is None else [e.candidate.points] for e in self.entries]


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorParams = DetectorParams()
    proposal: ProposalConfig = ProposalConfig()
    graph: GraphConfig = GraphConfig()
    threshold: float = 0.6
    selection_mode: str = "threshold-argmax"
    correction_window: int = 9
    correction_passes: int = 1
    clip_length: int = 10
    clip_stride: int = 5
    classifier_threshold: float = 0.5
    # proposals the object classifier scores below this never enter the graph; 0 keeps all
    object_floor: float = 0.0
    jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("track.threshold", f"must be in (0, 1), got {self.threshold}")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError("track.selection_mode", f"must be one of {', '.join(SELECTION_MODES)}")
        if self.correction_window < 1 or self.correction_window % 2 == 0:
            raise ConfigError("track.correction_window", "must be a positive odd size")
        if self.correction_passes < 0:
            raise ConfigError("track.correction_passes", "must be >= 0")
        if self.clip_length < 2:
            raise ConfigError("track.clip_length", f"must be >= 2, got {self.clip_length}")
        if self.clip_stride < 1:
            raise ConfigError("track.clip_stride", "must be >= 1")
        if not 0.0 < self.classifier_threshold < 1.0:
            raise ConfigError("track.classifier_threshold", "must be in (0, 1)")
        if not 0.0 <= self.object_floor < 1.0:
            raise ConfigError("track.object_floor", f"must be in [0, 1), got {self.object_floor}")
        if self.jobs < 1:
            raise ConfigError("track.jobs", "must be >= 1")


@dataclass(frozen=True, eq=False)
class TrackerModels:
    gcn: GcnParams
    classifier: Optional[MlpParams] = None


@dataclass(frozen=True, eq=False)
class ClipResult:
    """Node probabilities of one processed clip"""

    start: int
    stop: int
    graph: StentGraph
    probabilities: np.ndarray
    detections: dict = field(default_factory=dict)


def candidate_key(candidate: StentCandidate) -> tuple:
    p, q = candidate.points
    return (candidate.frame, round(p.x, 2), round(p.y, 2), round(q.x, 2), round(q.y, 2))


def _clip_graph(seq: Sequence, start: int, stop: int, heatmaps: dict, detector: LandmarkDetector,
                cfg: PipelineConfig, classifier: MlpParams = None) -> tuple:
    detections, layers = {}, []
    for t in range(start, stop):
        dets = detector.peaks(heatmaps[t], t)
        detections[t] = dets
        layer = []
        for cand in propose_candidates(dets, cfg.proposal):
            features = patch_descriptor(seq.frames[t], cand, cfg.proposal)
            if cfg.object_floor > 0 and classify_object(features, classifier) < cfg.object_floor:
                continue
            layer.append((cand, features))
        layers.append(layer)
    graph = build_graph(layers, cfg.graph.alpha1, cfg.graph.alpha2)
    return graph, detections


def detection_support(graph: StentGraph, probs) -> dict:
    """Largest node probability of every landmark detection in the graph"""
    support = {}
    for node, p in zip(graph.nodes, probs):
        for det in node.candidate.landmarks:
            support[det] = max(support.get(det, 0.0), float(p))
    return support


def process_clip(seq: Sequence, start: int, stop: int, cfg: PipelineConfig, models: TrackerModels,
                 detector: LandmarkDetector = None) -> ClipResult:
    if cfg.object_floor > 0 and models.classifier is None:
        raise ConfigError("track.object_floor", "needs an object classifier in the models")
    detector = detector or TophatDetector(cfg.detector)
    heatmaps = {t: detector.heatmap(seq.frames[t]) for t in range(start, stop)}
    graph, detections = _clip_graph(seq, start, stop, heatmaps, detector, cfg, models.classifier)
    probs = gcn_forward(graph, models.gcn)
    for npass in range(cfg.correction_passes):
        support = detection_support(graph, probs)
        for t in range(start, stop):
            dets = detections[t]
            heatmaps[t] = correct_heatmap(heatmaps[t], dets, [support.get(d, 0.0) for d in dets],
                                          cfg.correction_window)
        graph, detections = _clip_graph(seq, start, stop, heatmaps, detector, cfg, models.classifier)
        probs = gcn_forward(graph, models.gcn)
        log.debug("clip %d-%d pass %d: %d nodes", start, stop, npass + 1, graph.num_nodes)
    return ClipResult(start, stop, graph, probs, detections)


def merge_clip_results(results) -> dict:
    """
    Merge overlapping clips into frame -> [(candidate, probability)]

    A candidate seen in several clips keeps its largest probability. The
    lists are sorted by candidate key, so the merge does not depend on
    the order the clips arrive in.
    """
    best = {}
    for result in results:
        for node, p in zip(result.graph.nodes, result.probabilities):
            key = candidate_key(node.candidate)
            entry = (float(p), node.candidate.score, node.candidate)
            if key not in best or entry[:2] > best[key][:2]:
                best[key] = entry
    merged = {}
    for key in sorted(best):
        p, _, cand = best[key]
        merged.setdefault(key[0], []).append((cand, p))
    return merged


def _select_threshold(options: list, threshold: float) -> Optional[TrackEntry]:
    if not options:
        return None
    # first maximum in key order
    k = int(np.argmax([p for _, p in options]))
    cand, p = options[k]
    return TrackEntry(cand, p) if p >= threshold else None


def _select_top2(options: list, threshold: float) -> Optional[TrackEntry]:
    support = {}
    for cand, p in options:
        for det in cand.landmarks:
            key = (round(det.position.x, 2), round(det.position.y, 2))
            prev = support.get(key)
            if prev is None or p > prev[0]:
                support[key] = (p, det)
    if len(support) < 2:
        return None
    ranked = sorted(support.items(), key=lambda kv: (-kv[1][0], kv[0]))
    (_, (p1, a)), (_, (p2, b)) = ranked[:2]
    p = min(p1, p2)
    return TrackEntry(StentCandidate.from_pair(a, b), p) if p >= threshold else None


def select_track(merged: dict, n_frames: int, cfg: PipelineConfig) -> Track:
    entries = []
    for t in range(n_frames):
        options = merged.get(t, [])
        if cfg.selection_mode == "top2-markers":
            entries.append(_select_top2(options, cfg.threshold))
        else:
            entries.append(_select_threshold(options, cfg.threshold))
    return Track(entries)


def track_sequence(seq: Sequence, cfg: PipelineConfig, models: TrackerModels,
                   detector: LandmarkDetector = None) -> Track:
    """Run the full pipeline over every clip of a sequence and pick one stent per frame"""
    n = len(seq)
    if n == 0:
        return Track()
    windows = clip_windows(n, cfg.clip_length, cfg.clip_stride)

    def run(window):
        return process_clip(seq, window[0], window[1], cfg, models, detector)

    if cfg.jobs > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(run, windows))
    else:
        results = [run(w) for w in windows]
    track = select_track(merge_clip_results(results), n, cfg)
    log.info("tracked %s: %d/%d frames selected over %d clips",
             seq.name or "sequence", len(track.selected_frames()), n, len(windows))
    return track


def detection_only_predictions(seq: Sequence, cfg: PipelineConfig,
                               detector: LandmarkDetector = None) -> Track:
    """Baseline: pair the two strongest detections of each frame"""
    detector = detector or TophatDetector(cfg.detector)
    entries = []
    for t, frame in enumerate(seq.frames):
        dets = sorted(detector.detect(frame, t), key=lambda d: -d.score)
        if len(dets) < 2:
            entries.append(None)
            continue
        cand = StentCandidate.from_pair(dets[0], dets[1])
        entries.append(TrackEntry(cand, cand.score))
    return Track(entries)


def detection_classifier_predictions(seq: Sequence, cfg: PipelineConfig, classifier: MlpParams,
                                     detector: LandmarkDetector = None) -> Track:
    """Baseline: the proposal the object classifier likes best, if it clears the threshold"""
    detector = detector or TophatDetector(cfg.detector)
    entries = []
    for t, frame in enumerate(seq.frames):
        best = None
        for cand in propose_candidates(detector.detect(frame, t), cfg.proposal):
            p = classify_object(patch_descriptor(frame, cand, cfg.proposal), classifier)
            if best is None or p > best.probability:
                best = TrackEntry(cand, p)
        if best is not None and best.probability < cfg.classifier_threshold:
            best = None
        entries.append(best)
    return Track(entries)


def _chains(frames: list) -> list:
    chains = []
    for f in frames:
        if chains and f == chains[-1][-1] + 1:
            chains[-1].append(f)
        else:
            chains.append([f])
    return chains


def _edge_matrix(lookup: dict, prev: list, cur: list) -> np.ndarray:
    return np.array([[lookup.get((min(i, j), max(i, j)), 0.0) for j in cur] for i in prev])


def path_objective(graph: StentGraph, scores, path: list) -> float:
    """Sum of log node scores and log edge weights along a one-node-per-frame path"""
    scores = np.asarray(scores, dtype=float)
    lookup = graph.edge_lookup()
    total = 0.0
    for k, node in enumerate(path):
        if k:
            prev = path[k - 1]
            w = lookup.get((min(prev, node), max(prev, node)), 0.0)
            total += math.log(w + VITERBI_EPS)
        total += math.log(max(scores[node], VITERBI_EPS))
    return total


def viterbi_path(graph: StentGraph, scores) -> list:
    """
    Best one-node-per-frame path by dynamic programming

    Frames without nodes split the trellis into independent chains; the
    returned node indices cover every frame that has nodes. Ties go to
    the lower node index.
    """
    scores = np.asarray(scores, dtype=float)
    if graph.num_nodes == 0:
        return []
    if len(scores) != graph.num_nodes:
        raise ValueError(f"{len(scores)} scores for {graph.num_nodes} nodes")
    lookup = graph.edge_lookup()
    groups = graph.nodes_by_frame()
    log_scores = np.log(np.maximum(scores, VITERBI_EPS))

    path = []
    for chain in _chains(sorted(groups)):
        layers = [groups[f] for f in chain]
        value = log_scores[layers[0]]
        back = []
        for prev, cur in zip(layers, layers[1:]):
            total = value[:, None] + np.log(_edge_matrix(lookup, prev, cur) + VITERBI_EPS)
            arg = np.argmax(total, axis=0)
            value = total[arg, np.arange(len(cur))] + log_scores[cur]
            back.append(arg)
        k = int(np.argmax(value))
        picked = [layers[-1][k]]
        for arg, layer in zip(reversed(back), reversed(layers[:-1])):
            k = int(arg[k])
            picked.append(layer[k])
        path.extend(reversed(picked))
    return path


def brute_force_path(graph: StentGraph, scores) -> list:
    """Exhaustive counterpart of viterbi_path for small graphs"""
    groups = graph.nodes_by_frame()
    path = []
    for chain in _chains(sorted(groups)):
        layers = [groups[f] for f in chain]
        best = max(product(*layers), key=lambda p: path_objective(graph, scores, list(p)))
        path.extend(best)
    return path


def viterbi_track(graph: StentGraph, scores, n_frames: int = None) -> Track:
    """Track from the Viterbi path; frames without nodes stay empty"""
    scores = np.asarray(scores, dtype=float)
    if graph.num_nodes == 0:
        return Track.empty(n_frames or 0)
    if n_frames is None:
        n_frames = int(graph.frames().max()) + 1
    entries = [None] * n_frames
    for node in viterbi_path(graph, scores):
        entries[graph.nodes[node].frame] = TrackEntry(graph.nodes[node].candidate, float(scores[node]))
    return Track(entries)
