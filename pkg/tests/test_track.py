from dataclasses import replace

import numpy as np
import pytest

from stent_tracker.config import Settings
from stent_tracker.core import LandmarkDetection
from stent_tracker.detect import Heatmap
from stent_tracker.errors import ConfigError
from stent_tracker.evaluate import detection_metrics, localization_metrics, match_predictions
from stent_tracker.gcn import DESK_DIMS, GcnParams
from stent_tracker.graph import GraphNode, StentGraph
from stent_tracker.propose import MlpParams
from stent_tracker.simulate import simulate_sequence
from stent_tracker.track import (
    ClipResult,
    PipelineConfig,
    Track,
    TrackerModels,
    brute_force_path,
    detection_classifier_predictions,
    detection_only_predictions,
    merge_clip_results,
    path_objective,
    select_track,
    track_sequence,
    viterbi_path,
    viterbi_track,
)
from stent_tracker.training import train_on_sequences

from conftest import cand, random_graph


class OracleDetector:
    """Reports exactly the true markers of every frame"""

    def __init__(self, gt):
        self.gt = gt

    def heatmap(self, frame):
        return Heatmap(np.zeros(frame.shape))

    def peaks(self, hm, index=0):
        pair = self.gt.pair(index)
        if pair is None:
            return []
        return [LandmarkDetection(p, 0.9, index) for p in pair]

    def detect(self, frame, index=0):
        return self.peaks(self.heatmap(frame), index)


class BlindDetector(OracleDetector):
    def __init__(self):
        super().__init__(None)

    def peaks(self, hm, index=0):
        return []


def confident_models(bias=5.0):
    arrays = GcnParams.zeros(DESK_DIMS).arrays()
    arrays["head_b"] = np.array([bias])
    return TrackerModels(GcnParams(**arrays))


def constant_classifier(positive_logit, input_dim=72, hidden=4):
    return MlpParams(w1=np.zeros((hidden, input_dim)), b1=np.zeros(hidden),
                     w2=np.zeros((2, hidden)), b2=np.array([-positive_logit, positive_logit]))


def layered(frames, edges):
    """Graph with one node per entry of `frames` and ((i, j), weight) edges"""
    nodes = [GraphNode(t, cand(10 + 3 * k, 10, 40 + 3 * k, 12, 0.5, t), np.zeros(1))
             for k, t in enumerate(frames)]
    pairs = [e for e, _ in edges]
    return StentGraph(nodes, np.array(pairs, dtype=int).reshape(-1, 2), [w for _, w in edges])


def test_viterbi_matches_brute_force():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        graph = random_graph(rng, max_nodes=10, feature_dim=1, frames=int(rng.integers(1, 5)))
        scores = rng.uniform(0.01, 1.0, size=graph.num_nodes)
        best = viterbi_path(graph, scores)
        exhaustive = brute_force_path(graph, scores)
        assert len(best) == len(exhaustive)
        assert path_objective(graph, scores, best) == pytest.approx(
            path_objective(graph, scores, exhaustive), abs=1e-9)


def test_viterbi_hand_case():
    graph = layered([0, 0, 1, 1],
                    [((0, 2), 0.1), ((0, 3), 0.9), ((1, 2), 0.9), ((1, 3), 0.1)])
    scores = [0.9, 0.1, 0.2, 0.8]
    assert viterbi_path(graph, scores) == [0, 3]
    track = viterbi_track(graph, scores)
    assert len(track) == 2
    assert track[0].candidate == graph.nodes[0].candidate
    assert track[1].probability == pytest.approx(0.8)


def test_viterbi_ties_go_to_lowest_index():
    graph = layered([0, 0, 1, 1],
                    [((0, 2), 0.5), ((0, 3), 0.5), ((1, 2), 0.5), ((1, 3), 0.5)])
    assert viterbi_path(graph, [0.5] * 4) == [0, 2]


def test_viterbi_follows_strong_chain():
    rng = np.random.default_rng(2)
    nodes, edges, weights = [], [], []
    for t in range(5):
        for k in range(3):
            nodes.append(GraphNode(t, cand(10 + k * 20, 10, 30 + k * 20, 10, 0.5, t), np.zeros(1)))
    for t in range(4):
        for a in range(3):
            for b in range(3):
                edges.append((3 * t + a, 3 * (t + 1) + b))
                weights.append(0.95 if a == b == 1 else rng.uniform(0.05, 0.3))
    graph = StentGraph(nodes, edges, weights)
    assert viterbi_path(graph, np.full(15, 0.5)) == [1, 4, 7, 10, 13]


def test_viterbi_empty_graph():
    graph = StentGraph([], np.zeros((0, 2), dtype=int), [])
    assert viterbi_path(graph, []) == []
    assert len(viterbi_track(graph, [], n_frames=3)) == 3


def clip(frame_candidates, probs, start=0, stop=2):
    nodes = [GraphNode(c.frame, c, np.zeros(1)) for c in frame_candidates]
    graph = StentGraph(nodes, np.zeros((0, 2), dtype=int), [])
    return ClipResult(start, stop, graph, np.asarray(probs, dtype=float))


def test_merge_keeps_best_probability_in_any_order():
    a = cand(10, 10, 40, 10, 0.8, 0)
    b = cand(15, 30, 45, 30, 0.6, 1)
    c = cand(20, 20, 50, 22, 0.7, 1)
    first = clip([a, b], [0.4, 0.7])
    second = clip([b, c, a], [0.9, 0.2, 0.1], start=1, stop=3)
    merged = merge_clip_results([first, second])
    assert merged == merge_clip_results([second, first])
    probs = {cd: p for options in merged.values() for cd, p in options}
    assert probs[a] == pytest.approx(0.4)
    assert probs[b] == pytest.approx(0.9)
    assert probs[c] == pytest.approx(0.2)


def test_raising_threshold_never_adds_selections():
    rng = np.random.default_rng(0)
    merged = {}
    for t in range(20):
        merged[t] = [(cand(10 + k * 5, 10, 40 + k * 5, 10, 0.5, t), float(rng.uniform()))
                     for k in range(int(rng.integers(0, 4)))]
    previous = None
    for threshold in (0.1, 0.3, 0.5, 0.7, 0.9):
        selected = set(select_track(merged, 20, PipelineConfig(threshold=threshold)).selected_frames())
        if previous is not None:
            assert selected <= previous
        previous = selected


def test_threshold_selection_picks_argmax():
    low, high = cand(10, 10, 40, 10, 0.5, 0), cand(12, 20, 44, 20, 0.5, 0)
    track = select_track({0: [(low, 0.3), (high, 0.8)]}, 2, PipelineConfig(threshold=0.6))
    assert track[0].candidate == high
    assert track[1] is None
    assert select_track({0: [(low, 0.3)]}, 1, PipelineConfig(threshold=0.6))[0] is None


def test_top2_markers_mode():
    a, b, c = (10, 10), (40, 10), (70, 12)
    options = [(cand(*a, *b, 0.5, 0), 0.9), (cand(*b, *c, 0.5, 0), 0.4), (cand(*a, *c, 0.5, 0), 0.7)]
    track = select_track({0: options}, 1, PipelineConfig(selection_mode="top2-markers"))
    points = {(p.x, p.y) for p in track[0].candidate.points}
    assert points == {a, b}
    assert track[0].probability == pytest.approx(0.9)


def test_top2_markers_mode_respects_threshold():
    a, b, c = (10, 10), (40, 10), (70, 12)
    options = [(cand(*a, *b, 0.5, 0), 0.5), (cand(*b, *c, 0.5, 0), 0.45)]
    strict = PipelineConfig(selection_mode="top2-markers", threshold=0.6)
    assert select_track({0: options}, 1, strict)[0] is None
    loose = select_track({0: options}, 1, replace(strict, threshold=0.4))
    assert loose[0].probability == pytest.approx(0.5)


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(threshold=1.5)
    with pytest.raises(ConfigError):
        PipelineConfig(selection_mode="nearest")
    with pytest.raises(ConfigError):
        PipelineConfig(correction_window=4)


def test_blind_detector_gives_empty_track(noiseless_sim):
    seq, _ = simulate_sequence(noiseless_sim)
    track = track_sequence(seq, PipelineConfig(), confident_models(), BlindDetector())
    assert len(track) == len(seq)
    assert track.selected_frames() == []


def test_perfect_information_tracks_every_frame(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    track = track_sequence(seq, PipelineConfig(), confident_models(), OracleDetector(gt))
    result = match_predictions(track, gt)
    metrics = detection_metrics(result)
    assert metrics.precision == metrics.recall == metrics.f1 == 1.0
    assert localization_metrics(result).mae < 0.5


def test_low_confidence_model_selects_nothing(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    track = track_sequence(seq, PipelineConfig(), confident_models(-5.0), OracleDetector(gt))
    assert track.selected_frames() == []


def test_correction_and_jobs_do_not_change_oracle_track(noiseless_sim):
    seq, gt = simulate_sequence(replace(noiseless_sim, frames=14))
    cfg = PipelineConfig(clip_length=6, clip_stride=3)
    base = track_sequence(seq, cfg, confident_models(), OracleDetector(gt))
    no_correction = track_sequence(seq, replace(cfg, correction_passes=0), confident_models(), OracleDetector(gt))
    threaded = track_sequence(seq, replace(cfg, jobs=3), confident_models(), OracleDetector(gt))
    assert base == no_correction == threaded
    assert len(base.selected_frames()) == 14


def test_detection_only_baseline(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    track = detection_only_predictions(seq, PipelineConfig(), OracleDetector(gt))
    assert detection_metrics(match_predictions(track, gt)).f1 == 1.0


def test_detection_classifier_baseline(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    sure = detection_classifier_predictions(seq, PipelineConfig(), constant_classifier(5.0), OracleDetector(gt))
    assert len(sure.selected_frames()) == len(seq)
    unsure = detection_classifier_predictions(seq, PipelineConfig(), constant_classifier(-5.0), OracleDetector(gt))
    assert unsure.selected_frames() == []


def test_track_predictions_shape():
    c = cand(10, 10, 40, 12, 0.5, 0)
    track = Track([None, None])
    assert track.predictions() == [[], []]
    assert Track.empty(3).selected_frames() == []
    assert viterbi_track(layered([0], []), [0.7], n_frames=2).predictions()[0] == [c.points]


def test_object_floor_drops_weak_proposals(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    # a constant logit of 1 scores every proposal at about 0.88
    models = TrackerModels(confident_models().gcn, constant_classifier(1.0))
    unfiltered = track_sequence(seq, PipelineConfig(), models, OracleDetector(gt))
    below = track_sequence(seq, PipelineConfig(object_floor=0.5), models, OracleDetector(gt))
    above = track_sequence(seq, PipelineConfig(object_floor=0.95), models, OracleDetector(gt))
    assert len(unfiltered.selected_frames()) == len(seq)
    assert below == unfiltered
    assert above.selected_frames() == []


def test_object_floor_needs_a_classifier(noiseless_sim):
    seq, gt = simulate_sequence(noiseless_sim)
    with pytest.raises(ConfigError) as info:
        track_sequence(seq, PipelineConfig(object_floor=0.5), confident_models(), OracleDetector(gt))
    assert info.value.key == "track.object_floor"
    for bad in (-0.1, 1.0):
        with pytest.raises(ConfigError):
            PipelineConfig(object_floor=bad)


@pytest.mark.slow
def test_trained_pipeline_tracks_clean_sequence(noiseless_sim):
    settings = Settings()
    corpus = [simulate_sequence(replace(settings.sim, seed=1000 + i))[0] for i in range(20)]
    trained = train_on_sequences(corpus, settings.pipeline(), settings.train, settings.gcn)
    seq, gt = simulate_sequence(noiseless_sim)
    track = track_sequence(seq, settings.pipeline(), trained.models)
    result = match_predictions(track, gt)
    metrics = detection_metrics(result)
    assert metrics.precision == metrics.recall == metrics.f1 == 1.0
    assert localization_metrics(result).mae < 0.5
