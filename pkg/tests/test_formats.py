import json

import numpy as np
import pandas as pd
import pytest

from stent_tracker import formats
from stent_tracker.core import GrayFrame, GroundTruth, Point2
from stent_tracker.errors import FormatError
from stent_tracker.gcn import init_gcn_params
from stent_tracker.propose import init_mlp_params
from stent_tracker.simulate import simulate_detections, simulate_sequence
from stent_tracker.track import Track, TrackEntry, TrackerModels

from conftest import cand


def test_pgm_roundtrip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, size=(17, 23)).astype(np.uint8)
    path = tmp_path / "frame.pgm"
    formats.write_pgm(path, GrayFrame(image))
    assert path.read_bytes().startswith(b"P5")
    assert formats.read_pgm(path) == GrayFrame(image)


def test_read_pgm_rejects_other_files(tmp_path):
    path = tmp_path / "frame.pgm"
    path.write_text("not an image\n")
    with pytest.raises(FormatError):
        formats.read_pgm(path)


def test_sequence_roundtrip(tmp_path, small_sim):
    seq, gt = simulate_sequence(small_sim)
    directory = tmp_path / "seq_000"
    paths = formats.write_sequence(directory, seq)
    assert [p.name for p in paths[:2]] == ["frame_0000.pgm", "frame_0001.pgm"]
    assert formats.is_sequence_dir(directory)
    loaded = formats.read_sequence(directory)
    assert loaded.name == "seq_000"
    assert all(a == b for a, b in zip(loaded.frames, seq.frames))
    assert loaded.ground_truth.markers == gt.markers
    assert loaded.ground_truth.present == gt.present


def test_missing_frames(tmp_path):
    with pytest.raises(FormatError):
        formats.read_sequence(tmp_path)
    assert not formats.is_sequence_dir(tmp_path / "absent")


def test_ground_truth_with_absent_frames(tmp_path):
    gt = GroundTruth(markers=((Point2(1.5, 2.0), Point2(30.0, 4.25)), None), present=(True, False))
    path = tmp_path / formats.GT_FILE
    formats.write_ground_truth(path, gt)
    first, second = (json.loads(line) for line in path.read_text().splitlines())
    assert first == {"frame": 0, "markers": [[1.5, 2.0], [30.0, 4.25]], "present": True}
    assert second == {"frame": 1, "markers": None, "present": False}
    assert formats.read_ground_truth(path) == gt


def test_ground_truth_errors(tmp_path):
    path = tmp_path / formats.GT_FILE
    path.write_text('{"frame": 0, "markers": [[1, 2]], "present": true}\n')
    with pytest.raises(FormatError) as info:
        formats.read_ground_truth(path)
    assert info.value.field == "markers"
    path.write_text('{"frame": 0, "markers": [[1, 2], [30, 2]]}\n')
    with pytest.raises(FormatError) as info:
        formats.read_ground_truth(path)
    assert info.value.field == "present"
    path.write_text('{"frame": 0, "markers": null, "present": true}\n')
    with pytest.raises(FormatError) as info:
        formats.read_ground_truth(path)
    assert info.value.field == "markers"
    path.write_text('{"frame": 5, "markers": null, "present": false}\n')
    with pytest.raises(FormatError):
        formats.read_ground_truth(path, n_frames=2)
    path.write_text("{broken\n")
    with pytest.raises(FormatError):
        formats.read_ground_truth(path)


def test_detections_roundtrip(tmp_path, small_sim):
    _, gt = simulate_sequence(small_sim)
    detections = simulate_detections(gt, small_sim)
    path = tmp_path / formats.DETECTIONS_FILE
    formats.write_detections(path, detections)
    assert formats.read_detections(path, len(gt)) == detections


def test_track_roundtrip(tmp_path):
    track = Track([TrackEntry(cand(10.5, 20, 50, 22.25, 0.8, 0), 0.8), None,
                   TrackEntry(cand(11, 20, 51, 23, 0.7, 2), 0.7)])
    path = tmp_path / formats.TRACK_FILE
    formats.write_track(path, track)
    loaded = formats.read_track(path, 3)
    assert loaded.selected_frames() == [0, 2]
    assert loaded[0].candidate.points == track[0].candidate.points
    assert loaded[2].probability == 0.7


def test_track_probability_checked(tmp_path):
    path = tmp_path / formats.TRACK_FILE
    path.write_text('{"frame": 0, "m1": [1, 2], "m2": [30, 2], "prob": 1.5}\n')
    with pytest.raises(FormatError) as info:
        formats.read_track(path)
    assert info.value.field == "prob"


def test_models_roundtrip(tmp_path):
    models = TrackerModels(init_gcn_params(seed=1), init_mlp_params(72, 8, seed=2))
    formats.save_models(tmp_path, models)
    loaded = formats.load_models(tmp_path)
    np.testing.assert_array_equal(loaded.gcn.to_vector(), models.gcn.to_vector())
    np.testing.assert_array_equal(loaded.classifier.w1, models.classifier.w1)
    assert loaded.classifier.class_weights == models.classifier.class_weights


def test_missing_models(tmp_path):
    with pytest.raises(FormatError):
        formats.load_models(tmp_path)


def test_table_roundtrip(tmp_path):
    table = pd.DataFrame({"stage": ["joint", "joint"], "epoch": [0, 1], "loss": [0.1, 1 / 3]})
    path = tmp_path / "loss_trace.csv"
    formats.write_table(path, table)
    pd.testing.assert_frame_equal(formats.read_table(path), table)
