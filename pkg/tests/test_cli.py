import json

import pandas as pd
import pytest

from stent_tracker import formats
from stent_tracker.cli import run, run_ablation, sequence_dirs
from stent_tracker.config import Settings
from stent_tracker.core import LandmarkDetection, StentCandidate
from stent_tracker.errors import FormatError
from stent_tracker.track import Track, TrackEntry

SMALL = ["--set", "sim.frames=6", "--set", "sim.width=96", "--set", "sim.height=96",
         "--set", "sim.stent_length=30", "--set", "sim.cardiac_amplitude=4"]


def simulate(out, *extra):
    assert run(["simulate", "--out", str(out), *SMALL, *extra]) == 0


def gt_track(gt):
    entries = []
    for t in range(len(gt)):
        pair = gt.pair(t)
        if pair is None:
            entries.append(None)
            continue
        a, b = (LandmarkDetection(p, 1.0, t) for p in pair)
        entries.append(TrackEntry(StentCandidate.from_pair(a, b), 1.0))
    return Track(entries)


def output_files(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and not p.name.endswith(".manifest.json")}


def test_simulate_is_reproducible(tmp_path):
    simulate(tmp_path / "a", "--sequences", "2", "--detections", "--seed", "4")
    simulate(tmp_path / "b", "--sequences", "2", "--detections", "--seed", "4")
    first, second = output_files(tmp_path / "a"), output_files(tmp_path / "b")
    assert first == second
    names = {str(p) for p in first}
    assert "seq_001/frame_0005.pgm" in names and "seq_000/detections.jsonl" in names

    manifest = json.loads((tmp_path / "a" / "simulate.manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seeds"]["seq_001"] == 5
    assert "sim.seed=4" in manifest["config"]


def test_eval_of_ground_truth_track(tmp_path, capsys):
    simulate(tmp_path / "data")
    seq = formats.read_sequence(tmp_path / "data" / "seq_000")
    (tmp_path / "tracks" / "seq_000").mkdir(parents=True)
    formats.write_track(tmp_path / "tracks" / "seq_000" / formats.TRACK_FILE, gt_track(seq.ground_truth))

    code = run(["eval", str(tmp_path / "data"), "--tracks", str(tmp_path / "tracks"),
                "--out", str(tmp_path / "report")])
    assert code == 0
    report = json.loads((tmp_path / "report" / "metrics.json").read_text())
    assert report["precision"] == report["recall"] == report["f1"] == 1.0
    assert report["mae"] == 0.0
    assert "f1=1\n" in capsys.readouterr().out


def test_detect_and_enhance(tmp_path):
    simulate(tmp_path / "data")
    assert run(["detect", str(tmp_path / "data"), "--out", str(tmp_path / "dets")]) == 0
    assert (tmp_path / "dets" / "seq_000" / formats.DETECTIONS_FILE).exists()

    seq_dir = tmp_path / "data" / "seq_000"
    track_path = tmp_path / formats.TRACK_FILE
    formats.write_track(track_path, gt_track(formats.read_sequence(seq_dir).ground_truth))
    code = run(["enhance", str(seq_dir), "--track", str(track_path), "--frames", "3",
                "--out", str(tmp_path / "enh")])
    assert code == 0
    enhanced = formats.read_pgm(tmp_path / "enh" / "seq_000" / "enhanced.pgm")
    assert enhanced.shape == (96, 96)
    assert (tmp_path / "enh" / "seq_000" / "overlay.pgm").exists()
    assert (tmp_path / "enh" / "enhance.manifest.json").exists()


def test_unknown_setting_exits_2(tmp_path, capsys):
    code = run(["simulate", "--out", str(tmp_path), "--set", "sim.colour=blue"])
    assert code == 2
    assert "sim.colour" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert run(["simulate", "--out", str(tmp_path), "--config", str(tmp_path / "absent.cfg")]) == 2
    assert run(["track", str(tmp_path / "nowhere"), "--models", str(tmp_path), "--out", str(tmp_path)]) == 2
    assert "error: " in capsys.readouterr().err


def test_bad_usage_exits_2(tmp_path):
    assert run(["track", str(tmp_path)]) == 2
    assert run(["no-such-command"]) == 2


def test_sequence_dirs_expands_parents(tmp_path):
    simulate(tmp_path / "data", "--sequences", "2")
    dirs = sequence_dirs([tmp_path / "data"])
    assert [d.name for d in dirs] == ["seq_000", "seq_001"]
    assert sequence_dirs([tmp_path / "data" / "seq_001"]) == [tmp_path / "data" / "seq_001"]
    with pytest.raises(FormatError):
        sequence_dirs([tmp_path / "data" / "seq_000" / formats.GT_FILE])


QUICK_TRAINING = ["--set", "train.gcn_epochs=5", "--set", "train.classifier_epochs=5"]


@pytest.mark.slow
def test_train_then_track(tmp_path):
    simulate(tmp_path / "data", "--sequences", "2")
    assert run(["train", str(tmp_path / "data"), "--out", str(tmp_path / "models"), *QUICK_TRAINING]) == 0
    trace = pd.read_csv(tmp_path / "models" / "loss_trace.csv")
    assert set(trace["stage"]) == {"classifier", "joint"}
    assert (trace[trace["stage"] == "joint"]["epoch"].max()) == 5

    code = run(["track", str(tmp_path / "data"), "--models", str(tmp_path / "models"),
                "--out", str(tmp_path / "tracks"), "--jobs", "2"])
    assert code == 0
    track = formats.read_track(tmp_path / "tracks" / "seq_001" / formats.TRACK_FILE, 6)
    assert len(track) == 6


@pytest.mark.slow
def test_ablation_table(tmp_path):
    code = run(["ablate", "--out", str(tmp_path), *SMALL, *QUICK_TRAINING,
                "--set", "train.sequences=3", "--set", "eval.sequences=3"])
    assert code == 0
    table = pd.read_csv(tmp_path / "ablation.csv")
    assert list(table["method"]) == ["detection-only", "detection+classifier", "separate-learning", "full"]
    assert table["precision"].between(0, 1).all()
    assert json.loads((tmp_path / "ablation.json").read_text())[3]["method"] == "full"


@pytest.mark.slow
def test_train_and_track_are_byte_identical_across_runs(tmp_path):
    simulate(tmp_path / "data", "--sequences", "2")
    for name in ("a", "b"):
        assert run(["train", str(tmp_path / "data"), "--out", str(tmp_path / name / "models"),
                    "--jobs", "2", *QUICK_TRAINING]) == 0
        assert run(["track", str(tmp_path / "data"), "--models", str(tmp_path / name / "models"),
                    "--out", str(tmp_path / name / "tracks"), "--jobs", "2"]) == 0
    first, second = output_files(tmp_path / "a"), output_files(tmp_path / "b")
    assert first == second
    names = {p.name for p in first}
    assert {formats.GCN_FILE, formats.CLASSIFIER_FILE, "loss_trace.csv", formats.TRACK_FILE} <= names


@pytest.mark.slow
def test_default_ablation_ordering():
    table = run_ablation(Settings()).set_index("method")
    detection_only = table.loc["detection-only"]
    full = table.loc["full"]
    assert 0.4 <= detection_only["precision"] <= 0.7
    assert full["precision"] >= detection_only["precision"] + 0.10
    assert full["f1"] > detection_only["f1"]
    assert full["f1"] > table.loc["detection+classifier"]["f1"]
