"""
Command-line front end

    python3 stent_cli.py simulate --out data --sequences 5 --detections
    python3 stent_cli.py train data --out models
    python3 stent_cli.py track data --models models --out tracks
    python3 stent_cli.py eval data --tracks tracks --out report
    python3 stent_cli.py enhance data/seq_000 --track tracks/seq_000/track.jsonl --out enhanced
    python3 stent_cli.py ablate --out ablation

Every run writes <command>.manifest.json into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import pandas as pd

from . import __version__, config, formats
from .detect import TophatDetector
from .enhance import enhance, overlay_markers
from .errors import ConfigError, FormatError, StentTrackerError
from .evaluate import evaluate_sequences, format_report, metrics_report, report_json
from .simulate import simulate_detections, simulate_sequence
from .track import (
    detection_classifier_predictions,
    detection_only_predictions,
    track_sequence,
)
from .training import collect_training_clips, train_models, train_on_sequences

log = logging.getLogger(__name__)

LOG_ENV = "STENT_TRACKER_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# Ablation training corpus seeds are offset from the test corpus seeds
TRAIN_SEED_OFFSET = 1000


@dataclass
class RunManifest:
    command: str
    argv: list
    config: list
    seeds: dict
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    duration: float = 0.0

    def write(self, directory) -> Path:
        path = Path(directory) / f"{self.command}.manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def setup_logging():
    name = os.environ.get(LOG_ENV, "info").strip().lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if name not in LOG_LEVELS:
        log.warning("unknown %s=%r, using info", LOG_ENV, name)


def parse_arguments(argv=None):
    """Parse command line arguments"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, help="overrides sim.seed and train.seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=1, help="sequences processed in parallel")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")

    parser = argparse.ArgumentParser(description="Landmark-pair stent tracking on fluoroscopy sequences")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render synthetic sequences with ground truth")
    p.add_argument("--sequences", type=int, default=1, help="number of sequences (seeds seed, seed+1, ...)")
    p.add_argument("--detections", action="store_true", help="also write simulated detection lists")

    p = sub.add_parser("detect", parents=[common], help="run the landmark detector")
    p.add_argument("inputs", nargs="+", help="sequence directories or directories of sequences")

    p = sub.add_parser("train", parents=[common], help="train the object classifier and tracking head")
    p.add_argument("inputs", nargs="+", help="sequence directories with gt.jsonl")

    p = sub.add_parser("track", parents=[common], help="track the stent through sequences")
    p.add_argument("inputs", nargs="+", help="sequence directories")
    p.add_argument("--models", required=True, help="directory written by 'train'")

    p = sub.add_parser("eval", parents=[common], help="score tracks against ground truth")
    p.add_argument("inputs", nargs="+", help="sequence directories with gt.jsonl")
    p.add_argument("--tracks", required=True, help="directory written by 'track'")

    p = sub.add_parser("enhance", parents=[common], help="motion-compensated frame averaging")
    p.add_argument("inputs", nargs=1, help="one sequence directory")
    p.add_argument("--track", required=True, help="track.jsonl for the sequence")
    p.add_argument("--reference", type=int, help="reference frame (default: middle tracked frame)")
    p.add_argument("--frames", type=int, help="number of frames to average")

    sub.add_parser("ablate", parents=[common],
                   help="detection-only, classifier, separate learning and full pipeline")
    return parser.parse_args(argv)


def sequence_dirs(paths) -> list:
    """Expand each path to itself or to the sequence directories inside it"""
    out = []
    for path in paths:
        path = Path(path)
        if formats.is_sequence_dir(path):
            out.append(path)
            continue
        if not path.is_dir():
            raise FormatError(path, "path", "no such directory")
        inner = sorted(p for p in path.iterdir() if formats.is_sequence_dir(p))
        if not inner:
            raise FormatError(path, "frames", "no frame_*.pgm files or sequence directories")
        out.extend(inner)
    return out


def _map(jobs: int, fn, items) -> list:
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def cmd_simulate(args, settings, manifest):
    if args.sequences < 1:
        raise ConfigError("--sequences", "must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.sequences):
        sim = replace(settings.sim, seed=settings.sim.seed + i)
        seq, gt = simulate_sequence(sim)
        directory = Path(args.out) / f"seq_{i:03d}"
        manifest.outputs += [str(p) for p in formats.write_sequence(directory, seq)]
        manifest.outputs.append(str(directory / formats.GT_FILE))
        if args.detections:
            path = directory / formats.DETECTIONS_FILE
            formats.write_detections(path, simulate_detections(gt, sim))
            manifest.outputs.append(str(path))
        manifest.seeds[directory.name] = sim.seed
    print(f"wrote {args.sequences} sequence(s) to {args.out}")


def cmd_detect(args, settings, manifest):
    detector = TophatDetector(settings.detector)
    dirs = sequence_dirs(args.inputs)
    manifest.inputs = [str(d) for d in dirs]

    def run(directory):
        seq = formats.read_sequence(directory)
        detections = [detector.detect(frame, t) for t, frame in enumerate(seq.frames)]
        out = Path(args.out) / directory.name
        os.makedirs(out, exist_ok=True)
        formats.write_detections(out / formats.DETECTIONS_FILE, detections)
        return out / formats.DETECTIONS_FILE, sum(len(d) for d in detections)

    for path, count in _map(args.jobs, run, dirs):
        manifest.outputs.append(str(path))
        print(f"{path}: {count} detections")


def cmd_train(args, settings, manifest):
    dirs = sequence_dirs(args.inputs)
    manifest.inputs = [str(d) for d in dirs]
    sequences = _map(args.jobs, formats.read_sequence, dirs)
    train = replace(settings.train, jobs=max(args.jobs, settings.train.jobs))
    trained = train_on_sequences(sequences, settings.pipeline(), train, settings.gcn)
    os.makedirs(args.out, exist_ok=True)
    manifest.outputs += [str(p) for p in formats.save_models(args.out, trained.models)]
    trace = Path(args.out) / "loss_trace.csv"
    formats.write_table(trace, trained.loss_trace())
    manifest.outputs.append(str(trace))
    manifest.seeds["train"] = settings.train.seed
    b = trained.breakdown
    print(f"trained on {len(sequences)} sequence(s): heatmap={b.heatmap:.6g} object={b.obj:.6g} "
          f"node={b.node:.6g} total={b.total:.6g}")


def cmd_track(args, settings, manifest):
    models = formats.load_models(args.models)
    pipeline = settings.pipeline()
    dirs = sequence_dirs(args.inputs)
    manifest.inputs = [str(d) for d in dirs] + [str(args.models)]

    def run(directory):
        seq = formats.read_sequence(directory)
        track = track_sequence(seq, pipeline, models)
        out = Path(args.out) / directory.name
        os.makedirs(out, exist_ok=True)
        formats.write_track(out / formats.TRACK_FILE, track)
        return out / formats.TRACK_FILE, len(track.selected_frames()), len(track)

    for path, selected, total in _map(args.jobs, run, dirs):
        manifest.outputs.append(str(path))
        print(f"{path}: stent selected in {selected}/{total} frames")


def cmd_eval(args, settings, manifest):
    dirs = sequence_dirs(args.inputs)
    pairs = []
    for directory in dirs:
        seq = formats.read_sequence(directory)
        if seq.ground_truth is None:
            raise FormatError(directory / formats.GT_FILE, "file", "ground truth not found")
        track_path = Path(args.tracks) / directory.name / formats.TRACK_FILE
        pairs.append((formats.read_track(track_path, len(seq)), seq.ground_truth))
        manifest.inputs += [str(directory), str(track_path)]
    report = metrics_report(evaluate_sequences(pairs, settings.eval.radius), settings.eval.radius)
    os.makedirs(args.out, exist_ok=True)
    text = format_report(report)
    (Path(args.out) / "metrics.txt").write_text(text)
    (Path(args.out) / "metrics.json").write_text(report_json(report))
    manifest.outputs += [str(Path(args.out) / "metrics.txt"), str(Path(args.out) / "metrics.json")]
    sys.stdout.write(text)


def cmd_enhance(args, settings, manifest):
    directory = sequence_dirs(args.inputs)[0]
    seq = formats.read_sequence(directory)
    track = formats.read_track(args.track, len(seq))
    n = args.frames if args.frames is not None else settings.enhance.n_frames
    reference = args.reference if args.reference is not None else settings.enhance.reference
    result = enhance(seq, track, n, reference)
    out = Path(args.out) / directory.name
    os.makedirs(out, exist_ok=True)
    formats.write_pgm(out / "enhanced.pgm", result.frame)
    overlay = overlay_markers(result.frame, track[result.reference].candidate)
    formats.write_pgm(out / "overlay.pgm", overlay)
    manifest.inputs = [str(directory), str(args.track)]
    manifest.outputs += [str(out / "enhanced.pgm"), str(out / "overlay.pgm")]
    print(f"enhanced frame {result.reference} of {directory.name} from {result.used} frame(s): "
          f"{', '.join(str(t) for t in result.indices)}")


ABLATION_METHODS = ("detection-only", "detection+classifier", "separate-learning", "full")


def run_ablation(settings: config.Settings, jobs: int = 1) -> pd.DataFrame:
    """
    Score the tracker against its reduced variants on one seeded synthetic test corpus

    Rows: the two strongest detections paired directly; the proposal the
    pre-trained object classifier likes best; a tracking head trained on
    its own and run without heatmap correction; the jointly trained
    tracker with heatmap correction.
    """
    base = settings.sim.seed
    pipeline = replace(settings.pipeline(), jobs=1)

    def simulate(seed):
        return simulate_sequence(replace(settings.sim, seed=seed))[0]

    train_seqs = _map(jobs, simulate, [base + TRAIN_SEED_OFFSET + i for i in range(settings.train.sequences)])
    test_seqs = _map(jobs, simulate, [base + i for i in range(settings.eval.sequences)])
    data = collect_training_clips(train_seqs, pipeline, radius=settings.train.label_radius)
    train = replace(settings.train, jobs=jobs)
    joint = train_models(data, replace(train, joint=True), settings.gcn, pipeline).models
    separate = train_models(data, replace(train, joint=False), settings.gcn, pipeline).models
    uncorrected = replace(pipeline, correction_passes=0)

    predictors = {
        "detection-only": lambda seq: detection_only_predictions(seq, pipeline),
        "detection+classifier": lambda seq: detection_classifier_predictions(
            seq, pipeline, separate.classifier),
        "separate-learning": lambda seq: track_sequence(seq, uncorrected, separate),
        "full": lambda seq: track_sequence(seq, pipeline, joint),
    }
    rows = []
    for name in ABLATION_METHODS:
        tracks = _map(jobs, predictors[name], test_seqs)
        report = metrics_report(
            evaluate_sequences(zip(tracks, (s.ground_truth for s in test_seqs)), settings.eval.radius),
            settings.eval.radius)
        rows.append({"method": name, **{k: report[k] for k in
                                        ("precision", "recall", "f1", "accuracy", "mae", "rmse")}})
        log.info("ablation %s: precision %.3f recall %.3f", name, report["precision"], report["recall"])
    return pd.DataFrame(rows)


def cmd_ablate(args, settings, manifest):
    table = run_ablation(settings, args.jobs)
    os.makedirs(args.out, exist_ok=True)
    csv_path = Path(args.out) / "ablation.csv"
    json_path = Path(args.out) / "ablation.json"
    formats.write_table(csv_path, table)
    json_path.write_text(table.to_json(orient="records", indent=2) + "\n")
    manifest.outputs += [str(csv_path), str(json_path)]
    manifest.seeds.update({"test_corpus": settings.sim.seed,
                           "train_corpus": settings.sim.seed + TRAIN_SEED_OFFSET,
                           "train": settings.train.seed})
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))


COMMANDS = {
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "enhance": cmd_enhance,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = parse_arguments(argv)
    setup_logging()
    started = time.monotonic()
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        settings = config.load_settings(args.config, args.set, args.seed)
        manifest = RunManifest(
            command=args.command,
            argv=list(sys.argv[1:] if argv is None else argv),
            config=config.to_lines(settings),
            seeds={"sim": settings.sim.seed, "train": settings.train.seed},
        )
        COMMANDS[args.command](args, settings, manifest)
        os.makedirs(args.out, exist_ok=True)
        manifest.duration = time.monotonic() - started
        manifest.write(args.out)
    except (StentTrackerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def run(argv) -> int:
    """main() that reports argparse usage errors as an exit status instead of raising"""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
