"""
Training data collection and the two-stage training schedule

The object classifier is pre-trained on every proposal, then trained
jointly with the tracking head, or kept fixed while the head learns on
its own (`train.joint=false`). The heatmap term is evaluated on
tracker-corrected heatmaps and reported; the morphological detector has
nothing to learn from it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .detect import LandmarkDetector, TophatDetector, correct_heatmap, render_heatmap
from .errors import ConfigError, DatasetError
from .evaluate import DEFAULT_RADIUS
from .gcn import GcnDims, GcnTrainConfig, LabeledClip, LossBreakdown, gcn_forward, total_loss, train_gcn
from .graph import build_graph, clip_windows
from .propose import (
    ClassifierTrainConfig,
    candidate_label,
    object_logits,
    patch_descriptor,
    propose_candidates,
    train_object_classifier,
)
from .track import PipelineConfig, TrackerModels, detection_support

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    classifier_epochs: int = 200
    classifier_learning_rate: float = 0.1
    classifier_batch_size: int = 32
    classifier_hidden: int = 32
    gcn_epochs: int = 300
    gcn_learning_rate: float = 0.01
    optimizer: str = "adam"
    object_class_weights: tuple = (1.0, 5.0)
    node_class_weights: tuple = (1.0, 3.0)
    alpha: float = 1.0
    beta: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 2.0
    # False trains the tracking head on the node loss alone, after and apart from the classifier
    joint: bool = True
    label_radius: float = DEFAULT_RADIUS
    sequences: int = 20
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("object_class_weights", "node_class_weights"):
            weights = tuple(float(w) for w in getattr(self, name))
            if len(weights) != 2 or min(weights) <= 0:
                raise ConfigError(f"train.{name}", "need two positive class weights")
            object.__setattr__(self, name, weights)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("train.alpha", "loss weights must be >= 0")
        if self.label_radius <= 0:
            raise ConfigError("train.label_radius", "must be positive")
        if self.sequences < 1:
            raise ConfigError("train.sequences", "must be >= 1")

    def classifier_config(self) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(
            epochs=self.classifier_epochs,
            learning_rate=self.classifier_learning_rate,
            batch_size=self.classifier_batch_size,
            hidden=self.classifier_hidden,
            seed=self.seed,
        )

    def gcn_config(self, dims: GcnDims) -> GcnTrainConfig:
        return GcnTrainConfig(
            dims=dims,
            epochs=self.gcn_epochs,
            learning_rate=self.gcn_learning_rate,
            optimizer=self.optimizer,
            node_class_weights=self.node_class_weights,
            alpha=self.alpha,
            beta=self.beta,
            seed=self.seed,
            jobs=self.jobs,
        )


@dataclass(frozen=True, eq=False)
class ClipSample:
    clip: LabeledClip
    heatmaps: tuple
    detections: tuple
    targets: tuple


@dataclass(frozen=True, eq=False)
class TrainingSet:
    samples: tuple

    @property
    def clips(self) -> list:
        return [s.clip for s in self.samples]

    def object_data(self) -> tuple:
        clips = [c for c in self.clips if c.graph.num_nodes]
        if not clips:
            return np.zeros((0, 0)), np.zeros(0, dtype=int)
        x = np.vstack([c.graph.features() for c in clips])
        y = np.concatenate([c.labels for c in clips]).astype(int)
        return x, y


def collect_training_clips(sequences, cfg: PipelineConfig, detector: LandmarkDetector = None,
                           radius: float = DEFAULT_RADIUS) -> TrainingSet:
    """Detect, propose, describe and label every clip of every ground-truth sequence"""
    detector = detector or TophatDetector(cfg.detector)
    samples = []
    for seq in sequences:
        if seq.ground_truth is None:
            raise DatasetError(f"sequence {seq.name or '?'} has no ground truth")
        gt = seq.ground_truth
        height, width = seq.shape
        for start, stop in clip_windows(len(seq), cfg.clip_length, cfg.clip_stride):
            heatmaps, detections, targets, layers, labels = [], [], [], [], []
            for t in range(start, stop):
                frame = seq.frames[t]
                hm = detector.heatmap(frame)
                dets = detector.peaks(hm, t)
                pair = gt.pair(t)
                heatmaps.append(hm)
                detections.append(dets)
                targets.append(render_heatmap(list(pair) if pair else [], cfg.detector.sigma, (width, height)))
                layer = []
                for cand in propose_candidates(dets, cfg.proposal):
                    layer.append((cand, patch_descriptor(frame, cand, cfg.proposal)))
                    labels.append(candidate_label(cand, pair, radius))
                layers.append(layer)
            graph = build_graph(layers, cfg.graph.alpha1, cfg.graph.alpha2)
            clip = LabeledClip(graph, np.array(labels, dtype=float))
            samples.append(ClipSample(clip, tuple(heatmaps), tuple(detections), tuple(targets)))
    data = TrainingSet(tuple(samples))
    _, y = data.object_data()
    log.info("collected %d clips, %d candidates (%d positive)", len(samples), len(y), int(y.sum()))
    return data


@dataclass
class TrainedModels:
    models: TrackerModels
    classifier_losses: list = field(default_factory=list)
    gcn_losses: list = field(default_factory=list)
    breakdown: LossBreakdown = None
    head_stage: str = "joint"

    def loss_trace(self) -> pd.DataFrame:
        rows = [("classifier", k, v) for k, v in enumerate(self.classifier_losses)]
        rows += [(self.head_stage, k, v) for k, v in enumerate(self.gcn_losses)]
        return pd.DataFrame(rows, columns=["stage", "epoch", "loss"])


def _corrected_heatmaps(sample: ClipSample, models: TrackerModels, window: int) -> list:
    graph = sample.clip.graph
    support = detection_support(graph, gcn_forward(graph, models.gcn))
    return [correct_heatmap(hm, dets, [support.get(d, 0.0) for d in dets], window)
            for hm, dets in zip(sample.heatmaps, sample.detections)]


def evaluate_losses(data: TrainingSet, models: TrackerModels, config: TrainingConfig,
                    window: int = 9) -> LossBreakdown:
    preds, targets = [], []
    for sample in data.samples:
        preds.extend(_corrected_heatmaps(sample, models, window))
        targets.extend(sample.targets)
    x, y = data.object_data()
    logits = object_logits(x, models.classifier) if models.classifier is not None and len(y) else np.zeros((0, 2))
    clips = [c for c in data.clips if c.graph.num_nodes]
    probs = np.concatenate([gcn_forward(c.graph, models.gcn) for c in clips]) if clips else np.zeros(0)
    return total_loss(preds, targets, logits, y if len(logits) else [], probs, y,
                      config.lambda1, config.lambda2, config.alpha, config.beta,
                      config.object_class_weights, config.node_class_weights)


def train_models(data: TrainingSet, config: TrainingConfig, dims: GcnDims,
                 pipeline: PipelineConfig = PipelineConfig()) -> TrainedModels:
    """
    Classifier pre-training, then the tracking head

    With `config.joint` the head and the classifier are updated together
    on beta * L_node + alpha * L_obj; otherwise the head is trained on
    beta * L_node alone and the pre-trained classifier is kept as is.
    """
    x, y = data.object_data()
    if len(y) == 0:
        raise DatasetError("no proposals in the training sequences")
    if x.shape[1] != dims.feature_dim:
        raise ConfigError("gcn.feature_dim",
                          f"descriptor has {x.shape[1]} dims but the tracking head expects {dims.feature_dim}")
    pretrained = train_object_classifier(x, y, config.object_class_weights, config.classifier_config())
    if config.joint:
        head = train_gcn(data.clips, config.gcn_config(dims), object_params=pretrained.params)
        models = TrackerModels(head.params, head.object_params)
    else:
        head = train_gcn(data.clips, config.gcn_config(dims))
        models = TrackerModels(head.params, pretrained.params)
    breakdown = evaluate_losses(data, models, config, pipeline.correction_window)
    log.info("losses: heatmap %.5f object %.5f node %.5f total %.5f",
             breakdown.heatmap, breakdown.obj, breakdown.node, breakdown.total)
    return TrainedModels(models, pretrained.losses, head.losses, breakdown,
                         "joint" if config.joint else "head")


def train_on_sequences(sequences, pipeline: PipelineConfig, config: TrainingConfig, dims: GcnDims,
                       detector: LandmarkDetector = None) -> TrainedModels:
    data = collect_training_clips(sequences, pipeline, detector, config.label_radius)
    return train_models(data, config, dims, pipeline)
