from dataclasses import replace

import numpy as np
import pytest

from stent_tracker.core import Sequence
from stent_tracker.errors import ConfigError, DatasetError
from stent_tracker.gcn import DESK_DIMS, GcnDims
from stent_tracker.propose import train_object_classifier
from stent_tracker.simulate import simulate_sequence
from stent_tracker.track import PipelineConfig
from stent_tracker.training import TrainingConfig, collect_training_clips, train_models

QUICK = TrainingConfig(classifier_epochs=3, gcn_epochs=3)


@pytest.fixture
def corpus(small_sim):
    return [simulate_sequence(replace(small_sim, seed=s))[0] for s in (3, 4)]


def test_collected_clips_are_labeled(corpus):
    data = collect_training_clips(corpus, PipelineConfig())
    assert len(data.samples) == 2
    x, y = data.object_data()
    assert x.shape == (len(y), PipelineConfig().proposal.descriptor_dim)
    assert set(np.unique(y)) <= {0, 1}
    for sample in data.samples:
        assert len(sample.heatmaps) == len(sample.targets) == 6
        assert sample.clip.graph.num_nodes == len(sample.clip.labels)


def test_sequences_need_ground_truth(corpus):
    with pytest.raises(DatasetError):
        collect_training_clips([Sequence(corpus[0].frames)], PipelineConfig())


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(node_class_weights=(1.0,))
    with pytest.raises(ConfigError):
        TrainingConfig(label_radius=0.0)
    assert QUICK.gcn_config(DESK_DIMS).optimizer == "adam"
    assert QUICK.classifier_config().epochs == 3


def test_train_models_reports_every_loss(corpus):
    data = collect_training_clips(corpus, PipelineConfig())
    trained = train_models(data, QUICK, DESK_DIMS)
    trace = trained.loss_trace()
    assert list(trace.columns) == ["stage", "epoch", "loss"]
    assert (trace["stage"] == "joint").sum() == 4
    b = trained.breakdown
    assert b.total == pytest.approx(b.heatmap + b.alpha * b.obj + b.beta * b.node)
    assert trained.models.classifier is not None


def test_descriptor_size_must_match_tracking_head(corpus):
    data = collect_training_clips(corpus, PipelineConfig())
    with pytest.raises(ConfigError):
        train_models(data, QUICK, GcnDims(feature_dim=10))


def test_separate_learning_keeps_pretrained_classifier(corpus):
    data = collect_training_clips(corpus, PipelineConfig())
    x, y = data.object_data()
    pretrained = train_object_classifier(x, y, QUICK.object_class_weights, QUICK.classifier_config()).params
    separate = train_models(data, replace(QUICK, joint=False), DESK_DIMS)
    joint = train_models(data, QUICK, DESK_DIMS)
    assert separate.models.classifier.dumps() == pretrained.dumps()
    assert joint.models.classifier.dumps() != pretrained.dumps()
    trace = separate.loss_trace()
    assert set(trace["stage"]) == {"classifier", "head"}
    assert (trace["stage"] == "head").sum() == 4
