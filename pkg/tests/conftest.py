import numpy as np
import pytest

from stent_tracker.core import GrayFrame, LandmarkDetection, Point2, StentCandidate
from stent_tracker.gcn import GcnDims, init_gcn_params
from stent_tracker.graph import GraphNode, StentGraph
from stent_tracker.simulate import SimConfig


def det(x, y, score=1.0, frame=0):
    return LandmarkDetection(Point2(float(x), float(y)), score, frame)


def cand(x1, y1, x2, y2, score=1.0, frame=0):
    return StentCandidate.from_pair(det(x1, y1, score, frame), det(x2, y2, score, frame))


def flat_frame(value=170, width=64, height=64):
    return GrayFrame(np.full((height, width), value, dtype=np.uint8))


def random_graph(rng, max_nodes=10, feature_dim=3, frames=None):
    """Random layered graph with random positive weights and features"""
    n = int(rng.integers(1, max_nodes + 1))
    frames = frames if frames is not None else int(rng.integers(1, n + 1))
    layer = np.sort(rng.integers(0, frames, size=n))
    nodes = []
    for i, t in enumerate(layer):
        x, y = rng.uniform(10, 50, size=2)
        c = cand(x, y, x + rng.uniform(12, 30), y + rng.uniform(-5, 5), rng.uniform(0.1, 1.0), int(t))
        nodes.append(GraphNode(int(t), c, rng.normal(size=feature_dim)))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if layer[j] == layer[i] + 1]
    weights = rng.uniform(0.05, 1.0, size=len(edges))
    return StentGraph(nodes, np.array(edges, dtype=int).reshape(-1, 2), weights)


@pytest.fixture
def small_sim():
    return SimConfig(frames=6, width=96, height=96, stent_length=30.0, cardiac_amplitude=4.0,
                     respiratory_amplitude=2.0, seed=3)


@pytest.fixture
def noiseless_sim():
    return SimConfig(frames=10, width=128, height=128, clutter_blobs=0, noise_sigma=0.0,
                     band_dropout=0.0, fp_rate=0.0, jitter_sigma=0.0, miss_probability=0.0, seed=11)


@pytest.fixture
def tiny_dims():
    return GcnDims(feature_dim=3, h1=4, h2=3, h3=2)


@pytest.fixture
def tiny_params(tiny_dims):
    return init_gcn_params(tiny_dims, seed=5)
