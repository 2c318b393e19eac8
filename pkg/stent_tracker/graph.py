"""
Spatiotemporal candidate graph

Nodes are stent candidates with their feature vectors; every candidate is
connected to every candidate of the neighboring frames in the clip. Edge
weights mix the mean candidate score with box overlap and landmark-pair
vector similarity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import StentCandidate, iou
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphConfig:
    """Edge-weight mix of box overlap (alpha1) and pair-vector similarity (alpha2)"""

    alpha1: float = 0.5
    alpha2: float = 0.5

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"graph.{name}", f"must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class GraphNode:
    frame: int
    candidate: StentCandidate
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class StentGraph:
    """
    Undirected graph with edges stored once as (i, j), i < j

    `edges` is an (E, 2) int array and `weights` an (E,) float array.
    """

    nodes: tuple
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(edges) != len(weights):
            raise ValueError(f"{len(edges)} edges but {len(weights)} weights")
        if len(edges) and (edges[:, 0] >= edges[:, 1]).any():
            raise ValueError("edges must be stored with i < j")
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return len(self.nodes[0].features) if self.nodes else 0

    def features(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 0))
        return np.stack([np.asarray(n.features, dtype=float) for n in self.nodes])

    def frames(self) -> np.ndarray:
        return np.array([n.frame for n in self.nodes], dtype=int)

    def candidates(self) -> list:
        return [n.candidate for n in self.nodes]

    def nodes_by_frame(self) -> dict:
        groups = {}
        for i, node in enumerate(self.nodes):
            groups.setdefault(node.frame, []).append(i)
        return groups

    def edge_lookup(self) -> dict:
        return {(int(i), int(j)): float(w) for (i, j), w in zip(self.edges, self.weights)}

    def permuted(self, order) -> StentGraph:
        """Same graph with node i of the result being node order[i] of this one"""
        order = np.asarray(order, dtype=int)
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        edges = np.sort(position[self.edges], axis=1) if len(self.edges) else self.edges
        return StentGraph([self.nodes[k] for k in order], edges, self.weights.copy())


def al_similarity(v_i, v_j) -> float:
    """Angle-and-length similarity of two landmark-pair vectors; 0 for a zero vector"""
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    n_i = float(np.hypot(*v_i))
    n_j = float(np.hypot(*v_j))
    if n_i == 0.0 or n_j == 0.0:
        return 0.0
    cosine = abs(float(v_i @ v_j)) / (n_i * n_j)
    length_gap = abs(n_i - n_j) / math.sqrt(n_i * n_j)
    return max(0.0, cosine - length_gap)


def edge_weight(o_i: StentCandidate, o_j: StentCandidate, alpha1: float = 0.5,
                alpha2: float = 0.5) -> float:
    """Mean score of the two candidates times alpha1 * IoU + alpha2 * al_similarity"""
    similarity = alpha1 * iou(o_i.bbox, o_j.bbox) + alpha2 * al_similarity(o_i.vector, o_j.vector)
    return 0.5 * (o_i.score + o_j.score) * similarity


def build_graph(frames, alpha1: float = 0.5, alpha2: float = 0.5) -> StentGraph:
    """
    Graph over one clip

    `frames` is an ordered list with one entry per clip frame; each entry
    is a list of (StentCandidate, feature vector) pairs. Consecutive
    entries are fully connected; an empty entry breaks the chain.
    """
    nodes = []
    layers = []
    for entry in frames:
        layer = []
        for candidate, features in entry:
            layer.append(len(nodes))
            nodes.append(GraphNode(candidate.frame, candidate, np.asarray(features, dtype=float)))
        layers.append(layer)

    edges, weights = [], []
    for prev, nxt in zip(layers, layers[1:]):
        for i in prev:
            for j in nxt:
                edges.append((i, j))
                weights.append(edge_weight(nodes[i].candidate, nodes[j].candidate, alpha1, alpha2))
    log.debug("graph: %d nodes over %d frames, %d edges", len(nodes), len(layers), len(edges))
    return StentGraph(nodes, np.array(edges, dtype=int).reshape(-1, 2), np.array(weights, dtype=float))


def clip_windows(n_frames: int, length: int = 10, stride: int = 5) -> list:
    """
    Overlapping (start, stop) frame ranges covering a sequence

    The last window is shifted back to end on the final frame, so every
    window has `length` frames unless the sequence is shorter.
    """
    if n_frames <= 0:
        return []
    if length < 2:
        raise ValueError(f"clip length must be >= 2, got {length}")
    if stride < 1:
        raise ValueError(f"clip stride must be >= 1, got {stride}")
    if n_frames <= length:
        return [(0, n_frames)]
    starts = list(range(0, n_frames - length + 1, stride))
    if starts[-1] + length < n_frames:
        starts.append(n_frames - length)
    return [(s, s + length) for s in starts]


def dump_graph(graph: StentGraph, path) -> None:
    """Debug dump: one JSON line per node, then one per edge"""
    with open(path, "w") as f:
        for i, node in enumerate(graph.nodes):
            (p, q) = node.candidate.points
            f.write(json.dumps({
                "node": i, "frame": node.frame,
                "m1": [p.x, p.y], "m2": [q.x, q.y],
                "score": node.candidate.score,
            }) + "\n")
        for (i, j), w in zip(graph.edges, graph.weights):
            f.write(json.dumps({"edge": [int(i), int(j)], "weight": float(w)}) + "\n")
