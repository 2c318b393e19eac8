"""
Graph tracking head

GCN branch: one weighted graph convolution with self-loops followed by two
edge convolutions. A per-node fully-connected bypass runs in parallel; the
two are concatenated and squashed to one probability per node. Gradients
are accumulated by hand in reverse order through every layer.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit, xlogy

from .detect import heatmap_loss
from .errors import ConfigError, DatasetError, DimensionError, FormatError
from .graph import StentGraph
from .propose import MlpParams, object_loss_and_grad, weighted_cross_entropy

log = logging.getLogger(__name__)

PARAM_ORDER = (
    "theta", "theta_b",
    "ecl1_w", "ecl1_b",
    "ecl2_w", "ecl2_b",
    "fc_w", "fc_b",
    "head_w", "head_b",
)

# Per-node probabilities aligned with StentGraph.nodes
NodeProbabilities = np.ndarray


@dataclass(frozen=True)
class GcnDims:
    feature_dim: int = 72
    h1: int = 32
    h2: int = 16
    h3: int = 8

    def __post_init__(self):
        for name in ("feature_dim", "h1", "h2", "h3"):
            if getattr(self, name) < 1:
                raise ConfigError(f"gcn.{name}", f"must be >= 1, got {getattr(self, name)}")

    @property
    def head_input(self) -> int:
        return self.h3 + self.h1

    def shapes(self) -> dict:
        return {
            "theta": (self.h1, self.feature_dim), "theta_b": (self.h1,),
            "ecl1_w": (self.h2, 2 * self.h1), "ecl1_b": (self.h2,),
            "ecl2_w": (self.h3, 2 * self.h2), "ecl2_b": (self.h3,),
            "fc_w": (self.h1, self.feature_dim), "fc_b": (self.h1,),
            "head_w": (self.head_input,), "head_b": (1,),
        }


DESK_DIMS = GcnDims()
LARGE_DIMS = GcnDims(feature_dim=1024, h1=256, h2=128, h3=64)


@dataclass(frozen=True, eq=False)
class GcnParams:
    theta: np.ndarray
    theta_b: np.ndarray
    ecl1_w: np.ndarray
    ecl1_b: np.ndarray
    ecl2_w: np.ndarray
    ecl2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        for name in PARAM_ORDER:
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        expected = self.dims.shapes()
        for name in PARAM_ORDER:
            shape = getattr(self, name).shape
            if shape != expected[name]:
                raise DimensionError(f"{name} has shape {shape}, expected {expected[name]}")

    @property
    def dims(self) -> GcnDims:
        h1, d = np.shape(self.theta)
        return GcnDims(feature_dim=d, h1=h1, h2=len(self.ecl1_b), h3=len(self.ecl2_b))

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, name)) for name in PARAM_ORDER])

    @classmethod
    def from_vector(cls, dims: GcnDims, vector) -> GcnParams:
        vector = np.asarray(vector, dtype=float)
        arrays, offset = {}, 0
        for name, shape in dims.shapes().items():
            size = int(np.prod(shape))
            arrays[name] = vector[offset:offset + size].reshape(shape)
            offset += size
        if offset != len(vector):
            raise DimensionError(f"vector has {len(vector)} values, dims need {offset}")
        return cls(**arrays)

    @classmethod
    def zeros(cls, dims: GcnDims) -> GcnParams:
        return cls(**{name: np.zeros(shape) for name, shape in dims.shapes().items()})

    def dumps(self) -> str:
        d = self.dims
        lines = ["gcn v1", f"dims {d.feature_dim} {d.h1} {d.h2} {d.h3} {d.head_input}"]
        for name in PARAM_ORDER:
            lines.append(name + " " + " ".join(repr(float(v)) for v in np.ravel(getattr(self, name))))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, path: str = "<string>") -> GcnParams:
        rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if not rows or rows[0] != ["gcn", "v1"]:
            raise FormatError(path, "header", "expected 'gcn v1'")
        fields = {row[0]: row[1:] for row in rows[1:]}
        try:
            d, h1, h2, h3 = (int(v) for v in fields["dims"][:4])
            dims = GcnDims(d, h1, h2, h3)
            arrays = {}
            for name, shape in dims.shapes().items():
                values = np.array([float(v) for v in fields[name]])
                if values.size != int(np.prod(shape)):
                    raise FormatError(path, name, f"expected {int(np.prod(shape))} values, got {values.size}")
                arrays[name] = values.reshape(shape)
        except KeyError as exc:
            raise FormatError(path, exc.args[0], "missing field") from None
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(path, "values", str(exc)) from None
        return cls(**arrays)


def init_gcn_params(dims: GcnDims = DESK_DIMS, seed: int = 0) -> GcnParams:
    """He-normal weights and zero biases from a seeded stream"""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x67636E]))
    arrays = {}
    for name, shape in dims.shapes().items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            arrays[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return GcnParams(**arrays)


@dataclass(frozen=True, eq=False)
class GraphTensors:
    """Sparse operators of one graph, prepared once and reused across epochs"""

    x0: np.ndarray
    propagation: sparse.csr_matrix
    src: np.ndarray
    dst: np.ndarray
    scatter_src: sparse.csr_matrix
    scatter_dst: sparse.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.x0.shape[0]


def prepare(graph: StentGraph) -> GraphTensors:
    n = graph.num_nodes
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    w = graph.weights
    degree = 1.0 + np.bincount(i, weights=w, minlength=n) + np.bincount(j, weights=w, minlength=n)
    rows = np.concatenate([np.arange(n), i, j])
    cols = np.concatenate([np.arange(n), j, i])
    vals = np.concatenate([np.ones(n), w, w]) / degree[rows]
    propagation = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    # directed pairs: each undirected edge in both directions
    src = np.concatenate([i, j]).astype(int)
    dst = np.concatenate([j, i]).astype(int)
    k = np.arange(len(src))
    ones = np.ones(len(src))
    scatter_src = sparse.csr_matrix((ones, (src, k)), shape=(n, len(src)))
    scatter_dst = sparse.csr_matrix((ones, (dst, k)), shape=(n, len(src)))
    x0 = graph.features() if n else np.zeros((0, 0))
    return GraphTensors(x0, propagation, src, dst, scatter_src, scatter_dst)


def _relu(x):
    return np.maximum(x, 0.0)


def _check_features(t: GraphTensors, weight: np.ndarray):
    if t.num_nodes and t.x0.shape[1] != weight.shape[1]:
        raise DimensionError(f"node features have {t.x0.shape[1]} dims, layer expects {weight.shape[1]}")


def _wgcl(t: GraphTensors, theta, bias):
    agg = t.propagation @ t.x0
    pre = agg @ theta.T + bias
    return _relu(pre), (agg, pre)


def _ecl(t: GraphTensors, h, weight, bias):
    if weight.shape[1] != 2 * h.shape[1]:
        raise DimensionError(f"edge function expects {weight.shape[1]} inputs, got 2 x {h.shape[1]}")
    cat = np.hstack([h[t.src], h[t.dst]])
    z = cat @ weight.T + bias
    e = _relu(z)
    if len(t.src):
        out = np.asarray(t.scatter_src @ e)
    else:
        out = np.zeros((t.num_nodes, weight.shape[0]))
    return out, (cat, z)


def wgcl_forward(graph: StentGraph, theta, bias=None) -> np.ndarray:
    """Weighted graph convolution with a unit self-loop, then ReLU"""
    theta = np.asarray(theta, dtype=float)
    bias = np.zeros(theta.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    t = prepare(graph)
    _check_features(t, theta)
    return _wgcl(t, theta, bias)[0]


def ecl_forward(graph: StentGraph, features, weight, bias=None) -> np.ndarray:
    """
    Edge convolution: ReLU(A [x_i | x_j] + b) for each directed neighbor
    pair, summed per node. Isolated nodes get the zero vector.
    """
    features = np.asarray(features, dtype=float)
    weight = np.asarray(weight, dtype=float)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    if len(features) != graph.num_nodes:
        raise DimensionError(f"{len(features)} feature rows for {graph.num_nodes} nodes")
    return _ecl(prepare(graph), features, weight, bias)[0]


def _forward(t: GraphTensors, params: GcnParams):
    _check_features(t, params.theta)
    h1, (agg, pre1) = _wgcl(t, params.theta, params.theta_b)
    h2, (cat1, z1) = _ecl(t, h1, params.ecl1_w, params.ecl1_b)
    h3, (cat2, z2) = _ecl(t, h2, params.ecl2_w, params.ecl2_b)
    pre_fc = t.x0 @ params.fc_w.T + params.fc_b
    f = _relu(pre_fc)
    c = np.hstack([h3, f])
    logits = c @ params.head_w + params.head_b[0]
    cache = {"agg": agg, "pre1": pre1, "cat1": cat1, "z1": z1,
             "cat2": cat2, "z2": z2, "pre_fc": pre_fc, "c": c}
    return logits, cache


def _backward(t: GraphTensors, params: GcnParams, cache: dict, dlogits: np.ndarray) -> dict:
    dims = params.dims
    grads = {
        "head_w": cache["c"].T @ dlogits,
        "head_b": np.array([dlogits.sum()]),
    }
    dc = np.outer(dlogits, params.head_w)
    dh3, df = dc[:, :dims.h3], dc[:, dims.h3:]

    dpre_fc = df * (cache["pre_fc"] > 0)
    grads["fc_w"] = dpre_fc.T @ t.x0
    grads["fc_b"] = dpre_fc.sum(axis=0)

    def edge_layer(dout, cat, z, weight, width):
        de = dout[t.src]
        dz = de * (z > 0)
        dw = dz.T @ cat
        db = dz.sum(axis=0)
        dcat = dz @ weight
        dh = np.zeros((t.num_nodes, width))
        if len(t.src):
            dh += t.scatter_src @ dcat[:, :width] + t.scatter_dst @ dcat[:, width:]
        return dh, dw, db

    dh2, grads["ecl2_w"], grads["ecl2_b"] = edge_layer(dh3, cache["cat2"], cache["z2"], params.ecl2_w, dims.h2)
    dh1, grads["ecl1_w"], grads["ecl1_b"] = edge_layer(dh2, cache["cat1"], cache["z1"], params.ecl1_w, dims.h1)

    dpre1 = dh1 * (cache["pre1"] > 0)
    grads["theta"] = dpre1.T @ cache["agg"]
    grads["theta_b"] = dpre1.sum(axis=0)
    return grads


def gcn_logits(graph: StentGraph, params: GcnParams) -> np.ndarray:
    if graph.num_nodes == 0:
        return np.zeros(0)
    return _forward(prepare(graph), params)[0]


def gcn_forward(graph: StentGraph, params: GcnParams) -> NodeProbabilities:
    """Probability that each node is the tracked stent"""
    return expit(gcn_logits(graph, params))


def _softplus(x):
    return np.logaddexp(0.0, x)


def node_loss_from_logits(logits, labels, class_weights=(1.0, 3.0)) -> float:
    """Class-weighted binary cross-entropy, averaged over nodes"""
    y = np.asarray(labels, dtype=float)
    if len(y) == 0:
        return 0.0
    w0, w1 = class_weights
    per_node = w1 * y * _softplus(-logits) + w0 * (1.0 - y) * _softplus(logits)
    return float(per_node.mean())


def node_loss(probs, labels, class_weights=(1.0, 3.0)) -> float:
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(y) == 0:
        return 0.0
    w0, w1 = class_weights
    per_node = -(w1 * xlogy(y, p) + w0 * xlogy(1.0 - y, 1.0 - p))
    return float(per_node.mean())


def _clip_loss_and_grad(t: GraphTensors, labels, params: GcnParams, class_weights) -> tuple:
    logits, cache = _forward(t, params)
    y = np.asarray(labels, dtype=float)
    w0, w1 = class_weights
    p = expit(logits)
    loss = node_loss_from_logits(logits, y, class_weights)
    dlogits = (w1 * y * (p - 1.0) + w0 * (1.0 - y) * p) / len(y)
    return loss, _backward(t, params, cache, dlogits)


def node_loss_and_grad(params: GcnParams, graph: StentGraph, labels, class_weights=(1.0, 3.0)) -> tuple:
    """Weighted node cross-entropy of one graph and its gradient for each parameter array"""
    if graph.num_nodes == 0:
        raise DatasetError("graph has no nodes")
    return _clip_loss_and_grad(prepare(graph), labels, params, class_weights)


@dataclass(frozen=True)
class GcnTrainConfig:
    dims: GcnDims = DESK_DIMS
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "gd"
    node_class_weights: tuple = (1.0, 3.0)
    alpha: float = 1.0
    beta: float = 2.0
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.gcn_epochs", f"must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError("train.gcn_learning_rate", "must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError("train.optimizer", f"must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.jobs < 1:
            raise ConfigError("train.jobs", "must be >= 1")


@dataclass(frozen=True, eq=False)
class LabeledClip:
    graph: StentGraph
    labels: np.ndarray


def _as_clips(clips) -> list:
    out = []
    for clip in clips:
        if isinstance(clip, LabeledClip):
            out.append(clip)
        else:
            graph, labels = clip
            out.append(LabeledClip(graph, np.asarray(labels, dtype=float)))
    return out


def joint_loss_and_grad(params: GcnParams, prepared, class_weights=(1.0, 3.0),
                        object_params: MlpParams = None, alpha: float = 1.0, beta: float = 2.0,
                        executor: ThreadPoolExecutor = None) -> tuple:
    """
    beta * L_node (+ alpha * L_obj when object_params is given)

    `prepared` is a list of (GraphTensors, labels). L_node is averaged over
    clips with at least one node; L_obj is the object classifier loss over
    every node of every clip. Returns (loss, gcn grads, object grads).
    """
    prepared = [(t, y) for t, y in prepared if t.num_nodes]
    if not prepared:
        raise DatasetError("no graph nodes to train on")

    def one(item):
        t, y = item
        return _clip_loss_and_grad(t, y, params, class_weights)

    results = list(executor.map(one, prepared)) if executor else [one(item) for item in prepared]
    m = len(results)
    node_total = 0.0
    grads = {name: np.zeros_like(getattr(params, name)) for name in PARAM_ORDER}
    for loss, clip_grads in results:
        node_total += loss
        for name in PARAM_ORDER:
            grads[name] += clip_grads[name]
    loss = beta * node_total / m
    grads = {name: beta * g / m for name, g in grads.items()}

    object_grads = None
    if object_params is not None:
        x = np.vstack([t.x0 for t, _ in prepared])
        y = np.concatenate([np.asarray(y, dtype=int) for _, y in prepared])
        obj_loss, object_grads = object_loss_and_grad(object_params, x, y)
        loss += alpha * obj_loss
        object_grads = {name: alpha * g for name, g in object_grads.items()}
    return loss, grads, object_grads


def _unit_basis_value(vector, k, delta):
    moved = vector.copy()
    moved[k] += delta
    return moved


def grad_check(params: GcnParams, graph: StentGraph, labels, step: float = 1e-5,
               object_params: MlpParams = None, alpha: float = 1.0, beta: float = 2.0,
               class_weights=(1.0, 3.0), max_coords: int = 2000, seed: int = 0) -> float:
    """
    Largest scale-normalized gap between analytic and central-difference gradients

    Every coordinate is checked unless there are more than `max_coords`,
    in which case a seeded sample of max(200, max_coords // 10) is used.
    The gap is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    prepared = [(prepare(graph), np.asarray(labels, dtype=float))]
    dims = params.dims
    gcn_vec = params.to_vector()
    obj_names = ("w1", "b1", "w2", "b2")
    if object_params is not None:
        obj_vec = np.concatenate([np.ravel(getattr(object_params, n)) for n in obj_names])
    else:
        obj_vec = np.zeros(0)
    full = np.concatenate([gcn_vec, obj_vec])

    def unpack(vector):
        gcn = GcnParams.from_vector(dims, vector[:len(gcn_vec)])
        if object_params is None:
            return gcn, None
        arrays, offset = {}, len(gcn_vec)
        for name in obj_names:
            shape = getattr(object_params, name).shape
            size = int(np.prod(shape))
            arrays[name] = vector[offset:offset + size].reshape(shape)
            offset += size
        return gcn, MlpParams(class_weights=object_params.class_weights, **arrays)

    def loss_at(vector):
        gcn, obj = unpack(vector)
        return joint_loss_and_grad(gcn, prepared, class_weights, obj, alpha, beta)[0]

    _, grads, object_grads = joint_loss_and_grad(params, prepared, class_weights, object_params, alpha, beta)
    analytic = np.concatenate([np.ravel(grads[name]) for name in PARAM_ORDER])
    if object_grads is not None:
        analytic = np.concatenate([analytic] + [np.ravel(object_grads[n]) for n in obj_names])

    coords = np.arange(len(full))
    if len(full) > max_coords:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(len(full), size=max(200, max_coords // 10), replace=False))

    def central(k, h):
        return (loss_at(_unit_basis_value(full, k, h)) - loss_at(_unit_basis_value(full, k, -h))) / (2.0 * h)

    worst = 0.0
    for k in coords:
        numeric = central(k, step)
        finer = central(k, step / 10.0)
        if abs(numeric - finer) > 1e-7 * max(1.0, abs(numeric)):
            # the interval straddled a ReLU kink; shrink it off the kink
            numeric = central(k, step / 100.0)
        gap = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
        worst = max(worst, gap)
    return float(worst)


@dataclass
class GcnTrainResult:
    params: GcnParams
    object_params: MlpParams = None
    losses: list = field(default_factory=list)


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, arrays: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[name] = arrays[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def train_gcn(clips, config: GcnTrainConfig = GcnTrainConfig(), init: GcnParams = None,
              object_params: MlpParams = None) -> GcnTrainResult:
    """
    Full-batch training of the tracking head (and, jointly, the object classifier)

    `clips` holds (StentGraph, node labels) pairs or LabeledClip values.
    `losses[k]` is the objective before update k; the last entry is the
    objective after the final update.
    """
    clips = _as_clips(clips)
    if not clips or all(c.graph.num_nodes == 0 for c in clips):
        raise DatasetError("empty training set: no clips with nodes")
    all_labels = np.concatenate([c.labels for c in clips])
    if len(np.unique(all_labels)) < 2:
        raise DatasetError("node labels must contain both classes")

    params = init if init is not None else init_gcn_params(config.dims, config.seed)
    prepared = [(prepare(c.graph), c.labels) for c in clips if c.graph.num_nodes]
    arrays = params.arrays()
    obj_arrays = object_params.arrays() if object_params is not None else None
    if config.optimizer == "adam":
        gcn_opt, obj_opt = _Adam(config.learning_rate), _Adam(config.learning_rate)

    def current():
        gcn = GcnParams(**arrays)
        obj = None
        if obj_arrays is not None:
            obj = MlpParams(class_weights=object_params.class_weights, **obj_arrays)
        return gcn, obj

    losses = []
    executor = ThreadPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None
    try:
        for epoch in range(config.epochs + 1):
            gcn, obj = current()
            loss, grads, obj_grads = joint_loss_and_grad(
                gcn, prepared, config.node_class_weights, obj, config.alpha, config.beta, executor)
            losses.append(loss)
            if epoch == config.epochs:
                break
            if config.optimizer == "adam":
                arrays = gcn_opt.step(arrays, grads)
                if obj_arrays is not None:
                    obj_arrays = obj_opt.step(obj_arrays, obj_grads)
            else:
                arrays = {n: arrays[n] - config.learning_rate * grads[n] for n in PARAM_ORDER}
                if obj_arrays is not None:
                    obj_arrays = {n: obj_arrays[n] - config.learning_rate * obj_grads[n] for n in obj_arrays}
            if epoch % 25 == 0:
                log.debug("gcn epoch %d loss %.6f", epoch, loss)
    finally:
        if executor is not None:
            executor.shutdown()
    gcn, obj = current()
    log.info("tracking head trained on %d clips (%d nodes), loss %.5f -> %.5f",
             len(prepared), len(all_labels), losses[0], losses[-1])
    return GcnTrainResult(gcn, obj, losses)


@dataclass(frozen=True)
class LossBreakdown:
    heatmap: float
    obj: float
    node: float
    alpha: float = 1.0
    beta: float = 2.0

    @property
    def total(self) -> float:
        return self.heatmap + self.alpha * self.obj + self.beta * self.node


def total_loss(pred_heatmaps, gt_heatmaps, object_logits, object_labels, node_probs, node_labels,
               lambda1: float = 1.0, lambda2: float = 2.0, alpha: float = 1.0, beta: float = 2.0,
               object_class_weights=(1.0, 5.0), node_class_weights=(1.0, 3.0)) -> LossBreakdown:
    """
    Heatmap term + alpha * object term + beta * node term

    The heatmap term is averaged over the heatmap pairs given; an empty
    list of any component contributes zero.
    """
    pred_heatmaps, gt_heatmaps = list(pred_heatmaps), list(gt_heatmaps)
    if len(pred_heatmaps) != len(gt_heatmaps):
        raise DimensionError(f"{len(pred_heatmaps)} predicted heatmaps for {len(gt_heatmaps)} targets")
    hm = 0.0
    if pred_heatmaps:
        hm = float(np.mean([heatmap_loss(p, g, lambda1, lambda2) for p, g in zip(pred_heatmaps, gt_heatmaps)]))
    obj_labels = np.asarray(object_labels, dtype=int)
    obj = 0.0
    if len(obj_labels):
        obj = weighted_cross_entropy(np.asarray(object_logits, dtype=float), obj_labels, object_class_weights)
    node = node_loss(node_probs, node_labels, node_class_weights)
    return LossBreakdown(hm, obj, node, alpha, beta)
