"""
Stent proposal, patch description and the object classifier

Every pair of same-frame landmark detections within the distance gate
becomes a StentCandidate. Each candidate gets an appearance descriptor
sampled along the landmark-pair axis, and a small two-layer network
scores whether the pair brackets the stent (deep supervision for the
descriptor).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.special import log_softmax, softmax

from .core import MIN_SIDE, GrayFrame, StentCandidate
from .errors import ConfigError, DatasetError, DimensionError, FormatError

log = logging.getLogger(__name__)

# Number of summary statistics appended to the grid samples
SUMMARY_STATS = 8

# Half-size (pixels) of the square sampled around each marker for the summary stats
MARKER_NEIGHBORHOOD = 2


@dataclass(frozen=True)
class ProposalConfig:
    min_distance: float = 12.0
    max_distance: float = 200.0
    length_bins: int = 16
    width_bins: int = 4

    def __post_init__(self):
        if not 0 < self.min_distance < self.max_distance:
            raise ConfigError(
                "proposal.min_distance",
                f"need 0 < min < max, got {self.min_distance} and {self.max_distance}")
        if self.length_bins < 1 or self.width_bins < 1:
            raise ConfigError("proposal.length_bins", "descriptor grid needs at least one bin per axis")

    @property
    def descriptor_dim(self) -> int:
        return self.length_bins * self.width_bins + SUMMARY_STATS


def propose_candidates(dets, cfg: ProposalConfig) -> list:
    """All landmark pairs of one frame whose separation passes the distance gate"""
    dets = list(dets)
    if len(dets) < 2:
        return []
    frames = {d.frame for d in dets}
    if len(frames) != 1:
        raise ValueError(f"detections span several frames: {sorted(frames)}")
    candidates = []
    for a, b in itertools.combinations(dets, 2):
        distance = a.position.distance(b.position)
        if cfg.min_distance <= distance <= cfg.max_distance:
            candidates.append(StentCandidate.from_pair(a, b))
    return candidates


def candidate_label(candidate: StentCandidate, markers, radius: float = 5.0) -> int:
    """1 iff both landmarks lie within radius of the two true markers"""
    if markers is None:
        return 0
    p, q = candidate.points
    g1, g2 = markers
    straight = max(p.distance(g1), q.distance(g2))
    crossed = max(p.distance(g2), q.distance(g1))
    return int(min(straight, crossed) <= radius)


def _sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # bilinear, clamped at the borders
    return ndimage.map_coordinates(image, [ys.ravel(), xs.ravel()], order=1, mode="nearest")


def _stats(values: np.ndarray) -> list:
    return [float(values.mean()), float(values.std()), float(values.min()), float(values.max())]


def patch_descriptor(frame: GrayFrame, cand: StentCandidate, cfg: ProposalConfig) -> np.ndarray:
    """
    Oriented appearance descriptor of the region between the landmarks

    An L x W grid is sampled along the landmark-pair axis (standardized to
    zero mean and unit variance), followed by mean/std/min/max of the band
    and of the pooled marker neighborhoods. The whole vector is
    L2-normalized.
    """
    image = frame.as_float() / 255.0
    p, q = cand.points
    dx, dy = q.x - p.x, q.y - p.y
    distance = math.hypot(dx, dy)
    if distance > 0:
        u = np.array([dx, dy]) / distance
    else:
        u = np.array([1.0, 0.0])
    n = np.array([-u[1], u[0]])
    band_width = max(0.25 * distance, MIN_SIDE)

    s = (np.arange(cfg.length_bins) + 0.5) / cfg.length_bins * distance
    t = ((np.arange(cfg.width_bins) + 0.5) / cfg.width_bins - 0.5) * band_width
    ss, tt = np.meshgrid(s, t, indexing="ij")
    xs = p.x + ss * u[0] + tt * n[0]
    ys = p.y + ss * u[1] + tt * n[1]
    band = _sample(image, xs, ys)

    std = band.std()
    if std > 1e-12:
        grid = (band - band.mean()) / std
    else:
        grid = np.zeros_like(band)

    offsets = np.arange(-MARKER_NEIGHBORHOOD, MARKER_NEIGHBORHOOD + 1, dtype=float)
    ox, oy = np.meshgrid(offsets, offsets)
    around = np.concatenate([_sample(image, m.x + ox, m.y + oy) for m in (p, q)])

    vector = np.concatenate([grid, _stats(band), _stats(around)])
    norm = np.linalg.norm(vector)
    if norm > 0:
        vector = vector / norm
    return vector


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Affine D->H, ReLU, affine H->2, softmax"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    class_weights: tuple = (1.0, 5.0)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def dumps(self) -> str:
        lines = [
            "mlp v1",
            f"dims {self.input_dim} {self.hidden_dim} 2",
            "class_weights " + " ".join(repr(float(w)) for w in self.class_weights),
        ]
        for name, values in self.arrays().items():
            lines.append(f"{name} " + " ".join(repr(float(v)) for v in np.ravel(values)))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, path: str = "<string>") -> MlpParams:
        rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if not rows or rows[0] != ["mlp", "v1"]:
            raise FormatError(path, "header", "expected 'mlp v1'")
        try:
            fields = {row[0]: row[1:] for row in rows[1:]}
            d, h, _ = (int(v) for v in fields["dims"])
            weights = tuple(float(v) for v in fields["class_weights"])
            shapes = {"w1": (h, d), "b1": (h,), "w2": (2, h), "b2": (2,)}
            arrays = {}
            for name, shape in shapes.items():
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
        return cls(class_weights=weights, **arrays)


def init_mlp_params(input_dim: int, hidden_dim: int, seed: int = 0,
                    class_weights=(1.0, 5.0)) -> MlpParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6C70]))
    return MlpParams(
        w1=rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(hidden_dim, input_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.normal(0.0, math.sqrt(1.0 / hidden_dim), size=(2, hidden_dim)),
        b2=np.zeros(2),
        class_weights=tuple(float(w) for w in class_weights),
    )


def _check_dim(x: np.ndarray, params: MlpParams):
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"feature dimension {x.shape[-1]} does not match classifier input {params.input_dim}")


def object_logits(x, params: MlpParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_dim(x, params)
    hidden = np.maximum(x @ params.w1.T + params.b1, 0.0)
    return hidden @ params.w2.T + params.b2


def class_probabilities(x, params: MlpParams) -> np.ndarray:
    return softmax(object_logits(x, params), axis=-1)


def classify_object(x, params: MlpParams) -> float:
    """Positive-class probability for one feature vector"""
    return float(class_probabilities(x, params)[..., 1])


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights) -> float:
    """
    Mean over samples of -w[y] log softmax(logits)[y]

    The mean is over the sample count, not the summed weights, so a
    sample's loss scales linearly with its class weight.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        return 0.0
    logp = log_softmax(np.atleast_2d(logits), axis=1)
    w = np.asarray(class_weights, dtype=float)[labels]
    return float(-np.sum(w * logp[np.arange(len(labels)), labels]) / len(labels))


def object_loss_and_grad(params: MlpParams, x: np.ndarray, labels: np.ndarray) -> tuple:
    """Weighted cross-entropy of the classifier and its gradient for each array"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.asarray(labels, dtype=int)
    _check_dim(x, params)
    n = len(labels)
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.w2.T + params.b2
    loss = weighted_cross_entropy(logits, labels, params.class_weights)

    w = np.asarray(params.class_weights, dtype=float)[labels]
    dlogits = softmax(logits, axis=1)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (w / n)[:, None]
    dhidden = dlogits @ params.w2
    dpre = dhidden * (pre > 0)
    grads = {
        "w1": dpre.T @ x,
        "b1": dpre.sum(axis=0),
        "w2": dlogits.T @ hidden,
        "b2": dlogits.sum(axis=0),
    }
    return loss, grads


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    batch_size: int = 32
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.classifier_epochs", f"must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError("train.classifier_learning_rate", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.classifier_batch_size", "must be >= 1")


@dataclass
class ClassifierTrainResult:
    params: MlpParams
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_object_classifier(features, labels, class_weights=(1.0, 5.0),
                            hyper: ClassifierTrainConfig = ClassifierTrainConfig(),
                            init: MlpParams = None) -> ClassifierTrainResult:
    """
    Mini-batch gradient descent on the weighted cross-entropy

    Batches follow a seeded permutation per epoch, so the result is a pure
    function of the data and `hyper.seed`. `losses` holds the full-data
    loss after every epoch.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=int)
    if len(y) == 0 or x.shape[0] != len(y):
        raise DatasetError(f"need one label per feature vector, got {x.shape[0]} vectors and {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise DatasetError("object classifier needs both positive and negative samples")

    if init is None:
        params = init_mlp_params(x.shape[1], hyper.hidden, hyper.seed, class_weights)
    else:
        params = replace(init, class_weights=tuple(float(w) for w in class_weights))
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    rng = np.random.default_rng(np.random.SeedSequence([int(hyper.seed), 0x626174]))

    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            current = MlpParams(class_weights=params.class_weights, **arrays)
            _, grads = object_loss_and_grad(current, x[batch], y[batch])
            for name in arrays:
                arrays[name] = arrays[name] - hyper.learning_rate * grads[name]
        current = MlpParams(class_weights=params.class_weights, **arrays)
        loss = weighted_cross_entropy(object_logits(x, current), y, current.class_weights)
        losses.append(loss)
        if epoch % 50 == 0:
            log.debug("classifier epoch %d loss %.6f", epoch, loss)
    log.info("object classifier trained on %d samples (%d positive), final loss %.5f",
             len(y), int(y.sum()), losses[-1])
    return ClassifierTrainResult(MlpParams(class_weights=params.class_weights, **arrays), losses)
