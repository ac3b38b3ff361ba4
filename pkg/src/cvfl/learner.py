"""Local training and model aggregation.

Models are small ReLU MLPs whose parameters live in a single flat float64
vector. The layout is layer-major and, inside a layer, the ``(fan_in,
fan_out)`` weight matrix in row-major order followed by the bias. Keeping
everything flat turns aggregation and update similarity into plain vector
arithmetic.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import LabeledDataset
from .exceptions import ConfigurationError, FormatError, VersionMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelArch:
    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ConfigurationError("architecture needs input, >= 1 hidden and output widths")
        if min(self.widths) < 1:
            raise ConfigurationError("layer widths must be >= 1")

    @classmethod
    def mlp(cls, d: int, hidden=(64, 64), C: int = 10) -> "ModelArch":
        return cls((d, *hidden, C))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self):
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def size(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass(frozen=True)
class ModelParams:
    arch: ModelArch
    theta: np.ndarray
    version: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.arch.size,):
            raise ConfigurationError(f"theta has shape {theta.shape}, arch needs ({self.arch.size},)")
        if not np.all(np.isfinite(theta)):
            raise ConfigurationError("theta contains non-finite values")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def with_version(self, version: int) -> "ModelParams":
        return ModelParams(self.arch, self.theta, version)


@dataclass(frozen=True)
class Update:
    vehicle_id: int
    model_version: int
    delta: np.ndarray
    num_samples: int
    loss_before: float = field(default=float("nan"), compare=False)
    loss_after: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigurationError("an update must come from at least one sample")


@dataclass(frozen=True)
class ClusterPartition:
    assignment: np.ndarray
    num_clusters: int

    def members(self, cluster: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.assignment == cluster)]


# --------------------------------------------------------------------------- MLP math


def unpack(theta: np.ndarray, arch: ModelArch):
    layers, offset = [], 0
    for fan_in, fan_out in arch.layer_shapes:
        W = theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset : offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def init_params(arch: ModelArch, seed, version: int = 0) -> ModelParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in arch.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParams(arch, np.concatenate(parts), version)


def zero_params(arch: ModelArch, version: int = 0) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.size), version)


def logits(theta: np.ndarray, arch: ModelArch, X: np.ndarray) -> np.ndarray:
    layers = unpack(theta, arch)
    a = X
    for W, b in layers[:-1]:
        a = np.maximum(a @ W + b, 0.0)
    W, b = layers[-1]
    return a @ W + b


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(theta: np.ndarray, arch: ModelArch, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``theta``."""
    layers = unpack(theta, arch)
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        a = np.maximum(a @ W + b, 0.0)
        acts.append(a)
    W, b = layers[-1]
    logp = _log_softmax(a @ W + b)
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean()

    grad = np.empty_like(theta)
    grads = unpack(grad, arch)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for layer in range(len(layers) - 1, -1, -1):
        gW, gb = grads[layer]
        gW[...] = acts[layer].T @ delta
        gb[...] = delta.sum(axis=0)
        if layer:
            delta = (delta @ layers[layer][0].T) * (acts[layer] > 0)
    return float(loss), grad


def _check_dims(params: ModelParams, ds: LabeledDataset) -> None:
    if ds.dim != params.arch.input_dim:
        raise ConfigurationError(f"dataset has {ds.dim} features, model expects {params.arch.input_dim}")
    if ds.num_classes > params.arch.num_classes:
        raise ConfigurationError("dataset has more classes than the model outputs")


def sgd_epochs(theta, arch, X, y, epochs, lr, batch_size, rng) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            _, g = loss_and_grad(theta, arch, X[batch], y[batch])
            theta -= lr * g
    return theta


def local_train(
    params: ModelParams,
    ds: LabeledDataset,
    epochs: int = 1,
    lr: float = 0.05,
    batch_size: int = 10,
    seed=0,
    vehicle_id: int = -1,
) -> Update:
    """Run minibatch SGD on ``ds`` starting from ``params``; return the parameter change."""
    _check_dims(params, ds)
    if epochs < 0 or batch_size < 1:
        raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(seed)
    after = sgd_epochs(params.theta, params.arch, ds.features, ds.labels, epochs, lr, batch_size, rng)
    return Update(
        vehicle_id=vehicle_id,
        model_version=params.version,
        delta=after - params.theta,
        num_samples=len(ds),
    )


def fedavg(base: ModelParams, updates) -> ModelParams:
    """Apply the sample-count weighted mean of ``updates`` to ``base``."""
    updates = list(updates)
    if not updates:
        logger.info("fedavg called without updates; version %d unchanged", base.version)
        return base
    for u in updates:
        if u.model_version != base.version:
            raise VersionMismatchError(
                f"update from vehicle {u.vehicle_id} targets version {u.model_version}, base is {base.version}"
            )
        if u.delta.shape != base.theta.shape:
            raise ConfigurationError("update length does not match the model")
    sizes = np.array([u.num_samples for u in updates], dtype=float)
    weights = sizes / sizes.sum()
    step = np.zeros_like(base.theta)
    for w, u in zip(weights, updates):
        step += w * u.delta
    return ModelParams(base.arch, base.theta + step, base.version)


def aggregation_weights(updates) -> np.ndarray:
    sizes = np.array([u.num_samples for u in updates], dtype=float)
    return sizes / sizes.sum()


def _vector(x) -> np.ndarray:
    return np.asarray(x.delta if isinstance(x, Update) else x, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two updates; 0 when either is the zero vector."""
    va, vb = _vector(a), _vector(b)
    if va.shape != vb.shape:
        raise ConfigurationError("updates differ in length")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        logger.warning("cosine similarity of a zero update defined as 0")
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def cosine_similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    V = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        logger.warning("zero update(s) present; their similarities are defined as 0")
    safe = np.where(norms > 0, norms, 1.0)
    S = (V @ V.T) / np.outer(safe, safe)
    S[norms == 0, :] = 0.0
    S[:, norms == 0] = 0.0
    return np.clip(S, -1.0, 1.0)


def average_linkage(distance: np.ndarray, n_clusters: int) -> np.ndarray:
    """Agglomerative clustering with average linkage down to ``n_clusters``.

    Clusters are keyed by their smallest member index; among equally close
    pairs the lexicographically smallest key pair merges first. Returned
    labels are numbered by first appearance.
    """
    n = distance.shape[0]
    D = np.array(distance, dtype=float)
    sizes = {i: 1 for i in range(n)}
    members = {i: [i] for i in range(n)}
    active = list(range(n))
    while len(active) > max(n_clusters, 1):
        best = None
        for ai, a in enumerate(active):
            for b in active[ai + 1 :]:
                if best is None or D[a, b] < best[0]:
                    best = (D[a, b], a, b)
        _, a, b = best
        na, nb = sizes[a], sizes[b]
        for c in active:
            if c not in (a, b):
                D[a, c] = D[c, a] = (na * D[a, c] + nb * D[b, c]) / (na + nb)
        sizes[a] = na + nb
        members[a] += members.pop(b)
        active.remove(b)

    labels = np.empty(n, dtype=int)
    for cid, key in enumerate(sorted(active)):
        labels[members[key]] = cid
    return labels


class UpdateClustering(ClusterMixin, BaseEstimator):
    """Average-linkage clustering of update vectors under cosine distance.

    Parameters
    ----------
    max_clusters : int
        Merging stops once this many clusters remain.
    """

    def __init__(self, max_clusters: int = 2):
        self.max_clusters = max_clusters

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.max_clusters < 1:
            raise ConfigurationError("max_clusters must be >= 1")
        self.similarity_ = cosine_similarity_matrix(X)
        self.labels_ = average_linkage(1.0 - self.similarity_, self.max_clusters)
        self.n_clusters_ = int(self.labels_.max()) + 1
        return self


def hierarchical_cluster(updates, max_clusters: int) -> ClusterPartition:
    updates = list(updates)
    if not updates:
        raise ConfigurationError("need at least one update")
    X = np.vstack([_vector(u) for u in updates])
    model = UpdateClustering(max_clusters).fit(X)
    return ClusterPartition(model.labels_, model.n_clusters_)


def spawn_cluster_models(base: ModelParams, updates, partition: ClusterPartition) -> list[ModelParams]:
    """One aggregated model per cluster, versioned by cluster id."""
    updates = list(updates)
    models = []
    for c in range(partition.num_clusters):
        chosen = [updates[i] for i in partition.members(c)]
        models.append(fedavg(base, chosen).with_version(c))
    return models


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    # argmax picks the lowest index on ties
    return np.argmax(logits(params.theta, params.arch, X), axis=1)


def evaluate_accuracy(params: ModelParams, ds: LabeledDataset) -> float:
    _check_dims(params, ds)
    if len(ds) == 0:
        return 0.0
    return float(np.mean(predict(params, ds.features) == ds.labels))


def evaluate_loss(params: ModelParams, ds: LabeledDataset) -> float:
    _check_dims(params, ds)
    logp = _log_softmax(logits(params.theta, params.arch, ds.features))
    return float(-logp[np.arange(len(ds)), ds.labels].mean())


# --------------------------------------------------------------------------- checkpoints

_CHECKPOINT_MAGIC = b"CVFLPAR1"


def save_params(params: ModelParams, path) -> None:
    """Write ``magic | u32 header length | JSON header | little-endian float64 theta``."""
    header = json.dumps({"widths": list(params.arch.widths), "version": params.version, "dtype": "<f8"}).encode()
    body = params.theta.astype("<f8").tobytes()
    Path(path).write_bytes(_CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _CHECKPOINT_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    arch = ModelArch(tuple(header["widths"]))
    body = raw[12 + hlen :]
    if len(body) != 8 * arch.size:
        raise FormatError(f"{path}: expected {arch.size} parameters")
    return ModelParams(arch, np.frombuffer(body, dtype="<f8"), int(header["version"]))


# --------------------------------------------------------------------------- estimator


class FlatMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained by plain minibatch SGD on softmax cross-entropy.

    Thin estimator wrapper over the flat-parameter functions above, so a
    vehicle's model can be dropped into sklearn pipelines and scorers.
    """

    def __init__(self, hidden_layer_sizes=(64, 64), learning_rate=0.05, batch_size=10, epochs=1, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        arch = ModelArch((X.shape[1], *self.hidden_layer_sizes, len(self.classes_)))
        rng = np.random.default_rng(self.random_state)
        start = init_params(arch, rng.integers(2**63))
        theta = sgd_epochs(start.theta, arch, X, y_idx, self.epochs, self.learning_rate, self.batch_size, rng)
        self.params_ = ModelParams(arch, theta)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return np.exp(_log_softmax(logits(self.params_.theta, self.params_.arch, X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
