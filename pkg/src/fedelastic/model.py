"""Models, losses and gradients over a flat float64 parameter vector.

Every model is represented by a single 1-D ``np.ndarray`` ("parameter
vector"). Layers are laid out in order as ``W`` (row-major, ``in x out``)
followed by ``b``. :func:`unflatten` returns views into that vector, so the
hot training loop never copies weights.

Supported model kinds:

``linear``
    least squares, ``loss = mean(0.5 * (x @ w - y) ** 2)``, no bias.
``logistic``
    binary (sigmoid, one weight vector + bias) when ``num_classes == 2``,
    multinomial (softmax) otherwise.
``mlp``
    fully connected, ReLU (or tanh) hidden layers, softmax cross-entropy head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

KINDS = ("linear", "logistic", "mlp")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ConfigurationError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigurationError("model input_dim must be positive")
        if self.kind == "linear" and self.num_classes != 1:
            raise ConfigurationError("linear regression has a single real output; num_classes must be 1")
        if self.kind in ("logistic", "mlp") and self.num_classes < 2:
            raise ConfigurationError(f"{self.kind} needs num_classes >= 2")
        if self.kind == "mlp":
            if not self.hidden or any(h < 1 for h in self.hidden):
                raise ConfigurationError("mlp needs a nonempty list of positive hidden layer sizes")
            if self.activation not in ACTIVATIONS:
                raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        elif self.hidden:
            raise ConfigurationError(f"{self.kind} model takes no hidden layers")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear"

    @property
    def is_convex(self) -> bool:
        return self.kind in ("linear", "logistic")

    @property
    def binary(self) -> bool:
        return self.kind == "logistic" and self.num_classes == 2

    def layer_shapes(self) -> list[tuple[tuple[int, int], int]]:
        """``[((fan_in, fan_out), bias_len), ...]``; bias_len 0 means no bias."""
        if self.kind == "linear":
            return [((self.input_dim, 1), 0)]
        if self.kind == "logistic":
            out = 1 if self.binary else self.num_classes
            return [((self.input_dim, out), out)]
        sizes = (self.input_dim,) + self.hidden + (self.num_classes,)
        return [((a, b), b) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def num_params(self) -> int:
        return sum(a * b + nb for (a, b), nb in self.layer_shapes())


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels (class ids or regression targets)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ConfigurationError("features must be a 2-D array")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ConfigurationError(
                f"feature rows ({X.shape[0]}) and labels ({y.shape}) disagree"
            )
        if self.num_classes is not None:
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ConfigurationError(f"class ids must lie in [0, {self.num_classes})")
        else:
            y = y.astype(np.float64)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def batch(self, indices) -> "Batch":
        return Batch(self, np.asarray(indices, dtype=np.int64))


@dataclass(frozen=True)
class Batch:
    """A view of ``dataset`` restricted to ``indices`` (unique, in range)."""

    dataset: Dataset
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 1:
            raise ConfigurationError("a batch needs at least one index")
        if idx.min() < 0 or idx.max() >= len(self.dataset):
            raise ConfigurationError("batch index out of range")
        if np.unique(idx).size != idx.size:
            raise ConfigurationError("batch indices must be unique")
        object.__setattr__(self, "indices", idx)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]

    def __len__(self) -> int:
        return self.indices.size


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------

def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split ``theta`` into per-layer ``(W, b)`` views (``b`` is None if absent)."""
    _check_dim(spec, theta)
    layers = []
    pos = 0
    for (a, b), nb in spec.layer_shapes():
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = None
        if nb:
            bias = theta[pos:pos + nb]
            pos += nb
        layers.append((W, bias))
    return layers


def flatten(spec: ModelSpec, layers) -> np.ndarray:
    parts = []
    for ((a, b), nb), (W, bias) in zip(spec.layer_shapes(), layers):
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (a, b):
            raise ConfigurationError(f"layer weight shape {W.shape} != {(a, b)}")
        parts.append(W.ravel())
        if nb:
            bias = np.asarray(bias, dtype=np.float64)
            if bias.shape != (nb,):
                raise ConfigurationError(f"bias shape {bias.shape} != {(nb,)}")
            parts.append(bias)
    return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Zeros for the convex models, uniform Kaiming-style init for the MLP."""
    theta = np.zeros(spec.num_params)
    if spec.kind != "mlp":
        return theta
    for W, b in unflatten(spec, theta):
        bound = 1.0 / np.sqrt(W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return theta


def _check_dim(spec: ModelSpec, theta: np.ndarray) -> None:
    if theta.ndim != 1 or theta.shape[0] != spec.num_params:
        raise ConfigurationError(
            f"parameter vector has shape {theta.shape}, model needs ({spec.num_params},)"
        )


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        return data
    return data.features, data.labels


# --------------------------------------------------------------------------
# losses and gradients
# --------------------------------------------------------------------------

def _softmax_xent(logits: np.ndarray, y: np.ndarray, need_grad: bool):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, y]))
    if not need_grad:
        return loss, None
    p = ez / s
    p[rows, y] -= 1.0
    p /= n
    return loss, p


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, data, need_grad: bool = True):
    """Mean per-example loss and (optionally) its gradient w.r.t. ``theta``.

    ``data`` is a :class:`Dataset`, a :class:`Batch`, or a ``(X, y)`` tuple.
    """
    _check_dim(spec, theta)
    X, y = _arrays(data)
    if X.shape[1] != spec.input_dim:
        raise ConfigurationError(f"data has {X.shape[1]} features, model expects {spec.input_dim}")
    n = X.shape[0]
    layers = unflatten(spec, theta)
    g = np.empty_like(theta) if need_grad else None
    glayers = unflatten(spec, g) if need_grad else None

    if spec.kind == "linear":
        (W, _), = layers
        r = X @ W[:, 0] - y
        loss = 0.5 * float(r @ r) / n
        if need_grad:
            glayers[0][0][:, 0] = X.T @ r / n
        return loss, g

    if spec.binary:
        (W, b), = layers
        z = X @ W[:, 0] + b[0]
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        if need_grad:
            err = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / n
            glayers[0][0][:, 0] = X.T @ err
            glayers[0][1][0] = err.sum()
        return loss, g

    if spec.kind == "logistic":
        (W, b), = layers
        loss, dz = _softmax_xent(X @ W + b, y, need_grad)
        if need_grad:
            np.dot(X.T, dz, out=glayers[0][0])
            glayers[0][1][:] = dz.sum(axis=0)
        return loss, g

    # mlp
    acts = [X]
    pre = []
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
            acts.append(h)
        else:
            h = z
    loss, delta = _softmax_xent(h, y, need_grad)
    if not need_grad:
        return loss, None
    for i in range(last, -1, -1):
        gW, gb = glayers[i]
        np.dot(acts[i].T, delta, out=gW)
        gb[:] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if spec.activation == "relu":
            delta *= pre[i - 1] > 0
        else:
            delta *= 1.0 - acts[i] ** 2
    return loss, g


def loss(spec: ModelSpec, theta: np.ndarray, data) -> float:
    return loss_and_grad(spec, theta, data, need_grad=False)[0]


def grad(spec: ModelSpec, theta: np.ndarray, data) -> np.ndarray:
    return loss_and_grad(spec, theta, data)[1]


def predict(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Class ids for classifiers, real predictions for linear regression."""
    _check_dim(spec, theta)
    layers = unflatten(spec, theta)
    if spec.kind == "linear":
        return X @ layers[0][0][:, 0]
    if spec.binary:
        W, b = layers[0]
        return (X @ W[:, 0] + b[0] > 0).astype(np.int64)
    h = X
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h.argmax(axis=1)


def accuracy(spec: ModelSpec, theta: np.ndarray, data: Dataset, chunk: int = 8192) -> float:
    if not spec.is_classifier:
        raise ConfigurationError("accuracy is only defined for classifiers")
    hits = 0
    for start in range(0, len(data), chunk):
        X = data.features[start:start + chunk]
        hits += int(np.sum(predict(spec, theta, X) == data.labels[start:start + chunk]))
    return hits / len(data)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def make_synthetic(num_classes: int, input_dim: int, n: int, class_separation: float,
                   seed: int) -> Dataset:
    """Balanced Gaussian class clusters with unit noise.

    Class means are ``class_separation`` times unit directions; when
    ``num_classes <= input_dim`` the directions are orthonormal.
    """
    if num_classes < 2:
        raise ConfigurationError("make_synthetic needs at least two classes")
    if n < num_classes:
        raise ConfigurationError("need at least one example per class (n >= num_classes)")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(input_dim, num_classes))
    if num_classes <= input_dim:
        dirs, _ = np.linalg.qr(dirs)
    dirs = (dirs / np.linalg.norm(dirs, axis=0)).T
    means = class_separation * dirs
    labels = rng.permutation(np.arange(n) % num_classes)
    X = means[labels] + rng.normal(size=(n, input_dim))
    return Dataset(X, labels, num_classes)
