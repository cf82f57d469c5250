"""Flat-vector softmax classifiers with hand-derived gradients.

Two shapes are supported: multinomial logistic regression (``hidden == 0``)
and a one-hidden-layer tanh network. Parameters travel as a single flat
float64 vector so that averaging, cosine similarity, and upload-size
accounting all operate on the same object.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

BITS_PER_PARAMETER = 32


def param_count(dim_in: int, dim_out: int, hidden: int = 0) -> int:
    """Number of scalar parameters for the given shape (weights + biases)."""
    if hidden == 0:
        return (dim_in + 1) * dim_out
    return (dim_in + 1) * hidden + (hidden + 1) * dim_out


@dataclass(frozen=True)
class ModelParams:
    """A classifier's parameters as one flat vector plus shape metadata."""

    weights: np.ndarray
    dim_in: int
    dim_out: int
    hidden: int = 0

    def __post_init__(self):
        expected = param_count(self.dim_in, self.dim_out, self.hidden)
        if self.weights.ndim != 1 or self.weights.size != expected:
            raise ValueError(
                f"weights length {self.weights.size} does not match shape "
                f"(dim_in={self.dim_in}, hidden={self.hidden}, dim_out={self.dim_out}): "
                f"expected {expected}"
            )

    @property
    def size_bits(self) -> int:
        """Upload payload size in bits (fixed bits per parameter)."""
        return self.weights.size * BITS_PER_PARAMETER

    def with_weights(self, weights: np.ndarray) -> "ModelParams":
        return replace(self, weights=weights)


@dataclass(frozen=True)
class LabeledBatch:
    """Feature matrix with integer class labels, one row per sample."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features rows ({self.features.shape[0]}) != labels ({self.labels.shape[0]})"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledBatch":
        return LabeledBatch(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class GradientUpdate:
    """Flat gradient of the mean cross-entropy plus the sample count used."""

    grad: np.ndarray
    sample_count: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise ValueError("gradient contains non-finite entries")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def init_params(
    dim_in: int, dim_out: int, hidden: int = 0, seed=0, scale: float = 0.05
) -> ModelParams:
    """Seeded uniform initialization in [-scale, scale]."""
    rng = _rng(seed)
    n = param_count(dim_in, dim_out, hidden)
    w = rng.uniform(-scale, scale, size=n)
    return ModelParams(w, dim_in, dim_out, hidden)


def zero_params(dim_in: int, dim_out: int, hidden: int = 0) -> ModelParams:
    return ModelParams(np.zeros(param_count(dim_in, dim_out, hidden)), dim_in, dim_out, hidden)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _unpack(p: ModelParams):
    """Views into the flat vector: (W, b) or (W1, b1, W2, b2)."""
    d, c, h = p.dim_in, p.dim_out, p.hidden
    w = p.weights
    if h == 0:
        return w[: d * c].reshape(d, c), w[d * c :]
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * c
    return (
        w[:o1].reshape(d, h),
        w[o1:o2],
        w[o2:o3].reshape(h, c),
        w[o3:],
    )


def _logits(p: ModelParams, x: np.ndarray):
    """Raw class scores; for the tanh network also returns the hidden activations."""
    if p.hidden == 0:
        w, b = _unpack(p)
        return x @ w + b, None
    w1, b1, w2, b2 = _unpack(p)
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def _check_features(p: ModelParams, features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != p.dim_in:
        raise ValueError(
            f"feature matrix must be 2-D with {p.dim_in} columns, got shape {features.shape}"
        )
    return features


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class-probability matrix: row-wise softmax over the model's logits."""
    features = _check_features(params, features)
    if features.shape[0] == 0:
        return np.zeros((0, params.dim_out))
    z, _ = _logits(params, features)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss(params: ModelParams, batch: LabeledBatch) -> float:
    """Mean cross-entropy over the batch (log-softmax form for accuracy)."""
    if len(batch) == 0:
        raise ValueError("loss requires a nonempty batch")
    x = _check_features(params, batch.features)
    z, _ = _logits(params, x)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = log_probs[np.arange(len(batch)), batch.labels]
    return float(-picked.mean())


def gradient(params: ModelParams, batch: LabeledBatch) -> GradientUpdate:
    """Exact analytic gradient of loss() at params."""
    if len(batch) == 0:
        raise ValueError("gradient requires a nonempty batch")
    x = _check_features(params, batch.features)
    n = len(batch)
    z, hidden = _logits(params, x)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    if params.hidden == 0:
        gw = x.T @ delta
        gb = delta.sum(axis=0)
        flat = np.concatenate([gw.ravel(), gb])
    else:
        _, _, w2, _ = _unpack(params)
        gw2 = hidden.T @ delta
        gb2 = delta.sum(axis=0)
        dhidden = (delta @ w2.T) * (1.0 - hidden * hidden)
        gw1 = x.T @ dhidden
        gb1 = dhidden.sum(axis=0)
        flat = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
    return GradientUpdate(flat, n)


def sgd_train(
    params: ModelParams,
    data: LabeledBatch,
    epochs: int,
    batch_size: int,
    lr: float,
    seed,
) -> ModelParams:
    """Mini-batch SGD: exactly epochs * ceil(D / batch_size) update steps.

    Batch order is a fresh seeded shuffle per epoch; a batch_size larger
    than the dataset degenerates to one full-batch step per epoch.
    Deterministic for a fixed seed.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if len(data) == 0:
        raise ValueError("sgd_train requires a nonempty batch")
    rng = _rng(seed)
    n = len(data)
    n_batches = -(-n // batch_size)
    current = params
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(n_batches):
            idx = order[i * batch_size : (i + 1) * batch_size]
            g = gradient(current, data.subset(idx))
            current = current.with_weights(current.weights - lr * g.grad)
    return current


def evaluate(params: ModelParams, batch: LabeledBatch) -> float:
    """Fraction of argmax predictions matching labels (ties -> lowest class id)."""
    if len(batch) == 0:
        raise ValueError("evaluate requires a nonempty batch")
    probs = forward(params, batch.features)
    preds = probs.argmax(axis=1)
    return float((preds == batch.labels).mean())


def confidences(params: ModelParams, features: np.ndarray):
    """Per-sample (argmax class, max probability), ties to the lowest class id."""
    probs = forward(params, features)
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    classes = probs.argmax(axis=1)
    return classes, probs.max(axis=1)
