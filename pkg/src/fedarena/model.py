"""Small differentiable classifiers with closed-form gradients.

Two architectures cover the desk-scale tasks: multinomial softmax
regression and a one-hidden-layer ReLU MLP.  Weights live in a single flat
float64 vector so aggregation rules can treat every model identically; the
layout is documented on `unpack`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, require_finite

KINDS = ("softmax_regression", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ValueError("mlp1 requires hidden_dim >= 1")

    @property
    def weight_dim(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "softmax_regression":
            return (d + 1) * c
        return (d + 1) * h + (h + 1) * c


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def _check(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.weight_dim,):
        raise ValueError(
            f"weight vector has dimension {w.shape}, model expects ({spec.weight_dim},)"
        )
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError("batch input width does not match model input_dim")
    if batch.labels.size and batch.labels.max() >= spec.num_classes:
        raise ValueError("label out of range for model num_classes")
    return w


def unpack(spec: ModelSpec, w: np.ndarray):
    """Split the flat weight vector into per-layer arrays (views).

    softmax_regression: W (C x D) row-major, then b (C).
    mlp1: W1 (H x D), b1 (H), W2 (C x H), b2 (C).
    """
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "softmax_regression":
        return w[: c * d].reshape(c, d), w[c * d :]
    o1 = h * d
    o2 = o1 + h
    o3 = o2 + c * h
    return w[:o1].reshape(h, d), w[o1:o2], w[o2:o3].reshape(c, h), w[o3:]


def logits(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    """Pre-softmax class scores, one row per example."""
    w = _check(spec, w, batch)
    x = batch.inputs
    if spec.kind == "softmax_regression":
        wm, b = unpack(spec, w)
        return x @ wm.T + b
    w1, b1, w2, b2 = unpack(spec, w)
    hid = np.maximum(x @ w1.T + b1, 0.0)
    return hid @ w2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    # max subtraction keeps exp() in range for arbitrary logits
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def risk(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean cross-entropy of the batch under the model."""
    if batch.size == 0:
        raise ValueError("empty batch")
    z = logits(spec, w, batch)
    logp = _log_softmax(z)
    return float(-logp[np.arange(batch.size), batch.labels].mean())


def grad(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    """Exact gradient of `risk` with respect to the flat weight vector."""
    if batch.size == 0:
        raise ValueError("empty batch")
    w = _check(spec, w, batch)
    x = batch.inputs
    n = batch.size
    out = np.zeros_like(w)

    if spec.kind == "softmax_regression":
        wm, b = unpack(spec, w)
        z = x @ wm.T + b
        p = np.exp(_log_softmax(z))
        p[np.arange(n), batch.labels] -= 1.0
        p /= n
        gw, gb = unpack(spec, out)
        gw += p.T @ x
        gb += p.sum(axis=0)
        return out

    w1, b1, w2, b2 = unpack(spec, w)
    z1 = x @ w1.T + b1
    hid = np.maximum(z1, 0.0)
    z2 = hid @ w2.T + b2
    p = np.exp(_log_softmax(z2))
    p[np.arange(n), batch.labels] -= 1.0
    p /= n
    dh = p @ w2
    dz1 = dh * (z1 > 0.0)  # ReLU subgradient at 0 is taken as 0
    g1, gb1, g2, gb2 = unpack(spec, out)
    g1 += dz1.T @ x
    gb1 += dz1.sum(axis=0)
    g2 += p.T @ hid
    gb2 += p.sum(axis=0)
    return out


def accuracy(spec: ModelSpec, w, dataset: Batch) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if dataset.size == 0:
        raise ValueError("empty evaluation set")
    z = logits(spec, w, dataset)
    pred = np.argmax(z, axis=1)  # first maximum, i.e. lowest class index
    return float(np.mean(pred == dataset.labels))


def init_weights(spec: ModelSpec, rng: Rng) -> np.ndarray:
    """Uniform [-a, a] layer init with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    w = np.zeros(spec.weight_dim)
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "softmax_regression":
        wm, _ = unpack(spec, w)
        a = np.sqrt(6.0 / (d + c))
        wm += rng.uniform(-a, a, wm.shape)
    else:
        w1, _, w2, _ = unpack(spec, w)
        a1 = np.sqrt(6.0 / (d + h))
        a2 = np.sqrt(6.0 / (h + c))
        w1 += rng.uniform(-a1, a1, w1.shape)
        w2 += rng.uniform(-a2, a2, w2.shape)
    return require_finite(w, "initial weights")
