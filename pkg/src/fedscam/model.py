"""Flat-parameter MLP classifier.

Parameters live in a single float32 vector laid out layer by layer as
``W_0 (in x out, row-major), b_0, W_1, b_1, ...``. All arithmetic on the
forward/backward path is done in float64 and the gradient is handed back as
float32, so every optimizer and aggregator only ever sees flat vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

PARAM_DTYPE = np.float32
COSINE_EPS = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ContractError("ModelSpec needs at least 2 layer widths")
        if any(w < 1 for w in widths):
            raise ContractError(f"layer widths must be positive, got {widths}")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) per layer."""
        out = []
        offset = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            n_w = w[i] * w[i + 1]
            ws = slice(offset, offset + n_w)
            bs = slice(offset + n_w, offset + n_w + w[i + 1])
            out.append((ws, (w[i], w[i + 1]), bs))
            offset += n_w + w[i + 1]
        return out


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ContractError("batch features must be a 2-D matrix")
        if len(self.labels) < 1:
            raise ContractError("batch must contain at least one sample")
        if self.features.shape[0] != len(self.labels):
            raise ContractError(
                f"feature rows ({self.features.shape[0]}) != label count ({len(self.labels)})"
            )

    def __len__(self) -> int:
        return len(self.labels)


def init_params(spec: ModelSpec) -> np.ndarray:
    """Glorot-uniform weights, zero biases, seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(spec.num_params, dtype=np.float64)
    for ws, (fan_in, fan_out), _ in spec.slices():
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[ws] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return params.astype(PARAM_DTYPE)


def _check(spec: ModelSpec, params: np.ndarray, features: np.ndarray, labels: np.ndarray):
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ContractError(
            f"parameter vector has shape {params.shape}, expected ({spec.num_params},)"
        )
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ContractError(
            f"features have shape {features.shape}, expected (*, {spec.input_dim})"
        )
    if features.shape[0] != len(labels):
        raise ContractError("feature rows and label count differ")
    if len(labels) and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ContractError(f"labels must lie in [0, {spec.num_classes})")


def _forward(spec: ModelSpec, p: np.ndarray, x: np.ndarray):
    """Returns logits and the per-layer inputs/pre-activations needed for backprop."""
    acts = [x]
    pres = []
    h = x
    layers = spec.slices()
    for i, (ws, shape, bs) in enumerate(layers):
        z = h @ p[ws].reshape(shape) + p[bs]
        if i < len(layers) - 1:
            pres.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts, pres


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its exact gradient.

    The gradient is returned in the dtype of ``params`` (float32 for normal
    use; float64 inputs give a float64 gradient, which finite-difference
    checks rely on).
    """
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.int64)
    _check(spec, params, x, y)
    p = np.asarray(params, dtype=np.float64)
    n = x.shape[0]

    logits, acts, pres = _forward(spec, p, x)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    grad = np.empty_like(p)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    layers = spec.slices()
    for i in range(len(layers) - 1, -1, -1):
        ws, shape, bs = layers[i]
        grad[ws] = (acts[i].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ p[ws].reshape(shape).T) * (pres[i - 1] > 0)
    return loss, grad.astype(params.dtype, copy=False)


def logits(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    out, _, _ = _forward(spec, np.asarray(params, dtype=np.float64), x)
    return out


def vec_metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """(||a||, <a, b>, cos(a, b)) accumulated in float64.

    Cosine is 0 when either vector has norm below 1e-12.
    """
    if a.shape != b.shape:
        raise ContractError(f"vector shapes differ: {a.shape} vs {b.shape}")
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    dot = float(a64 @ b64)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return na, dot, 0.0
    cos = min(1.0, max(-1.0, dot / (na * nb)))
    return na, dot, cos


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return vec_metrics(a, b)[2]


def l2norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def evaluate(spec: ModelSpec, params: np.ndarray, dataset, chunk: int = 4096) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class id) and mean cross-entropy."""
    features, labels = dataset.features, dataset.labels
    n = len(labels)
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    _check(spec, params, np.asarray(features), np.asarray(labels))
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, chunk):
        x = features[start:start + chunk]
        y = np.asarray(labels[start:start + chunk], dtype=np.int64)
        out = logits(spec, params, x)
        correct += int((out.argmax(axis=1) == y).sum())
        loss_sum += float(-_log_softmax(out)[np.arange(len(y)), y].sum())
    return correct / n, loss_sum / n


def param_count(widths: Sequence[int]) -> int:
    return ModelSpec(tuple(widths)).num_params
