"""Dense linear algebra, activations and a small PReLU MLP.

Everything here is a thin, shape-checked layer over numpy. Model-path arrays
are float32; softmax normalisation accumulates in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT = np.float32


class ShapeError(ValueError):
    """Operands have incompatible shapes (a wiring/configuration bug)."""


class EmptyHistoryError(ValueError):
    """A softmax was requested over a sequence with no valid positions."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax(scores: np.ndarray, valid: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis, ignoring positions where ``valid`` is False.

    Rows without any valid position come back as all zeros. The result has
    the dtype of ``scores``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(scores, dtype=np.float64) / temperature
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), s.shape)
    s = np.where(valid, s, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(valid, np.exp(s - top), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)
    return out.astype(np.asarray(scores).dtype, copy=False)


def softmax_masked(scores, valid, temperature: float = 1.0) -> np.ndarray:
    """1-D masked softmax; raises :class:`EmptyHistoryError` if nothing is valid."""
    scores = np.asarray(scores, dtype=FLOAT)
    valid = np.asarray(valid, dtype=bool)
    if scores.shape != valid.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and mask {valid.shape} must be equal 1-D shapes")
    if not valid.any():
        raise EmptyHistoryError("no valid history positions")
    return masked_softmax(scores, valid, temperature)


def softmax_backward(weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # Jacobian-vector product of softmax along the last axis.
    inner = (weights * grad).sum(axis=-1, keepdims=True)
    return weights * (grad - inner)


def prelu(x, slope) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x >= 0, x, slope * x)


def prelu_backward(x: np.ndarray, slope: np.ndarray, grad: np.ndarray):
    """Returns (d_input, d_slope); d_slope is summed over leading axes."""
    neg = x < 0
    dx = np.where(neg, slope * grad, grad)
    dslope = np.where(neg, x * grad, 0.0)
    dslope = dslope.reshape(-1, dslope.shape[-1]).sum(axis=0)
    return dx, dslope


def broadcast_add(row: np.ndarray, m: np.ndarray) -> np.ndarray:
    row = np.asarray(row)
    m = np.asarray(m)
    if row.ndim == 1:
        row = row[None, :]
    if row.shape[0] != 1 or row.shape[1] != m.shape[-1]:
        raise ShapeError(f"cannot broadcast {row.shape} onto {m.shape}")
    return m + row


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, FLOAT))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = np.asarray(x)
    return -np.logaddexp(0.0, -x)


@dataclass
class MlpParams:
    """Fully connected stack: PReLU on every hidden layer, linear output."""

    weights: list[np.ndarray]  # each [out, in]
    biases: list[np.ndarray]
    slopes: list[np.ndarray]  # one per hidden layer

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, dtype=FLOAT, slope: float = 0.25) -> MlpParams:
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        weights, biases, slopes = [], [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        for width in sizes[1:-1]:
            slopes.append(np.full(width, slope, dtype=dtype))
        return cls(weights, biases, slopes)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        for i, s in enumerate(self.slopes):
            out[f"{prefix}.a{i}"] = s
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray], prefix: str) -> MlpParams:
        weights, biases, slopes = [], [], []
        i = 0
        while f"{prefix}.w{i}" in tensors:
            weights.append(tensors[f"{prefix}.w{i}"])
            biases.append(tensors[f"{prefix}.b{i}"])
            i += 1
        for j in range(i - 1):
            slopes.append(tensors[f"{prefix}.a{j}"])
        if not weights:
            raise KeyError(f"no MLP tensors under {prefix!r}")
        return cls(weights, biases, slopes)


def mlp_forward(x: np.ndarray, p: MlpParams, keep: bool = False):
    """Apply the MLP to the last axis of ``x``.

    With ``keep=True`` also returns the cache needed by :func:`mlp_backward`.
    """
    x = np.asarray(x)
    if x.shape[-1] != p.in_width:
        raise ShapeError(f"MLP expects width {p.in_width}, got {x.shape[-1]}")
    inputs, pre = [], []
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < last:
            pre.append(z)
            h = prelu(z, p.slopes[i])
        else:
            h = z
    if keep:
        return h, (inputs, pre)
    return h


def mlp_backward(cache, p: MlpParams, grad: np.ndarray):
    """Returns (d_input, {"w": [...], "b": [...], "a": [...]})."""
    inputs, pre = cache
    n_layers = len(p.weights)
    dw = [None] * n_layers
    db = [None] * n_layers
    da = [None] * len(p.slopes)
    g = grad
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g, da[i] = prelu_backward(pre[i], p.slopes[i], g)
        h = inputs[i]
        g2 = g.reshape(-1, g.shape[-1])
        dw[i] = g2.T @ h.reshape(-1, h.shape[-1])
        db[i] = g2.sum(axis=0)
        g = g @ p.weights[i]
    return g, {"w": dw, "b": db, "a": da}


def mlp_grads_named(grads, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(grads["w"], grads["b"])):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    for i, a in enumerate(grads["a"]):
        out[f"{prefix}.a{i}"] = a
    return out
