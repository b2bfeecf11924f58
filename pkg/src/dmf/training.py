"""Adam training loop, evaluation and finite-difference gradient checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Batch, ModelParams, backward, bce_with_logits, forward, predict_batch

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams) -> AdamState:
        cfg = params.config
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def apply(self, params: ModelParams, grads: dict) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, g in grads.items():
            p = params.tensors[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            tmp = np.multiply(g, 1.0 - b1)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.multiply(v, 1.0 / c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p -= tmp

    def tensors(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, params: ModelParams, extra: dict, step: int) -> AdamState:
        st = cls.for_params(params)
        st.step = step
        for k, v in extra.items():
            kind, name = k.split(".", 2)[1:]
            getattr(st, kind)[name] = v.copy()
        return st


def loss_and_grads(params: ModelParams, batch: Batch):
    logits, cache = forward(params, batch, keep=True)
    loss, dlogits = bce_with_logits(logits, batch.labels)
    return loss, backward(params, batch, cache, dlogits)


def sgd_step(params: ModelParams, batch: Batch, lr: float) -> float:
    loss, grads = loss_and_grads(params, batch)
    for name, g in grads.items():
        params.tensors[name] -= lr * g
    return loss


def train_epoch(data: Batch, params: ModelParams, opt: AdamState, epoch: int = 0, batch_size: int | None = None):
    """One shuffled pass with Adam. Shuffling depends only on (seed, epoch)."""
    cfg = params.config
    bs = batch_size or cfg.batch_size
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    total, seen = 0.0, 0
    for lo in range(0, len(order), bs):
        idx = order[lo:lo + bs]
        mb = data.take(idx)
        loss, grads = loss_and_grads(params, mb)
        if not np.isfinite(loss):
            norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {opt.step}: grad norms {norms}")
        opt.apply(params, grads)
        total += loss * len(idx)
        seen += len(idx)
    return {"epoch": epoch, "loss": total / max(1, seen), "steps": opt.step, "examples": seen}


def evaluate(params: ModelParams, data: Batch) -> dict:
    from .data import auc, gauc

    preds = predict_batch(params, data)
    labels = data.labels.astype(np.int64)
    g, skipped = gauc(data.users, labels, preds, return_skipped=True)
    return {"auc": auc(labels, preds), "gauc": g, "n_users_skipped": skipped,
            "logloss": float(np.mean(-(labels * np.log(np.clip(preds, 1e-7, 1)) +
                                       (1 - labels) * np.log(np.clip(1 - preds, 1e-7, 1)))))}


def finite_difference(params: ModelParams, batch: Batch, name: str, h: float = 1e-3) -> np.ndarray:
    """Central differences of the mean BCE loss for every entry of one tensor."""
    p = params.tensors[name]
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up, _ = bce_with_logits(forward(params, batch), batch.labels)
        flat[i] = old - h
        down, _ = bce_with_logits(forward(params, batch), batch.labels)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def gradient_check(params: ModelParams, batch: Batch, h: float = 1e-3, floor: float = 1e-8) -> dict:
    """Relative error ||g - g_fd|| / max(||g||, ||g_fd||) per tensor.

    Run this on a float64 copy of the model; float32 round-off swamps h=1e-3.
    The denominator is floored at ``floor`` so structurally zero gradients
    (biases in front of a softmax) compare absolute noise instead of noise/noise.
    """
    _, grads = loss_and_grads(params, batch)
    out = {}
    for name in sorted(params.tensors):
        g = grads.get(name, np.zeros_like(params.tensors[name]))
        fd = finite_difference(params, batch, name, h)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), floor)
        out[name] = float(np.linalg.norm(g - fd) / denom)
    return out
