"""Target attention and its side-information fusion variants.

Shapes: ``d`` is the item-embedding width, ``d_h`` the attention width, split
evenly over heads. Scores are ``(q' . k) / sqrt(d_h / heads)`` and then
divided by the temperature before the masked softmax.

The single-candidate functions here mirror the batched kernels
(:func:`attend` / :func:`attend_backward`) used during training, so the two
paths share arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .bucketing import Bucketizer
from .features import SimilarityVector
from .numerics import (
    FLOAT,
    MlpParams,
    ShapeError,
    masked_softmax,
    mlp_forward,
    softmax_backward,
)


@dataclass
class AttentionParams:
    w_q: np.ndarray  # [d_h, d]
    w_k: np.ndarray  # [d_h, d_in]
    w_v: np.ndarray  # [d_h, d_in]
    heads: int = 1
    temperature: float = 1.0

    def __post_init__(self):
        if self.w_q.shape[0] % self.heads:
            raise ShapeError(f"d_h={self.w_q.shape[0]} not divisible by heads={self.heads}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.w_k.shape != self.w_v.shape or self.w_k.shape[0] != self.w_q.shape[0]:
            raise ShapeError(f"inconsistent projections {self.w_q.shape} {self.w_k.shape} {self.w_v.shape}")

    @property
    def d_h(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_h // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.head_dim))

    @classmethod
    def init(cls, d: int, d_h: int, heads: int, rng: np.random.Generator, d_in: int | None = None,
             temperature: float = 1.0, dtype=FLOAT) -> AttentionParams:
        d_in = d if d_in is None else d_in

        def glorot(rows, cols):
            bound = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

        return cls(glorot(d_h, d), glorot(d_h, d_in), glorot(d_h, d_in), heads, temperature)


@dataclass
class IdKv:
    """Target-agnostic keys and values from the ID embeddings of one history."""

    k_id: np.ndarray  # [L, d_h]
    v_id: np.ndarray  # [L, d_h]
    valid: np.ndarray  # bool [L]

    def __len__(self) -> int:
        return self.valid.size


@dataclass
class BucketEmbeddingPair:
    e_k: np.ndarray  # [M, d_h]
    e_v: np.ndarray  # [M, d_h]

    @property
    def bucket_count(self) -> int:
        return self.e_k.shape[0]


@dataclass
class LateProjection:
    """Affine maps from a scalar similarity to keys/values, plus its own query map."""

    w_q: np.ndarray  # [d_h, d]
    w_k: np.ndarray  # [d_h]
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray


class Attended(NamedTuple):
    vector: np.ndarray
    weights: np.ndarray  # [heads, L]
    degenerate: bool


# -- batched kernels ---------------------------------------------------------

def attend(qh, k, v, valid, heads: int, scale: float, temperature: float = 1.0):
    """Multi-head attention of one query per row over that row's sequence.

    qh [N, d_h], k/v [N, L, d_h], valid [N, L] -> (out [N, d_h], weights [N, H, L]).
    Rows with no valid positions produce zeros.
    """
    n, length, d_h = k.shape
    hd = d_h // heads
    q4 = qh.reshape(n, heads, hd, 1)
    kt = k.reshape(n, length, heads, hd).transpose(0, 2, 1, 3)
    vt = v.reshape(n, length, heads, hd).transpose(0, 2, 1, 3)
    scores = np.matmul(kt, q4)[..., 0] * scale
    w = masked_softmax(scores, valid[:, None, :], temperature)
    out = np.matmul(w[:, :, None, :], vt)[:, :, 0, :]
    return out.reshape(n, d_h), w


def attend_backward(dout, qh, k, v, w, heads: int, scale: float, temperature: float = 1.0):
    """Gradients of :func:`attend` with respect to qh, k and v."""
    n, length, d_h = k.shape
    hd = d_h // heads
    d4 = dout.reshape(n, heads, 1, hd)
    kt = k.reshape(n, length, heads, hd).transpose(0, 2, 1, 3)
    vt = v.reshape(n, length, heads, hd).transpose(0, 2, 1, 3)
    dvt = w[..., None] * d4  # [N, H, L, hd]
    dw = np.matmul(vt, d4.transpose(0, 1, 3, 2))[..., 0]  # [N, H, L]
    ds = softmax_backward(w, dw) * (scale / temperature)
    dq = np.matmul(ds[:, :, None, :], kt)[:, :, 0, :]
    dkt = ds[..., None] * qh.reshape(n, heads, 1, hd)
    dk = dkt.transpose(0, 2, 1, 3).reshape(n, length, d_h)
    dv = dvt.transpose(0, 2, 1, 3).reshape(n, length, d_h)
    return dq.reshape(n, d_h), dk, dv


def _single(qh, k, v, valid, p: AttentionParams, details: bool):
    valid = np.asarray(valid, dtype=bool)
    if k.shape[0] == 0 or not valid.any():
        out = np.zeros(p.d_h, dtype=qh.dtype)
        if details:
            return Attended(out, np.zeros((p.heads, k.shape[0]), dtype=qh.dtype), True)
        return out
    out, w = attend(qh[None], k[None], v[None], valid[None], p.heads, p.scale, p.temperature)
    if details:
        return Attended(out[0], w[0], False)
    return out[0]


def bucket_lookup(table: np.ndarray, bz: Bucketizer, sim: SimilarityVector) -> np.ndarray:
    """Rows of ``table`` selected by each score's bucket; zero where the score is invalid."""
    if table.shape[0] != bz.bucket_count:
        raise ShapeError(f"table has {table.shape[0]} rows for {bz.bucket_count} buckets")
    rows = bz.rows(sim.scores)
    out = table[rows]
    out[~sim.valid] = 0.0
    return out


# -- single-candidate forwards -------------------------------------------------

def ta_forward(query, history, valid, p: AttentionParams, details: bool = False):
    query = np.asarray(query)
    history = np.asarray(history)
    qh = p.w_q @ query
    k = history @ p.w_k.T
    v = history @ p.w_v.T
    return _single(qh, k, v, valid, p, details)


def precompute_id_kv(history, p: AttentionParams, valid=None) -> IdKv:
    history = np.asarray(history)
    if valid is None:
        valid = np.ones(history.shape[0], dtype=bool)
    return IdKv(history @ p.w_k.T, history @ p.w_v.T, np.asarray(valid, dtype=bool))


def _check_wiring(kv: IdKv, sim: SimilarityVector):
    if len(sim) != len(kv):
        raise ShapeError(f"similarity vector has {len(sim)} positions, history has {len(kv)}")


def dta_forward(query, kv: IdKv, sim: SimilarityVector, bz: Bucketizer, emb: BucketEmbeddingPair,
                p: AttentionParams, details: bool = False):
    _check_wiring(kv, sim)
    qh = p.w_q @ np.asarray(query)
    k = kv.k_id + bucket_lookup(emb.e_k, bz, sim)
    v = kv.v_id + bucket_lookup(emb.e_v, bz, sim)
    return _single(qh, k, v, kv.valid, p, details)


def noninvasive_forward(query, kv: IdKv, sim: SimilarityVector, bz: Bucketizer, emb_k_only,
                        p: AttentionParams, details: bool = False):
    _check_wiring(kv, sim)
    table = emb_k_only.e_k if isinstance(emb_k_only, BucketEmbeddingPair) else np.asarray(emb_k_only)
    qh = p.w_q @ np.asarray(query)
    k = kv.k_id + bucket_lookup(table, bz, sim)
    return _single(qh, k, kv.v_id, kv.valid, p, details)


def early_fusion_forward(query, history, sim: SimilarityVector, p_early: AttentionParams, valid=None,
                         details: bool = False):
    history = np.asarray(history)
    if p_early.w_k.shape[1] != history.shape[1] + 1:
        raise ShapeError(f"early-fusion projections expect width {history.shape[1] + 1}")
    if len(sim) != history.shape[0]:
        raise ShapeError("similarity vector and history lengths differ")
    if valid is None:
        valid = np.ones(history.shape[0], dtype=bool)
    x = np.concatenate([history, sim.scores[:, None].astype(history.dtype)], axis=1)
    qh = p_early.w_q @ np.asarray(query)
    k = x @ p_early.w_k.T
    v = x @ p_early.w_v.T
    return _single(qh, k, v, valid, p_early, details)


def late_fusion_forward(query, kv: IdKv, sim: SimilarityVector, p: AttentionParams, sim_proj: LateProjection):
    """ID attention and similarity attention run independently, then concatenated."""
    _check_wiring(kv, sim)
    query = np.asarray(query)
    id_part = _single(p.w_q @ query, kv.k_id, kv.v_id, kv.valid, p, False)
    c = sim.scores[:, None]
    k_sim = c * sim_proj.w_k + sim_proj.b_k
    v_sim = c * sim_proj.w_v + sim_proj.b_v
    sim_part = _single(sim_proj.w_q @ query, k_sim, v_sim, kv.valid, p, False)
    return np.concatenate([id_part, sim_part])


def din_features(query, items) -> np.ndarray:
    """[q; s; q*s; q-s] along the last axis; ``query`` broadcasts over ``items``."""
    items = np.asarray(items)
    q = np.broadcast_to(np.asarray(query), items.shape)
    return np.concatenate([q, items, q * items, q - items], axis=-1)


def din_score(query, item, mlp: MlpParams) -> float:
    return float(mlp_forward(din_features(query, item), mlp)[..., 0])


def din_forward(query, history, valid, mlp: MlpParams, temperature: float = 1.0):
    """DIN activation-unit attention: scores from the MLP, values are raw item embeddings."""
    history = np.asarray(history)
    valid = np.asarray(valid, dtype=bool)
    if history.shape[0] == 0 or not valid.any():
        return np.zeros(history.shape[1], dtype=history.dtype)
    scores = mlp_forward(din_features(query, history), mlp)[:, 0]
    w = masked_softmax(scores, valid, temperature)
    return w @ history
