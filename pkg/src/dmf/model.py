"""End-to-end CTR model: embeddings, interest extraction, CMM fusion, prediction head.

Two forward paths exist. :func:`predict_ctr` scores one example through the
single-candidate functions in :mod:`dmf.attention`; :func:`forward` runs a
padded batch and keeps the cache that :func:`backward` needs. Tests check that
they agree.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from . import attention as att
from .bucketing import DEFAULT_BUCKETS, DEFAULT_HISTOGRAM_BINS, Bucketizer, batch_histogram
from .features import MultimodalTable, histogram_representation, similarity_vector
from .numerics import (
    FLOAT,
    MlpParams,
    masked_softmax,
    mlp_backward,
    mlp_forward,
    mlp_grads_named,
    sigmoid,
    softmax_backward,
)

STRATEGIES = ("ta", "din", "early", "late", "decoupled", "noninvasive", "dmf")
CHECKPOINT_MAGIC = b"DMF1"
OOV = 0


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    strategy: str = "dmf"
    d: int = 32
    d_h: int = 32
    heads: int = 4
    temperature: float = 1.0
    buckets: int = DEFAULT_BUCKETS
    hist_bins: int = DEFAULT_HISTOGRAM_BINS
    hist_normalize: bool = True
    hist_hidden: int = 32
    pred_hidden: tuple = (80, 40)
    alpha: float = 0.5
    max_len: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.pred_hidden = tuple(self.pred_hidden)
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    @property
    def enrich_k(self) -> bool:
        return self.strategy in ("decoupled", "noninvasive", "dmf")

    @property
    def enrich_v(self) -> bool:
        return self.strategy in ("decoupled", "dmf")

    @property
    def interest_width(self) -> int:
        if self.strategy == "late":
            return 2 * self.d_h
        if self.strategy == "din":
            return self.d
        return self.d_h


PRESETS = {
    "amazon": ModelConfig(),
    "industry": ModelConfig(d_h=128, hist_hidden=128, pred_hidden=(128, 64), batch_size=1024),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class TrainExample:
    user_id: int
    history: list
    target_id: int
    label: int


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    item_ids: np.ndarray  # row -> item id; row 0 is the OOV row
    user_ids: np.ndarray
    _item_row: dict = field(default=None, repr=False)
    _user_row: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._item_row = {int(i): r for r, i in enumerate(self.item_ids) if r != OOV}
        self._user_row = {int(i): r for r, i in enumerate(self.user_ids) if r != OOV}

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def item_rows(self, ids) -> np.ndarray:
        get = self._item_row.get
        return np.fromiter((get(int(i), OOV) for i in ids), dtype=np.int64, count=len(ids))

    def user_rows(self, ids) -> np.ndarray:
        get = self._user_row.get
        return np.fromiter((get(int(i), OOV) for i in ids), dtype=np.int64, count=len(ids))

    def attention(self) -> att.AttentionParams:
        t = self.tensors
        return att.AttentionParams(t["attn.w_q"], t["attn.w_k"], t["attn.w_v"], self.config.heads,
                                   self.config.temperature)

    def bucket_embeddings(self) -> att.BucketEmbeddingPair:
        t = self.tensors
        e_v = t.get("bucket.e_v")
        if e_v is None:
            e_v = np.zeros_like(t["bucket.e_k"])
        return att.BucketEmbeddingPair(t["bucket.e_k"], e_v)

    def late_projection(self) -> att.LateProjection:
        t = self.tensors
        return att.LateProjection(t["late.w_q"], t["late.w_k"], t["late.b_k"], t["late.w_v"], t["late.b_v"])

    def mlp(self, prefix: str) -> MlpParams:
        return MlpParams.from_named(self.tensors, prefix)

    def astype(self, dtype) -> ModelParams:
        tensors = {k: v.astype(dtype) for k, v in self.tensors.items()}
        return ModelParams(self.config, tensors, self.item_ids, self.user_ids)

    def copy(self) -> ModelParams:
        return self.astype(next(iter(self.tensors.values())).dtype)


def init_params(cfg: ModelConfig, item_ids, user_ids, dtype=FLOAT) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    item_ids = np.concatenate([[0], np.asarray(sorted(set(int(i) for i in item_ids)), dtype=np.int64)])
    user_ids = np.concatenate([[0], np.asarray(sorted(set(int(i) for i in user_ids)), dtype=np.int64)])
    s = cfg.init_scale

    def normal(*shape):
        return (rng.standard_normal(shape) * s).astype(dtype)

    t = {
        "item_emb": normal(item_ids.size, cfg.d),
        "user_emb": normal(user_ids.size, cfg.d),
    }
    if cfg.strategy == "din":
        t.update(MlpParams.init([4 * cfg.d, 36, 1], rng, dtype).named("din"))
    else:
        d_in = cfg.d + 1 if cfg.strategy == "early" else cfg.d
        ap = att.AttentionParams.init(cfg.d, cfg.d_h, cfg.heads, rng, d_in=d_in, dtype=dtype)
        t["attn.w_q"], t["attn.w_k"], t["attn.w_v"] = ap.w_q, ap.w_k, ap.w_v
    if cfg.enrich_k:
        t["bucket.e_k"] = normal(cfg.buckets, cfg.d_h)
    if cfg.enrich_v:
        t["bucket.e_v"] = normal(cfg.buckets, cfg.d_h)
    if cfg.strategy == "late":
        bound = np.sqrt(6.0 / (cfg.d + cfg.d_h))
        t["late.w_q"] = rng.uniform(-bound, bound, size=(cfg.d_h, cfg.d)).astype(dtype)
        for name in ("late.w_k", "late.w_v"):
            t[name] = rng.uniform(-1.0, 1.0, size=cfg.d_h).astype(dtype)
        t["late.b_k"] = normal(cfg.d_h)
        t["late.b_v"] = normal(cfg.d_h)
    if cfg.strategy == "dmf":
        t.update(MlpParams.init([cfg.hist_bins, cfg.hist_hidden, cfg.d_h], rng, dtype).named("hist"))
    pred_in = cfg.interest_width + 2 * cfg.d
    t.update(MlpParams.init([pred_in, *cfg.pred_hidden, 1], rng, dtype).named("pred"))
    return ModelParams(cfg, t, item_ids, user_ids)


def cmm_fuse(r_me, r_mc, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    r_me = np.asarray(r_me)
    r_mc = np.asarray(r_mc)
    if alpha == 1.0:
        return r_me.copy()
    if alpha == 0.0:
        return r_mc.copy()
    return alpha * r_me + (1.0 - alpha) * r_mc


def bce_loss(preds, labels) -> float:
    p = np.clip(np.asarray(preds, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_with_logits(logits, labels):
    """Mean BCE computed from logits, and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    grad = (sigmoid(z) - y) / z.size
    return float(loss), grad


# -- single-example path ----------------------------------------------------

def interest_vector(params: ModelParams, q, hist_emb, valid, sim, bz: Bucketizer | None):
    """Modality-enriched (or plain) user interest for one candidate."""
    cfg = params.config
    s = cfg.strategy
    if s == "din":
        return att.din_forward(q, hist_emb, valid, params.mlp("din"), cfg.temperature)
    p = params.attention()
    if s == "ta":
        return att.ta_forward(q, hist_emb, valid, p)
    if s == "early":
        return att.early_fusion_forward(q, hist_emb, sim, p, valid)
    kv = att.precompute_id_kv(hist_emb, p, valid)
    if s == "late":
        return att.late_fusion_forward(q, kv, sim, p, params.late_projection())
    if s == "noninvasive":
        return att.noninvasive_forward(q, kv, sim, bz, params.tensors["bucket.e_k"], p)
    return att.dta_forward(q, kv, sim, bz, params.bucket_embeddings(), p)


def predict_ctr(example: TrainExample, params: ModelParams, mm: MultimodalTable, bz: Bucketizer | None) -> float:
    cfg = params.config
    t = params.tensors
    hist = list(example.history)[-cfg.max_len:]
    rows = params.item_rows(hist)
    s_emb = t["item_emb"][rows]
    q = t["item_emb"][params.item_rows([example.target_id])[0]]
    u = t["user_emb"][params.user_rows([example.user_id])[0]]
    valid = np.ones(len(hist), dtype=bool)
    hist_mm, found = mm.matrix(hist)
    sim = similarity_vector(mm.get(example.target_id), hist_mm, found & valid)
    r = interest_vector(params, q, s_emb, valid, sim, bz)
    if cfg.strategy == "dmf":
        r_mc = histogram_representation(sim, cfg.hist_bins, params.mlp("hist"), cfg.hist_normalize)
        r = cmm_fuse(r, r_mc.astype(r.dtype), cfg.alpha)
    x = np.concatenate([r, q, u])
    logit = mlp_forward(x, params.mlp("pred"))
    return float(sigmoid(np.asarray(logit, dtype=np.float64))[0])


# -- batched path -----------------------------------------------------------

@dataclass
class Batch:
    """Padded, pre-featurised examples. Similarities are frozen inputs."""

    hist_rows: np.ndarray  # int [N, L]
    valid: np.ndarray  # bool [N, L]
    target_rows: np.ndarray  # int [N]
    user_rows: np.ndarray  # int [N]
    sims: np.ndarray  # float [N, L], zero where sim_valid is False
    sim_valid: np.ndarray  # bool [N, L]
    bucket_rows: np.ndarray  # int [N, L]
    hist_in: np.ndarray  # float [N, n_bins]
    labels: np.ndarray  # float [N]
    users: np.ndarray  # raw user ids, for GAUC

    def __len__(self) -> int:
        return self.labels.size

    def take(self, idx) -> Batch:
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def astype(self, dtype) -> Batch:
        return replace(self, sims=self.sims.astype(dtype), hist_in=self.hist_in.astype(dtype),
                       labels=self.labels.astype(dtype))


def encode(examples, params: ModelParams, mm: MultimodalTable, bz: Bucketizer | None,
           chunk: int = 4096) -> Batch:
    """Turn examples into a :class:`Batch`, computing similarities once."""
    cfg = params.config
    n = len(examples)
    hists = [list(ex.history)[-cfg.max_len:] for ex in examples]
    length = max((len(h) for h in hists), default=0)
    length = max(length, 1)
    hist_rows = np.zeros((n, length), dtype=np.int64)
    valid = np.zeros((n, length), dtype=bool)
    mm_rows = np.full((n, length), -1, dtype=np.int64)
    flat_ids = [i for h in hists for i in h]
    item_r = params.item_rows(flat_ids)
    mm_r = mm.rows(flat_ids)
    pos = 0
    for e, h in enumerate(hists):
        k = len(h)
        hist_rows[e, :k] = item_r[pos:pos + k]
        mm_rows[e, :k] = mm_r[pos:pos + k]
        valid[e, :k] = True
        pos += k
    targets = [ex.target_id for ex in examples]
    target_mm = mm.rows(targets)
    sim_valid = valid & (mm_rows >= 0) & (target_mm[:, None] >= 0)
    sims = np.zeros((n, length), dtype=FLOAT)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        h = mm.vectors[np.maximum(mm_rows[lo:hi], 0)]
        tv = mm.vectors[np.maximum(target_mm[lo:hi], 0)]
        c = np.einsum("nld,nd->nl", h, tv)
        sims[lo:hi] = np.clip(c, -1.0, 1.0)
    sims[~sim_valid] = 0.0
    bucket_rows = bz.rows(sims) if bz is not None else np.zeros_like(hist_rows)
    hist_in = batch_histogram(sims, sim_valid, cfg.hist_bins).astype(FLOAT)
    if cfg.hist_normalize:
        hist_in /= np.maximum(1, sim_valid.sum(axis=1))[:, None]
    return Batch(
        hist_rows=hist_rows,
        valid=valid,
        target_rows=params.item_rows(targets),
        user_rows=params.user_rows([ex.user_id for ex in examples]),
        sims=sims,
        sim_valid=sim_valid,
        bucket_rows=bucket_rows,
        hist_in=hist_in,
        labels=np.asarray([ex.label for ex in examples], dtype=FLOAT),
        users=np.asarray([ex.user_id for ex in examples], dtype=np.int64),
    )


def _lookup(table, rows, mask):
    return table[rows] * mask[..., None].astype(table.dtype)


def scatter_rows(n_rows: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` [K, w] into an [n_rows, w] array at ``rows`` [K] (a sparse one-hot product)."""
    rows = rows.ravel()
    values = values.reshape(rows.size, -1)
    if rows.size == 0:
        return np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    onehot = sparse.csr_matrix((np.ones(rows.size, dtype=values.dtype), (rows, np.arange(rows.size))),
                               shape=(n_rows, rows.size))
    return np.asarray(onehot @ values)


def forward(params: ModelParams, batch: Batch, keep: bool = False):
    """Logits [N] for a batch; with ``keep=True`` also the backward cache."""
    cfg = params.config
    t = params.tensors
    st = cfg.strategy
    c: dict = {}
    S = t["item_emb"][batch.hist_rows]
    q = t["item_emb"][batch.target_rows]
    u = t["user_emb"][batch.user_rows]
    c.update(S=S, q=q, u=u)
    if st == "din":
        mlp = params.mlp("din")
        feats = att.din_features(q[:, None, :], S)
        scores, din_cache = mlp_forward(feats, mlp, keep=True)
        w = masked_softmax(scores[..., 0], batch.valid, cfg.temperature)
        r = np.einsum("nl,nld->nd", w, S)
        c.update(din_cache=din_cache, din_w=w)
    else:
        heads, scale = cfg.heads, 1.0 / np.sqrt(cfg.d_h // cfg.heads)
        qh = q @ t["attn.w_q"].T
        if st == "early":
            X = np.concatenate([S, batch.sims[..., None].astype(S.dtype)], axis=-1)
        else:
            X = S
        K = X @ t["attn.w_k"].T
        V = X @ t["attn.w_v"].T
        if cfg.enrich_k:
            K = K + _lookup(t["bucket.e_k"], batch.bucket_rows, batch.sim_valid)
        if cfg.enrich_v:
            V = V + _lookup(t["bucket.e_v"], batch.bucket_rows, batch.sim_valid)
        r, w = att.attend(qh, K, V, batch.valid, heads, scale, cfg.temperature)
        c.update(X=X, qh=qh, K=K, V=V, w=w)
        if st == "late":
            cs = batch.sims[..., None].astype(S.dtype)
            qh2 = q @ t["late.w_q"].T
            K2 = cs * t["late.w_k"] + t["late.b_k"]
            V2 = cs * t["late.w_v"] + t["late.b_v"]
            r2, w2 = att.attend(qh2, K2, V2, batch.valid, heads, scale, cfg.temperature)
            c.update(qh2=qh2, K2=K2, V2=V2, w2=w2, r_id=r)
            r = np.concatenate([r, r2], axis=1)
    if st == "dmf":
        r_mc, hist_cache = mlp_forward(batch.hist_in.astype(r.dtype), params.mlp("hist"), keep=True)
        c.update(hist_cache=hist_cache)
        r = cfg.alpha * r + (1.0 - cfg.alpha) * r_mc
    x = np.concatenate([r, q, u], axis=1)
    logits, pred_cache = mlp_forward(x, params.mlp("pred"), keep=True)
    c.update(pred_cache=pred_cache)
    logits = logits[:, 0]
    if keep:
        return logits, c
    return logits


def backward(params: ModelParams, batch: Batch, cache: dict, dlogits) -> dict:
    """Gradients of every tensor given d(loss)/d(logits)."""
    cfg = params.config
    t = params.tensors
    st = cfg.strategy
    dtype = t["item_emb"].dtype
    grads: dict = {}
    S, q = cache["S"], cache["q"]
    dx, g = mlp_backward(cache["pred_cache"], params.mlp("pred"), np.asarray(dlogits, dtype=dtype)[:, None])
    grads.update(mlp_grads_named(g, "pred"))
    rw, d = cfg.interest_width, cfg.d
    dr = dx[:, :rw]
    dq = dx[:, rw:rw + d].copy()
    du = dx[:, rw + d:]
    if st == "dmf":
        _, gh = mlp_backward(cache["hist_cache"], params.mlp("hist"), (1.0 - cfg.alpha) * dr)
        grads.update(mlp_grads_named(gh, "hist"))
        dr = cfg.alpha * dr
    if st == "din":
        w = cache["din_w"]
        dw = np.einsum("nd,nld->nl", dr, S)
        dscore = softmax_backward(w, dw) / cfg.temperature
        dS = w[..., None] * dr[:, None, :]
        dfeat, gd = mlp_backward(cache["din_cache"], params.mlp("din"), dscore[..., None])
        grads.update(mlp_grads_named(gd, "din"))
        fq, fs, fqs, fdiff = np.split(dfeat, 4, axis=-1)
        dS = dS + fs + fqs * q[:, None, :] - fdiff
        dq += (fq + fqs * S + fdiff).sum(axis=1)
    else:
        heads, scale = cfg.heads, 1.0 / np.sqrt(cfg.d_h // cfg.heads)
        if st == "late":
            dr, dr2 = dr[:, :cfg.d_h], dr[:, cfg.d_h:]
            dqh2, dK2, dV2 = att.attend_backward(dr2, cache["qh2"], cache["K2"], cache["V2"], cache["w2"], heads,
                                                 scale, cfg.temperature)
            cs = batch.sims[..., None].astype(dtype)
            grads["late.w_k"] = (dK2 * cs).sum(axis=(0, 1))
            grads["late.b_k"] = dK2.sum(axis=(0, 1))
            grads["late.w_v"] = (dV2 * cs).sum(axis=(0, 1))
            grads["late.b_v"] = dV2.sum(axis=(0, 1))
            grads["late.w_q"] = dqh2.T @ q
            dq += dqh2 @ t["late.w_q"]
        dqh, dK, dV = att.attend_backward(dr, cache["qh"], cache["K"], cache["V"], cache["w"], heads, scale,
                                          cfg.temperature)
        X = cache["X"]
        X2 = X.reshape(-1, X.shape[-1])
        grads["attn.w_q"] = dqh.T @ q
        grads["attn.w_k"] = dK.reshape(-1, cfg.d_h).T @ X2
        grads["attn.w_v"] = dV.reshape(-1, cfg.d_h).T @ X2
        dq += dqh @ t["attn.w_q"]
        dX = dK @ t["attn.w_k"] + dV @ t["attn.w_v"]
        dS = dX[..., :d]
        m = batch.sim_valid[..., None].astype(dtype)
        if cfg.enrich_k:
            grads["bucket.e_k"] = scatter_rows(cfg.buckets, batch.bucket_rows, dK * m)
        if cfg.enrich_v:
            grads["bucket.e_v"] = scatter_rows(cfg.buckets, batch.bucket_rows, dV * m)
    n_items = t["item_emb"].shape[0]
    rows = np.concatenate([batch.hist_rows.ravel(), batch.target_rows])
    vals = np.concatenate([dS.reshape(-1, d), dq], axis=0)
    grads["item_emb"] = scatter_rows(n_items, rows, vals)
    grads["user_emb"] = scatter_rows(t["user_emb"].shape[0], batch.user_rows, du)
    return grads


def predict_batch(params: ModelParams, batch: Batch, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(batch), dtype=np.float64)
    for lo in range(0, len(batch), chunk):
        idx = np.arange(lo, min(len(batch), lo + chunk))
        out[idx] = sigmoid(forward(params, batch.take(idx)).astype(np.float64))
    return out


# -- checkpoints --------------------------------------------------------------

def _config_doc(cfg: ModelConfig) -> dict:
    doc = asdict(cfg)
    doc["pred_hidden"] = list(cfg.pred_hidden)
    return doc


def save_checkpoint(path, params: ModelParams, bz: Bucketizer | None = None, extra_tensors: dict | None = None,
                    meta: dict | None = None) -> None:
    """Binary layout: magic, u32 JSON length, JSON header, then named float32 sections."""
    sections = dict(params.tensors)
    for k, v in (extra_tensors or {}).items():
        sections[k] = v
    header = {
        "config": _config_doc(params.config),
        "item_ids": [int(i) for i in params.item_ids],
        "user_ids": [int(i) for i in params.user_ids],
        "bucketizer": json.loads(bz.to_json()) if bz is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(sections)))
        for name in sorted(sections):
            arr = np.ascontiguousarray(sections[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (params, bucketizer or None, extra tensors, meta)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DMF1 checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(FLOAT)
        pos += 4 * size
        sections[name] = arr
    cfg = ModelConfig(**header["config"])
    extra = {k: v for k, v in sections.items() if k.startswith("adam.")}
    tensors = {k: v for k, v in sections.items() if not k.startswith("adam.")}
    params = ModelParams(cfg, tensors, np.asarray(header["item_ids"], dtype=np.int64),
                         np.asarray(header["user_ids"], dtype=np.int64))
    bz = None
    if header.get("bucketizer"):
        bz = Bucketizer.from_json(json.dumps(header["bucketizer"]))
    return params, bz, extra, header.get("meta", {})
