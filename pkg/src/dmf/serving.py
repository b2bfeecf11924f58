"""Two-phase candidate scoring: per-user context once, then B candidates.

The user context holds everything that does not depend on the candidate
(ID keys/values, normalised history multimodal rows, profile embedding).
Scoring a request then only does candidate-dependent work. The decoupled
kernel never materialises per-candidate keys: since
``q . (k_id + e[b]) = q . k_id + q . e[b]``, bucket contributions are looked
up from a [B, M] table of query-bucket products, and value contributions are
accumulated per bucket before one [M, d_h] product.

Early fusion gets no such shortcut; its keys and values are projected per
candidate, which is the cost it pays in production.
"""
from __future__ import annotations

import csv
import io
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import attention as att
from .bucketing import Bucketizer, batch_histogram, fit_equal_frequency
from .features import MultimodalTable
from .model import ModelConfig, ModelParams, init_params
from .numerics import FLOAT, masked_softmax, mlp_forward, sigmoid

SERVING_STRATEGIES = ("ta", "early", "late", "decoupled", "noninvasive")
FLOPS_STRATEGIES = ("early", "late", "decoupled")
# Rounded dominant-term GFLOPs usually quoted for B=1000, L=400, d=128.
PRINTED_GFLOPS = {"early": 13.10, "late": 0.13, "decoupled": 0.13}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UserContext:
    user_id: int
    history_ids: tuple
    valid: np.ndarray  # bool [L]
    hist_emb: np.ndarray  # [L, d]
    kv: att.IdKv
    hist_mm: np.ndarray  # [L, d_m], unit rows; zero where missing
    mm_found: np.ndarray  # bool [L]
    user_emb: np.ndarray  # [d]
    version: str
    created: float

    def __len__(self) -> int:
        return len(self.history_ids)

    def same_content(self, other: UserContext) -> bool:
        arrays = ("valid", "hist_emb", "hist_mm", "mm_found", "user_emb")
        return (self.user_id == other.user_id and self.history_ids == other.history_ids
                and self.version == other.version
                and all(getattr(self, a).tobytes() == getattr(other, a).tobytes() for a in arrays)
                and self.kv.k_id.tobytes() == other.kv.k_id.tobytes()
                and self.kv.v_id.tobytes() == other.kv.v_id.tobytes())


def shared_attention(qh, k_id, v_id, valid, heads: int, scale: float, temperature: float,
                     rows=None, e_k=None, e_v=None):
    """Attention of B queries over one history, with optional bucket enrichment.

    ``rows`` [B, L] index the bucket tables; the extra last row of ``e_k`` /
    ``e_v`` (added here) is the zero row used for invalid scores.
    """
    b, d_h = qh.shape
    length = k_id.shape[0]
    hd = d_h // heads
    q3 = qh.reshape(b, heads, hd).transpose(1, 0, 2)  # [H, B, hd]
    scores = np.matmul(q3, k_id.reshape(length, heads, hd).transpose(1, 2, 0))  # [H, B, L]
    if e_k is not None:
        m = e_k.shape[0]
        qe = np.matmul(q3, e_k.reshape(m, heads, hd).transpose(1, 2, 0))  # [H, B, M]
        scores = scores + qe[:, np.arange(b)[:, None], rows]
    w = masked_softmax(scores * scale, valid[None, None, :], temperature)
    out = np.matmul(w, v_id.reshape(length, heads, hd).transpose(1, 0, 2))  # [H, B, hd]
    if e_v is not None:
        m = e_v.shape[0]
        flat = (np.arange(heads * b).reshape(heads, b, 1) * m + rows[None, :, :]).ravel()
        mass = np.bincount(flat, weights=w.ravel(), minlength=heads * b * m).reshape(heads, b, m)
        out = out + np.matmul(mass.astype(out.dtype), e_v.reshape(m, heads, hd).transpose(1, 0, 2))
    return out.transpose(1, 0, 2).reshape(b, d_h)


def _with_zero_row(table):
    return np.concatenate([table, np.zeros((1, table.shape[1]), dtype=table.dtype)], axis=0)


class ScoringEngine:
    """Immutable checkpoint + tables; safe to share across scoring threads."""

    def __init__(self, params: ModelParams, mm: MultimodalTable, bz: Bucketizer | None, version: str = "0",
                 early_chunk: int = 16):
        self.params = params
        self.mm = mm
        self.bz = bz
        self.version = version
        self.early_chunk = early_chunk
        cfg = params.config
        self.cfg = cfg
        t = params.tensors
        if cfg.strategy != "din":
            self.attn = params.attention()
        self.e_k = _with_zero_row(t["bucket.e_k"]) if "bucket.e_k" in t else None
        self.e_v = _with_zero_row(t["bucket.e_v"]) if "bucket.e_v" in t else None
        self.pred = params.mlp("pred")
        self.hist_mlp = params.mlp("hist") if cfg.strategy == "dmf" else None

    def native_strategy(self) -> str:
        return "decoupled" if self.cfg.strategy == "dmf" else self.cfg.strategy

    def prepare_user(self, user_id, history_ids) -> UserContext:
        """Target-agnostic work: O(L d d_h), independent of the number of candidates."""
        hist = tuple(int(i) for i in list(history_ids)[-self.cfg.max_len:])
        t = self.params.tensors
        rows = self.params.item_rows(hist)
        s = t["item_emb"][rows]
        valid = np.ones(len(hist), dtype=bool)
        if self.cfg.strategy in ("din", "early"):
            kv = att.IdKv(np.zeros((len(hist), 0), FLOAT), np.zeros((len(hist), 0), FLOAT), valid)
        else:
            kv = att.precompute_id_kv(s, self.attn, valid)
        hist_mm, found = self.mm.matrix(hist)
        u = t["user_emb"][self.params.user_rows([user_id])[0]]
        kv = att.IdKv(_frozen(kv.k_id), _frozen(kv.v_id), _frozen(kv.valid))
        return UserContext(int(user_id), hist, _frozen(valid), _frozen(s), kv, _frozen(hist_mm), _frozen(found),
                           _frozen(u), self.version, time.time())

    def similarities(self, ctx: UserContext, candidates):
        rows = self.mm.rows(candidates)
        found = rows >= 0
        target = np.zeros((len(candidates), self.mm.dim), dtype=FLOAT)
        target[found] = self.mm.vectors[rows[found]]
        sims = np.clip(target @ ctx.hist_mm.T, -1.0, 1.0)
        sim_valid = found[:, None] & ctx.mm_found[None, :]
        sims[~sim_valid] = 0.0
        return sims.astype(FLOAT, copy=False), sim_valid

    def score_candidates(self, ctx: UserContext, candidates, strategy: str | None = None,
                         kv: att.IdKv | None = None) -> np.ndarray:
        """CTR for every candidate. ``kv`` overrides the cached ID keys/values."""
        strategy = strategy or self.native_strategy()
        if strategy not in SERVING_STRATEGIES:
            raise ValueError(f"unknown serving strategy {strategy!r}")
        self._check_compatible(strategy)
        cfg = self.cfg
        t = self.params.tensors
        kv = kv if kv is not None else ctx.kv
        candidates = list(candidates)
        b = len(candidates)
        q = t["item_emb"][self.params.item_rows(candidates)]
        sims, sim_valid = self.similarities(ctx, candidates)
        if len(ctx) == 0 or not ctx.valid.any():
            r = np.zeros((b, cfg.interest_width), dtype=FLOAT)
        else:
            r = self._interest(strategy, ctx, kv, q, sims, sim_valid)
        if self.hist_mlp is not None:
            h = batch_histogram(sims, sim_valid, cfg.hist_bins).astype(FLOAT)
            if cfg.hist_normalize:
                h /= np.maximum(1, sim_valid.sum(axis=1))[:, None]
            r_mc = mlp_forward(h, self.hist_mlp)
            r = cfg.alpha * r + (1.0 - cfg.alpha) * r_mc
        x = np.concatenate([r, q, np.broadcast_to(ctx.user_emb, (b, cfg.d))], axis=1)
        return sigmoid(mlp_forward(x, self.pred)[:, 0].astype(np.float64))

    def _check_compatible(self, strategy):
        native = self.native_strategy()
        if strategy == native:
            return
        # Any checkpoint with plain ID projections can also run TA; decoupled
        # parameters can additionally run the key-only ablation.
        ok = (strategy == "ta" and native in ("late", "decoupled", "noninvasive")) or \
             (strategy == "noninvasive" and native == "decoupled")
        if not ok:
            raise ValueError(f"a {self.cfg.strategy!r} checkpoint cannot be scored with strategy {strategy!r}")

    def _interest(self, strategy, ctx, kv, q, sims, sim_valid):
        cfg = self.cfg
        p = self.attn
        scale = p.scale
        qh = q @ p.w_q.T
        if strategy == "early":
            return self._early(ctx, qh, sims)
        if strategy == "ta":
            return shared_attention(qh, kv.k_id, kv.v_id, ctx.valid, p.heads, scale, p.temperature)
        if strategy == "late":
            lp = self.params.late_projection()
            r_id = shared_attention(qh, kv.k_id, kv.v_id, ctx.valid, p.heads, scale, p.temperature)
            q2 = q @ lp.w_q.T
            k_sim = sims[..., None] * lp.w_k + lp.b_k
            v_sim = sims[..., None] * lp.w_v + lp.b_v
            valid = np.broadcast_to(ctx.valid, sims.shape)
            r_sim, _ = att.attend(q2, k_sim, v_sim, valid, p.heads, scale, p.temperature)
            return np.concatenate([r_id, r_sim], axis=1)
        m = self.e_k.shape[0] - 1
        rows = np.where(sim_valid, self.bz.rows(sims), m)
        e_v = self.e_v if strategy == "decoupled" else None
        return shared_attention(qh, kv.k_id, kv.v_id, ctx.valid, p.heads, scale, p.temperature, rows, self.e_k, e_v)

    def _early(self, ctx, qh, sims):
        p = self.attn
        b = qh.shape[0]
        length, d = ctx.hist_emb.shape
        out = np.empty((b, p.d_h), dtype=FLOAT)
        for lo in range(0, b, self.early_chunk):
            hi = min(b, lo + self.early_chunk)
            x = np.empty((hi - lo, length, d + 1), dtype=FLOAT)
            x[:, :, :d] = ctx.hist_emb
            x[:, :, d] = sims[lo:hi]
            k = x @ p.w_k.T
            v = x @ p.w_v.T
            valid = np.broadcast_to(ctx.valid, (hi - lo, length))
            out[lo:hi], _ = att.attend(qh[lo:hi], k, v, valid, p.heads, p.scale, p.temperature)
        return out

    def reuse_equivalence_check(self, ctx: UserContext, candidates) -> bool:
        """Cached ID keys/values versus rebuilding them for every candidate.

        BLAS results depend on operand shapes, so candidate ``i``'s reference
        score comes from the same request shape with freshly built ``IdKv``;
        equality is then required bit for bit.
        """
        strategy = self.native_strategy()
        if strategy not in ("decoupled", "noninvasive", "late", "ta"):
            raise ValueError("reuse check needs a strategy with reusable ID projections")
        cached = self.score_candidates(ctx, candidates, strategy)
        for i in range(len(candidates)):
            fresh = att.precompute_id_kv(ctx.hist_emb, self.attn, ctx.valid)
            ref = self.score_candidates(ctx, candidates, strategy, kv=fresh)
            if ref[i].tobytes() != cached[i].tobytes():
                return False
        return True


def perturbed(ctx: UserContext, position: int = 0, delta: float = 1.0) -> UserContext:
    """Copy of ``ctx`` with one cached key entry changed (fault injection)."""
    k = ctx.kv.k_id.copy()
    k[position, 0] += delta
    return replace(ctx, kv=att.IdKv(_frozen(k), ctx.kv.v_id, ctx.kv.valid))


# -- FLOPs ---------------------------------------------------------------------

@dataclass(frozen=True)
class FlopsReport:
    strategy: str
    b: int
    l: int
    d: int
    reuse: bool
    kv_flops: int
    formula: str

    def as_dict(self) -> dict:
        out = {"strategy": self.strategy, "B": self.b, "L": self.l, "d": self.d, "reuse": self.reuse,
               "kv_flops": self.kv_flops, "formula": self.formula}
        if (self.b, self.l, self.d) == (1000, 400, 128) and (self.reuse or self.strategy == "early"):
            out["printed_gflops"] = PRINTED_GFLOPS[self.strategy]
        return out


def flops_kv(strategy: str, b: int, l: int, d: int, reuse: bool) -> FlopsReport:
    """FLOPs of the K/V construction for one request (projections plus the 2BLd term)."""
    if strategy not in FLOPS_STRATEGIES:
        raise ValueError(f"FLOPs are tabulated for {FLOPS_STRATEGIES}, not {strategy!r}")
    if min(b, l, d) <= 0:
        raise ValueError("B, L and d must be positive")
    b, l, d = int(b), int(l), int(d)
    if strategy != "early" and reuse:
        return FlopsReport(strategy, b, l, d, reuse, 2 * l * d * d + 2 * b * l * d, "2Ld^2 + 2BLd")
    return FlopsReport(strategy, b, l, d, reuse, 2 * b * l * d * d + 2 * b * l * d, "2BLd^2 + 2BLd")


# -- throughput ------------------------------------------------------------------

BENCH_STRATEGY_PARAMS = {"ta": "ta", "early": "early", "late": "late", "decoupled": "decoupled",
                         "noninvasive": "noninvasive"}


def synthetic_engine(strategy: str, d_h: int = 128, d: int | None = None, d_m: int = 128, vocab: int = 20000,
                     buckets: int = 35, heads: int = 4, seed: int = 0) -> ScoringEngine:
    """Randomly initialised engine for throughput runs (no training needed)."""
    d = d_h if d is None else d
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(strategy=BENCH_STRATEGY_PARAMS[strategy], d=d, d_h=d_h, heads=heads, buckets=buckets,
                      hist_hidden=d_h, pred_hidden=(128, 64), max_len=10_000, seed=seed)
    ids = np.arange(1, vocab + 1)
    params = init_params(cfg, ids, [1])
    mm = MultimodalTable(ids, rng.standard_normal((vocab, d_m)))
    sample = np.clip(rng.standard_normal(20000) * 0.3, -1, 1)
    return ScoringEngine(params, mm, fit_equal_frequency(sample, buckets))


def _percentile_us(latencies, q):
    return float(np.percentile(np.asarray(latencies) * 1e6, q)) if latencies else float("nan")


def qps_bench(strategy: str, b: int = 1200, l: int = 400, d_h: int = 128, duration_s: float = 5.0,
              worker_count: int = 1, engine: ScoringEngine | None = None, pool_size: int = 4, seed: int = 0,
              warmup: int = 1) -> dict:
    """Closed-loop throughput: each worker scores requests back to back until the deadline."""
    if duration_s < 1.0:
        raise ValueError("benchmark duration must be at least 1 second")
    if worker_count < 1:
        raise ValueError("need at least one worker")
    engine = engine or synthetic_engine(strategy, d_h=d_h, seed=seed)
    vocab = engine.params.item_ids[1:]
    rng = np.random.default_rng(seed)
    pools = [[engine.prepare_user(1, rng.choice(vocab, size=l)) for _ in range(pool_size)]
             for _ in range(worker_count)]
    for _ in range(warmup):
        engine.score_candidates(pools[0][0], rng.choice(vocab, size=b), strategy)
    start = threading.Barrier(worker_count)

    def worker(wid):
        wrng = np.random.default_rng([seed, wid])
        lat = []
        start.wait()
        deadline = time.perf_counter() + duration_s
        i = 0
        while time.perf_counter() < deadline:
            ctx = pools[wid][i % pool_size]
            cands = wrng.choice(vocab, size=b)
            t0 = time.perf_counter()
            engine.score_candidates(ctx, cands, strategy)
            lat.append(time.perf_counter() - t0)
            i += 1
        return lat, time.perf_counter()

    t_begin = time.perf_counter()
    with ThreadPoolExecutor(max_workers=worker_count) as ex:
        results = list(ex.map(worker, range(worker_count)))
    elapsed = max(end for _, end in results) - t_begin
    lat = [x for ls, _ in results for x in ls]
    flops_strategy = strategy if strategy in FLOPS_STRATEGIES else "late"
    fr = flops_kv(flops_strategy, b, l, d_h, reuse=strategy != "early")
    return {
        "strategy": strategy,
        "config": {"B": b, "L": l, "d_h": d_h, "d": engine.cfg.d, "duration_s": duration_s,
                   "workers": worker_count},
        "requests": len(lat),
        "qps": len(lat) / elapsed,
        "latency_p50_us": _percentile_us(lat, 50),
        "latency_p99_us": _percentile_us(lat, 99),
        "kv_flops_formula": fr.formula,
        "kv_flops_value": fr.kv_flops,
    }


CSV_FIELDS = ("strategy", "B", "L", "d_h", "workers", "requests", "qps", "latency_p50_us", "latency_p99_us",
              "kv_flops_formula", "kv_flops_value")


def report_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        c = r["config"]
        rows.append({"strategy": r["strategy"], "B": c["B"], "L": c["L"], "d_h": c["d_h"], "workers": c["workers"],
                     "requests": r["requests"], "qps": r["qps"], "latency_p50_us": r["latency_p50_us"],
                     "latency_p99_us": r["latency_p99_us"], "kv_flops_formula": r["kv_flops_formula"],
                     "kv_flops_value": r["kv_flops_value"]})
    return rows


def to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report_rows(reports):
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def from_csv(text: str) -> list[dict]:
    ints = {"B", "L", "d_h", "workers", "requests", "kv_flops_value"}
    floats = {"qps", "latency_p50_us", "latency_p99_us"}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({k: int(v) if k in ints else float(v) if k in floats else v for k, v in row.items()})
    return out
