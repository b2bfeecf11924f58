"""Synthetic interaction data with planted multimodal signal, file I/O and AUC/GAUC."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .features import MultimodalTable, write_mmf
from .model import TrainExample

log = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 100


class UndefinedMetric(ValueError):
    """AUC is undefined when only one class is present."""


@dataclass
class SyntheticConfig:
    users: int = 1000
    items: int = 2000
    d_m: int = 32
    topics: int = 32
    topic_spread: float = 0.8  # noise norm relative to the topic centre
    id_dim: int = 8
    id_clusters: int = 16  # ID latents are cluster centres plus small jitter; 0 means fully random
    id_jitter: float = 0.3
    min_len: int = 3
    max_len: int = 50
    examples_per_user: int = 120
    preference_sharpness: float = 6.0  # history and relevant-target sampling
    relevant_target_rate: float = 0.5
    gate_sharpness: float = 8.0
    sim_weight: float = 2.0  # a
    id_weight: float = 1.0  # b
    gated_weight: float = 2.0  # weight of the similarity-gated ID affinity
    noise: float = 0.5
    bias: float = -1.0
    test_fraction: float = 1.0 / 6.0
    mode: str = "click"  # or "pairing": last interaction positive plus one random negative
    seed: int = 0


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    train: list
    test: list
    multimodal: MultimodalTable
    raw_vectors: np.ndarray
    # per-example generator internals, in train+test order, for statistical checks
    c_target: np.ndarray
    click_prob: np.ndarray


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def _sample_history(rng, logits_row, k):
    g = rng.gumbel(size=logits_row.shape)
    return np.argpartition(-(logits_row + g), k - 1)[:k]


def gen_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Generate a seeded dataset.

    Click logit = bias + a * c_target + b * affinity + g * gated + noise, where
    c_target is the mean target-history cosine, affinity the mean ID-latent dot
    product between target and history, and gated the same dot products
    weighted by a softmax over multimodal similarity.
    """
    if cfg.mode not in ("click", "pairing"):
        raise ValueError(f"unknown generator mode {cfg.mode!r}")
    rng = np.random.default_rng(cfg.seed)
    centres = _unit(rng.standard_normal((cfg.topics, cfg.d_m)))
    topic = rng.integers(cfg.topics, size=cfg.items)
    noise = _unit(rng.standard_normal((cfg.items, cfg.d_m))) * cfg.topic_spread
    raw = (centres[topic] + noise) * rng.uniform(0.5, 2.0, size=(cfg.items, 1))
    mm = _unit(raw)
    if cfg.id_clusters > 0:
        zc = rng.standard_normal((cfg.id_clusters, cfg.id_dim))
        z = zc[rng.integers(cfg.id_clusters, size=cfg.items)] + cfg.id_jitter * rng.standard_normal((cfg.items, cfg.id_dim))
    else:
        z = rng.standard_normal((cfg.items, cfg.id_dim))
    z /= np.sqrt(np.sqrt(cfg.id_dim))
    item_ids = np.arange(1, cfg.items + 1)

    fav = [rng.choice(cfg.topics, size=rng.integers(1, 4), replace=False) for _ in range(cfg.users)]
    pref = _unit(np.stack([centres[f].sum(axis=0) for f in fav]))

    examples, c_all, p_all = [], [], []
    for u in range(cfg.users):
        logits = cfg.preference_sharpness * (mm @ pref[u])
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        if cfg.mode == "pairing":
            seq = _sample_history(rng, logits, length + 1)
            hist = seq[:-1]
            targets = np.array([seq[-1], rng.integers(cfg.items)])
            forced = np.array([1, 0])
        else:
            hist = _sample_history(rng, logits, length)
            k = cfg.examples_per_user
            relevant = rng.random(k) < cfg.relevant_target_rate
            p = np.exp(logits - logits.max())
            targets = np.where(relevant, rng.choice(cfg.items, size=k, p=p / p.sum()),
                               rng.integers(cfg.items, size=k))
            forced = None
        sims = mm[targets] @ mm[hist].T  # [P, L]
        c_target = sims.mean(axis=1)
        dots = z[targets] @ z[hist].T
        affinity = dots.mean(axis=1)
        gw = np.exp(cfg.gate_sharpness * (sims - sims.max(axis=1, keepdims=True)))
        gated = (gw * dots).sum(axis=1) / gw.sum(axis=1)
        logit = (cfg.bias + cfg.sim_weight * c_target + cfg.id_weight * affinity + cfg.gated_weight * gated
                 + cfg.noise * rng.standard_normal(targets.size))
        prob = 1.0 / (1.0 + np.exp(-logit))
        labels = forced if forced is not None else (rng.random(targets.size) < prob).astype(int)
        hist_ids = [int(item_ids[h]) for h in hist]
        for t, y in zip(targets, labels):
            examples.append(TrainExample(u + 1, list(hist_ids), int(item_ids[t]), int(y)))
        c_all.append(c_target)
        p_all.append(prob)

    order = rng.permutation(len(examples))
    n_test = int(round(len(examples) * cfg.test_fraction))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    c_all = np.concatenate(c_all)
    p_all = np.concatenate(p_all)
    idx = np.concatenate([train_idx, test_idx])
    return SyntheticDataset(
        config=cfg,
        train=[examples[i] for i in train_idx],
        test=[examples[i] for i in test_idx],
        multimodal=MultimodalTable(item_ids, raw),
        raw_vectors=raw.astype(np.float32),
        c_target=c_all[idx],
        click_prob=p_all[idx],
    )


def write_interactions(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"user_id": ex.user_id, "history": list(ex.history), "target_id": ex.target_id, "label": ex.label}
            fh.write(json.dumps(rec) + "\n")


def load_interactions(path, max_len: int = DEFAULT_MAX_LEN, stats: dict | None = None) -> list:
    """Parse JSON-lines interactions, keeping the most recent ``max_len`` history items."""
    out = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hist = [int(i) for i in rec["history"]]
                label = int(rec["label"])
                ex = TrainExample(int(rec["user_id"]), hist[-max_len:], int(rec["target_id"]), label)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if label not in (0, 1):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if not ex.history:
                dropped += 1
                continue
            out.append(ex)
    if dropped:
        log.warning("%s: dropped %d records with empty history", path, dropped)
    if not out:
        warnings.warn(f"{path}: no usable records", RuntimeWarning, stacklevel=2)
    if stats is not None:
        stats["dropped_empty_history"] = dropped
    return out


def write_dataset(ds: SyntheticDataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "multimodal": out / "items.mmf",
        "meta": out / "meta.json",
    }
    write_interactions(paths["train"], ds.train)
    write_interactions(paths["test"], ds.test)
    write_mmf(paths["multimodal"], ds.multimodal.ids, ds.raw_vectors)
    paths["meta"].write_text(json.dumps({"generator": asdict(ds.config), "train": len(ds.train),
                                         "test": len(ds.test)}, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def auc(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(users, labels, scores, return_skipped: bool = False):
    """Impression-weighted mean of per-user AUC; single-class users are skipped."""
    users = np.asarray(users)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(users, kind="stable")
    u = users[order]
    starts = np.flatnonzero(np.r_[True, u[1:] != u[:-1]])
    ends = np.r_[starts[1:], u.size]
    total, weight, skipped = 0.0, 0, 0
    for lo, hi in zip(starts, ends):
        idx = order[lo:hi]
        pos = labels[idx].sum()
        if pos == 0 or pos == idx.size:
            skipped += 1
            continue
        total += idx.size * auc(labels[idx], scores[idx])
        weight += idx.size
    if weight == 0:
        raise UndefinedMetric("every user has single-class labels; GAUC undefined")
    value = total / weight
    return (value, skipped) if return_skipped else value
