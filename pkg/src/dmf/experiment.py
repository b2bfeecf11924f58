"""Offline comparison runs: fusion-strategy ablation and the alpha sweep."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bucketing import Bucketizer, fit_equal_frequency, reservoir_sample
from .data import SyntheticConfig, SyntheticDataset, gen_synthetic
from .model import Batch, ModelConfig, ModelParams, encode, init_params
from .training import AdamState, evaluate, train_epoch

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def fit_bucketizer(batch: Batch, m: int, seed: int = 0) -> Bucketizer:
    sample = reservoir_sample(batch.sims[batch.sim_valid], np.random.default_rng(seed))
    return fit_equal_frequency(sample, m)


def with_buckets(batch: Batch, bz: Bucketizer) -> Batch:
    return replace(batch, bucket_rows=bz.rows(batch.sims))


@dataclass
class Prepared:
    """A dataset encoded once and shared by every model trained on it."""

    dataset: SyntheticDataset | None
    train: Batch
    valid: Batch
    test: Batch
    bucketizer: Bucketizer
    item_ids: np.ndarray
    user_ids: np.ndarray


def prepare(ds: SyntheticDataset, cfg: ModelConfig, valid_fraction: float = 0.1, seed: int = 0) -> Prepared:
    return prepare_examples(ds.train, ds.test, ds.multimodal, cfg, valid_fraction, seed, ds)


def prepare_examples(train, test, mm, cfg: ModelConfig, valid_fraction: float = 0.1, seed: int = 0,
                     dataset: SyntheticDataset | None = None) -> Prepared:
    """Vocabulary, bucketizer (fit on training similarities) and encoded splits."""
    item_ids = np.union1d(mm.ids.astype(np.int64),
                          np.fromiter((i for ex in train for i in ex.history), dtype=np.int64))
    user_ids = np.unique([ex.user_id for ex in train])
    skeleton = init_params(replace(cfg, strategy="ta"), item_ids, user_ids)
    full = encode(train, skeleton, mm, None)
    test_b = encode(test, skeleton, mm, None)
    bz = fit_bucketizer(full, cfg.buckets, seed)
    full, test_b = with_buckets(full, bz), with_buckets(test_b, bz)
    order = np.random.default_rng([seed, 99]).permutation(len(full))
    n_valid = int(len(full) * valid_fraction)
    return Prepared(dataset, full.take(np.sort(order[n_valid:])), full.take(np.sort(order[:n_valid])), test_b, bz,
                    item_ids, user_ids)


@dataclass
class RunResult:
    strategy: str
    alpha: float | None
    seed: int
    valid_auc: float
    test_auc: float
    test_gauc: float
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train_model(prep: Prepared, cfg: ModelConfig, epochs: int) -> tuple[ModelParams, list]:
    params = init_params(cfg, prep.item_ids, prep.user_ids)
    opt = AdamState.for_params(params)
    losses = []
    for epoch in range(epochs):
        losses.append(train_epoch(prep.train, params, opt, epoch)["loss"])
    return params, losses


def run_one(prep: Prepared, cfg: ModelConfig, epochs: int) -> RunResult:
    t0 = time.perf_counter()
    params, losses = train_model(prep, cfg, epochs)
    v = evaluate(params, prep.valid)
    t = evaluate(params, prep.test)
    alpha = cfg.alpha if cfg.strategy == "dmf" else None
    res = RunResult(cfg.strategy, alpha, cfg.seed, v["auc"], t["auc"], t["gauc"], losses, time.perf_counter() - t0)
    log.info("%s alpha=%s seed=%d valid=%.4f test=%.4f (%.1fs)", res.strategy, alpha, cfg.seed, res.valid_auc,
             res.test_auc, res.seconds)
    return res


def ablation(seeds=(0, 1, 2, 3, 4), strategies=("ta", "late", "decoupled"), alphas=ALPHA_GRID, epochs: int = 2,
             data_cfg: SyntheticConfig | None = None, model_cfg: ModelConfig | None = None) -> list[RunResult]:
    """Train every strategy plus the DMF alpha sweep on one dataset per seed."""
    data_cfg = data_cfg or SyntheticConfig()
    model_cfg = model_cfg or ModelConfig()
    results = []
    for seed in seeds:
        ds = gen_synthetic(replace(data_cfg, seed=seed))
        prep = prepare(ds, model_cfg, seed=seed)
        for st in strategies:
            results.append(run_one(prep, replace(model_cfg, strategy=st, seed=seed), epochs))
        for a in alphas:
            results.append(run_one(prep, replace(model_cfg, strategy="dmf", alpha=a, seed=seed), epochs))
    return results


def summarize(results: list[RunResult]) -> dict:
    """Seed-averaged test AUC per model, with alpha tuned on validation AUC."""
    def key(r):
        return r.strategy if r.alpha is None else f"dmf@{r.alpha:.1f}"

    table: dict = {}
    for r in results:
        table.setdefault(key(r), []).append(r)
    mean = {k: float(np.mean([r.test_auc for r in v])) for k, v in table.items()}
    mean_valid = {k: float(np.mean([r.valid_auc for r in v])) for k, v in table.items()}
    sweep = {k: v for k, v in mean_valid.items() if k.startswith("dmf@")}
    out = {"test_auc": mean, "valid_auc": mean_valid}
    if sweep:
        tuned = max(sweep, key=sweep.get)
        out["tuned_alpha"] = float(tuned.split("@")[1])
        out["dmf"] = mean[tuned]
        out["dta"] = mean.get("decoupled", mean.get("dmf@1.0"))
        out["hist_only"] = mean.get("dmf@0.0")
        out["alpha_one"] = mean.get("dmf@1.0")
    return out
