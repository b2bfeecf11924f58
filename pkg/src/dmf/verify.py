"""Self-checks shared by ``dmf verify`` and the test suite.

Each check returns a :class:`CheckResult` with a numeric margin: positive
means the requirement holds with that much room.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bucketing import fit_equal_frequency
from .expressiveness import bucket_approx_probe
from .features import MultimodalTable
from .model import STRATEGIES, ModelConfig, TrainExample, encode, forward, init_params
from .serving import ScoringEngine, flops_kv, perturbed
from .training import gradient_check

GRAD_TOLERANCE = 1e-4
PROBE_BUCKETS = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def tiny_problem(strategy: str, seed: int = 0, d: int = 4, length: int = 3, buckets: int = 3, n: int = 6):
    """A float64 model and batch small enough for entry-wise finite differences."""
    rng = np.random.default_rng(seed)
    n_items = 8
    ids = np.arange(1, n_items + 1)
    mm = MultimodalTable(ids, rng.standard_normal((n_items, 5)))
    examples = []
    for u in range(n):
        hist = rng.choice(ids, size=int(rng.integers(1, length + 1)), replace=False)
        examples.append(TrainExample(u % 3 + 1, [int(i) for i in hist], int(rng.choice(ids)), int(u % 2)))
    cfg = ModelConfig(strategy=strategy, d=d, d_h=d, heads=2, buckets=buckets, hist_bins=5, hist_hidden=3,
                      pred_hidden=(5,), alpha=0.4, init_scale=0.5, seed=seed)
    params = init_params(cfg, ids, [1, 2, 3], dtype=np.float64)
    # spread PReLU slopes and biases away from their init so no gradient is trivially zero
    for name, t in params.tensors.items():
        if ".a" in name or ".b" in name:
            t += rng.uniform(-0.2, 0.2, size=t.shape)
    sample = np.clip(rng.uniform(-1, 1, 200), -1, 1)
    bz = fit_equal_frequency(sample, buckets)
    batch = encode(examples, params, mm, bz).astype(np.float64)
    _clear_kinks(params, batch)
    return params, batch


_MLP_CACHES = {"din": "din_cache", "hist": "hist_cache", "pred": "pred_cache"}


def _clear_kinks(params, batch, margin: float = 0.05) -> None:
    """Shift hidden biases so no PReLU input lies within ``margin`` of zero.

    Central differences straddling a kink are meaningless. Even units are
    pushed onto the positive branch and odd units onto the negative one, so
    both branches (and the slope gradients) stay covered.
    """
    for prefix, key in _MLP_CACHES.items():
        n_hidden = sum(1 for k in params.tensors if k.startswith(f"{prefix}.a"))
        for i in range(n_hidden):
            _, cache = forward(params, batch, keep=True)
            z = cache[key][1][i].reshape(-1, cache[key][1][i].shape[-1])
            b = params.tensors[f"{prefix}.b{i}"]
            for j in range(z.shape[1]):
                if j % 2 == 0:
                    b[j] += max(0.0, margin - z[:, j].min())
                else:
                    b[j] -= max(0.0, z[:, j].max() + margin)


def check_gradients(strategies=STRATEGIES, h: float = 1e-3, seed: int = 0) -> list[CheckResult]:
    out = []
    for st in strategies:
        params, batch = tiny_problem(st, seed)
        errs = gradient_check(params, batch, h)
        worst = max(errs, key=errs.get)
        out.append(CheckResult(f"gradient[{st}]", errs[worst] < GRAD_TOLERANCE, GRAD_TOLERANCE - errs[worst],
                               f"worst tensor {worst} rel err {errs[worst]:.3e}"))
    return out


def check_bucket_approx(m_values=PROBE_BUCKETS, sample_count: int = 10_000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(16)
    rows = bucket_approx_probe(m_values, w, sample_count, seed)
    out = [CheckResult(f"bucket_approx[M={r.buckets}]", r.max_error <= r.bound, r.margin,
                       f"max_error {r.max_error:.6f} bound {r.bound:.6f}") for r in rows]
    tail = [r for r in rows if r.buckets >= 8]
    gaps = [a.max_error - b.max_error for a, b in zip(tail, tail[1:])]
    out.append(CheckResult("bucket_approx[decreasing]", all(g > 0 for g in gaps), min(gaps) if gaps else 0.0,
                           "max_error strictly decreasing from M=8 on"))
    return out


def small_engine(seed: int = 0, vocab: int = 200, d: int = 16, d_m: int = 12, strategy: str = "decoupled"):
    rng = np.random.default_rng(seed)
    ids = np.arange(1, vocab + 1)
    cfg = ModelConfig(strategy=strategy, d=d, d_h=d, heads=4, buckets=8, hist_bins=10, hist_hidden=8,
                      pred_hidden=(16, 8), init_scale=0.3, seed=seed)
    params = init_params(cfg, ids, [1, 2, 3])
    mm = MultimodalTable(ids, rng.standard_normal((vocab, d_m)))
    bz = fit_equal_frequency(np.clip(rng.standard_normal(2000) * 0.3, -1, 1), cfg.buckets)
    return ScoringEngine(params, mm, bz)


def check_reuse(trials: int = 100, seed: int = 0, inject_fault: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    engine = small_engine(seed)
    ids = engine.params.item_ids[1:]
    ok = 0
    for _ in range(trials):
        ctx = engine.prepare_user(int(rng.integers(1, 4)), rng.choice(ids, size=int(rng.integers(1, 40))))
        if inject_fault:
            ctx = perturbed(ctx, int(rng.integers(len(ctx))))
        cands = rng.choice(ids, size=int(rng.integers(1, 24)))
        ok += engine.reuse_equivalence_check(ctx, cands)
    return CheckResult("reuse_equivalence", ok == trials, float(ok - trials), f"{ok}/{trials} trials bit-identical")


def _flops_oracle(strategy, b, l, d, reuse):
    per_candidate = b * (2 * l * d * d) + b * (2 * l * d)
    if strategy == "early" or not reuse:
        return per_candidate
    return 2 * l * d * d + 2 * b * l * d


def check_flops(cases: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0
    for _ in range(cases):
        b, l, d = (int(x) for x in rng.integers(1, 5000, size=3))
        for st in ("early", "late", "decoupled"):
            for reuse in (False, True):
                worst = max(worst, abs(flops_kv(st, b, l, d, reuse).kv_flops - _flops_oracle(st, b, l, d, reuse)))
    early = flops_kv("early", 1000, 400, 128, False).kv_flops
    dec = flops_kv("decoupled", 1000, 400, 128, True).kv_flops
    return [
        CheckResult("flops[closed_form]", worst == 0, -float(worst), f"{cases * 6} randomized cells"),
        CheckResult("flops[reference]", (early, dec) == (13_209_600_000, 115_507_200), 0.0 if early == 13_209_600_000
                    and dec == 115_507_200 else -1.0, f"early {early} decoupled {dec} ratio {early / dec:.1f}"),
    ]


def run_all(inject_fault: bool = False, trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return (check_gradients(seed=seed) + check_bucket_approx(seed=seed)
            + [check_reuse(trials, seed, inject_fault)] + check_flops(seed=seed))
