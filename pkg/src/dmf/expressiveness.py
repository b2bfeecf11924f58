"""Numerical check that bucket embeddings can imitate additive scalar fusion.

The reference model adds ``c * w`` to an ID embedding; the bucketed model adds
``e[bucket(c)]``. Choosing ``e_m = midpoint_m * w`` bounds the gap per sample
by half the width of its bucket times ``||w||``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bucketing import Bucketizer, fit_equal_frequency


@dataclass(frozen=True)
class ProbeRow:
    buckets: int
    max_error: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.max_error


def bucket_edges(bz: Bucketizer) -> np.ndarray:
    return np.concatenate([[-1.0], bz.boundaries, [1.0]])


def midpoint_embeddings(bz: Bucketizer, w) -> np.ndarray:
    edges = bucket_edges(bz)
    mids = 0.5 * (edges[:-1] + edges[1:])
    return mids[:, None] * np.asarray(w, dtype=np.float64)[None, :]


def bucket_approx_probe(m_values, w, sample_count: int = 10_000, seed: int = 0, samples=None) -> list[ProbeRow]:
    rng = np.random.default_rng(seed)
    w = np.asarray(w, dtype=np.float64)
    c = rng.uniform(-1.0, 1.0, size=sample_count) if samples is None else np.asarray(samples, dtype=np.float64)
    s = rng.standard_normal((c.size, w.size))
    h_ref = s + c[:, None] * w
    rows = []
    for m in m_values:
        bz = fit_equal_frequency(c, m)
        e = midpoint_embeddings(bz, w)
        h_bucket = s + e[bz.rows(c)]
        err = float(np.max(np.linalg.norm(h_ref - h_bucket, axis=1))) if c.size else 0.0
        half_width = 0.5 * float(np.max(np.diff(bucket_edges(bz))))
        rows.append(ProbeRow(int(m), err, half_width * float(np.linalg.norm(w))))
    return rows


theorem1_probe = bucket_approx_probe  # name used by the published interface
