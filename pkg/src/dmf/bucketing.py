"""Equal-frequency bucketization of similarity scores and fixed-width histograms."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
DEFAULT_BUCKETS = 35
DEFAULT_HISTOGRAM_BINS = 20
RESERVOIR_SIZE = 1_000_000


@dataclass(frozen=True)
class Bucketizer:
    """Maps a score in [-1, 1] to a bucket in 1..M using half-open intervals.

    A score sitting exactly on a boundary belongs to the bucket on its right.
    """

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.ndim != 1:
            raise ValueError("boundaries must be 1-D")
        if b.size and not np.all(np.diff(b) > 0):
            raise ValueError("boundaries must be strictly ascending")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @property
    def bucket_count(self) -> int:
        return self.boundaries.size + 1

    def bucket(self, c: float) -> int:
        return int(self.rows(np.asarray([c]))[0]) + 1

    def rows(self, c) -> np.ndarray:
        """Zero-based bucket rows for an array of scores (embedding-table rows)."""
        c = np.clip(np.asarray(c, dtype=np.float64), -1.0, 1.0)
        return np.searchsorted(self.boundaries, c, side="right")

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": FORMAT_VERSION,
                "bucket_count": self.bucket_count,
                "boundaries": [float(x) for x in self.boundaries],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> Bucketizer:
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported bucketizer version {doc.get('version')!r}")
        bz = cls(np.asarray(doc["boundaries"], dtype=np.float64))
        if bz.bucket_count != doc["bucket_count"]:
            raise ValueError("bucket_count does not match boundaries")
        return bz

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Bucketizer:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def uniform_boundaries(m: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, m + 1)[1:-1]


def fit_equal_frequency(samples, m: int = DEFAULT_BUCKETS) -> Bucketizer:
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("cannot fit buckets on an empty sample")
    if m < 2:
        raise ValueError(f"need at least 2 buckets, got {m}")
    # +0.0 folds -0.0 into 0.0 so the sort order, and hence the fit, depends only on the multiset
    samples = np.clip(samples, -1.0, 1.0) + 0.0
    if np.unique(samples).size < m:
        warnings.warn(
            f"only {np.unique(samples).size} distinct scores for {m} buckets; using uniform boundaries",
            RuntimeWarning,
            stacklevel=2,
        )
        return Bucketizer(uniform_boundaries(m))
    qs = np.quantile(samples, np.arange(1, m) / m, method="linear")
    for i in range(1, qs.size):
        if qs[i] <= qs[i - 1]:
            qs[i] = np.nextafter(qs[i - 1], np.inf)
    return Bucketizer(qs)


def reservoir_sample(scores, rng: np.random.Generator, size: int = RESERVOIR_SIZE) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size <= size:
        return scores
    return scores[rng.choice(scores.size, size=size, replace=False)]


def histogram_bins(scores, n: int) -> np.ndarray:
    """Bin index of each score for ``n`` equal-width intervals over [-1, 1]."""
    c = np.clip(np.asarray(scores, dtype=np.float64), -1.0, 1.0)
    return np.minimum(np.floor((c + 1.0) * (n / 2.0)).astype(np.int64), n - 1)


def uniform_histogram(scores, n: int = DEFAULT_HISTOGRAM_BINS) -> np.ndarray:
    if n < 1:
        raise ValueError("histogram needs at least one interval")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        return np.zeros(n, dtype=np.int64)
    return np.bincount(histogram_bins(scores, n), minlength=n)


def batch_histogram(scores: np.ndarray, valid: np.ndarray, n: int) -> np.ndarray:
    """Row-wise :func:`uniform_histogram` over the valid entries of ``scores`` [N, L]."""
    rows = scores.shape[0]
    bins = histogram_bins(scores, n) + n * np.arange(rows)[:, None]
    counts = np.bincount(bins[valid], minlength=rows * n)
    return counts.reshape(rows, n)
