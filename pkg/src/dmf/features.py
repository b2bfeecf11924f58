"""Target-aware multimodal similarity features.

Multimodal vectors are frozen and normalised once at load, so each candidate
costs one matrix-vector product against the user's history.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bucketing import uniform_histogram
from .numerics import FLOAT, MlpParams, mlp_forward

MMF_MAGIC = b"MMF1"
_HEADER = struct.Struct("<4sIQ")
SIM_EPS = 1e-5


class ZeroNormError(ValueError):
    pass


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("item_id", "<u8"), ("vec", "<f4", (dim,))])


class MultimodalTable:
    """Read-only map from item id to a unit-norm float32 vector."""

    def __init__(self, ids, vectors):
        ids = np.asarray(ids, dtype=np.uint64)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != ids.size:
            raise ValueError(f"need one row per id, got {vectors.shape} for {ids.size} ids")
        if not np.all(np.isfinite(vectors)):
            bad = ids[~np.isfinite(vectors).all(axis=1)][0]
            raise ValueError(f"non-finite multimodal vector for item {int(bad)}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise ZeroNormError(f"zero-norm multimodal vector for item {int(ids[norms == 0][0])}")
        self.dim = vectors.shape[1]
        self.ids = ids
        self.vectors = (vectors / norms[:, None]).astype(FLOAT)
        self.vectors.setflags(write=False)
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self) -> int:
        return self.ids.size

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._row

    def get(self, item_id):
        r = self._row.get(int(item_id))
        return None if r is None else self.vectors[r]

    def rows(self, item_ids) -> np.ndarray:
        """Row index per id, -1 where the id is missing."""
        return np.fromiter((self._row.get(int(i), -1) for i in item_ids), dtype=np.int64, count=len(item_ids))

    def matrix(self, item_ids, sink: Counter | None = None):
        """Stacked vectors for ``item_ids`` and a mask of which ids were found."""
        rows = self.rows(item_ids)
        found = rows >= 0
        out = np.zeros((len(item_ids), self.dim), dtype=FLOAT)
        out[found] = self.vectors[rows[found]]
        if sink is not None:
            sink["missing_multimodal"] += int((~found).sum())
        return out, found

    def save(self, path) -> None:
        recs = np.empty(len(self), dtype=_record_dtype(self.dim))
        recs["item_id"] = self.ids
        recs["vec"] = self.vectors
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MMF_MAGIC, self.dim, len(self)))
            fh.write(recs.tobytes())

    @classmethod
    def load(cls, path) -> MultimodalTable:
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, dim, count = _HEADER.unpack_from(raw)
        if magic != MMF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        dt = _record_dtype(dim)
        body = raw[_HEADER.size:]
        if len(body) != count * dt.itemsize:
            raise ValueError(f"{path}: expected {count} records of {dt.itemsize} bytes, got {len(body)} bytes")
        recs = np.frombuffer(body, dtype=dt, count=count)
        return cls(recs["item_id"], recs["vec"])


def write_mmf(path, ids, vectors) -> None:
    """Write raw (unnormalised) vectors in the MMF1 layout."""
    vectors = np.asarray(vectors, dtype="<f4")
    recs = np.empty(len(ids), dtype=_record_dtype(vectors.shape[1]))
    recs["item_id"] = ids
    recs["vec"] = vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MMF_MAGIC, vectors.shape[1], len(ids)))
        fh.write(recs.tobytes())


@dataclass
class SimilarityVector:
    scores: np.ndarray  # float32 [L]
    valid: np.ndarray  # bool [L]

    def __len__(self) -> int:
        return self.scores.size


def cosine_similarity(a, b, item_id=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        who = f" for item {item_id}" if item_id is not None else ""
        raise ZeroNormError(f"cosine similarity undefined: zero-norm vector{who}")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_vector(target_mm, history_mm, valid) -> SimilarityVector:
    """Cosine scores of a target against every (pre-normalised) history row."""
    valid = np.asarray(valid, dtype=bool)
    history_mm = np.asarray(history_mm, dtype=FLOAT)
    if target_mm is None:
        return SimilarityVector(np.zeros(valid.size, dtype=FLOAT), np.zeros(valid.size, dtype=bool))
    t = np.asarray(target_mm, dtype=np.float64)
    norm = np.linalg.norm(t)
    if norm == 0:
        raise ZeroNormError("zero-norm target vector")
    t = (t / norm).astype(FLOAT)
    if history_mm.shape[0] == 0:
        return SimilarityVector(np.zeros(0, dtype=FLOAT), np.zeros(0, dtype=bool))
    scores = np.clip(history_mm @ t, -1.0, 1.0)
    return SimilarityVector(np.where(valid, scores, 0.0).astype(FLOAT), valid.copy())


def histogram_input(sim: SimilarityVector, n: int, normalize: bool = True) -> np.ndarray:
    counts = uniform_histogram(sim.scores[sim.valid], n).astype(FLOAT)
    if normalize:
        counts /= max(1, int(sim.valid.sum()))
    return counts


def histogram_representation(sim: SimilarityVector, n: int, mlp: MlpParams, normalize: bool = True) -> np.ndarray:
    """Modality-centric interest vector: MLP over the similarity histogram."""
    return mlp_forward(histogram_input(sim, n, normalize), mlp)
