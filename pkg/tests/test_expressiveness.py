import numpy as np
import pytest

from dmf.bucketing import Bucketizer
from dmf.expressiveness import bucket_approx_probe, bucket_edges, midpoint_embeddings


def test_zero_direction_gives_zero_error():
    for row in bucket_approx_probe([4, 16], np.zeros(5), sample_count=500):
        assert row.max_error == 0.0 and row.bound == 0.0


def test_midpoint_embeddings_by_hand():
    bz = Bucketizer(np.array([0.0]))
    np.testing.assert_array_equal(bucket_edges(bz), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(midpoint_embeddings(bz, [2.0, -1.0]), [[-1.0, 0.5], [1.0, -0.5]])


def test_probe_respects_bound_and_tightens():
    w = np.random.default_rng(0).standard_normal(8)
    rows = bucket_approx_probe([4, 8, 16, 32, 64], w, sample_count=10_000, seed=1)
    assert all(r.max_error <= r.bound for r in rows)
    errs = [r.max_error for r in rows]
    assert all(a > b for a, b in zip(errs[1:], errs[2:]))


def test_single_point_error_is_midpoint_gap():
    w = np.array([3.0, 4.0])
    (row,) = bucket_approx_probe([2], w, samples=[-0.5, 0.25, 0.75])
    # boundary at the median 0.25 (which falls in the upper bucket); midpoints -0.375 and 0.625;
    # the worst sample is 0.25, off by 0.375, times ||w|| = 5
    assert row.max_error == pytest.approx(1.875, abs=1e-12)
    assert row.bound == pytest.approx(0.5 * 1.25 * 5.0)
