import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmf.features import (
    MultimodalTable,
    ZeroNormError,
    cosine_similarity,
    histogram_input,
    histogram_representation,
    similarity_vector,
    write_mmf,
)
from dmf.numerics import MlpParams, mlp_forward


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8, abs=1e-12)


def test_cosine_zero_norm_names_item():
    with pytest.raises(ZeroNormError, match="item 42"):
        cosine_similarity([0, 0], [1, 0], item_id=42)


def test_table_normalizes_and_is_read_only():
    t = MultimodalTable([5, 9], [[3.0, 4.0], [0.0, -2.0]])
    np.testing.assert_allclose(np.linalg.norm(t.vectors, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(t.get(5), [0.6, 0.8], atol=1e-7)
    assert t.get(7) is None
    np.testing.assert_array_equal(t.rows([9, 7, 5]), [1, -1, 0])
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 1.0


def test_table_rejects_bad_vectors():
    with pytest.raises(ZeroNormError, match="item 2"):
        MultimodalTable([1, 2], [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="non-finite"):
        MultimodalTable([1], [[np.nan, 1.0]])


def test_mmf_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((6, 5)) * 3
    path = tmp_path / "items.mmf"
    write_mmf(path, np.arange(10, 16), raw)
    t = MultimodalTable.load(path)
    assert t.dim == 5 and len(t) == 6
    np.testing.assert_allclose(t.get(12), raw[2] / np.linalg.norm(raw[2]), atol=1e-6)
    header = path.read_bytes()[:16]
    assert header[:4] == b"MMF1"
    assert int.from_bytes(header[4:8], "little") == 5
    assert int.from_bytes(header[8:16], "little") == 6


def test_mmf_loader_rejects_corruption(tmp_path):
    path = tmp_path / "bad.mmf"
    write_mmf(path, [1, 2], [[1.0, 0.0], [np.inf, 1.0]])
    with pytest.raises(ValueError, match="non-finite"):
        MultimodalTable.load(path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        MultimodalTable.load(path)
    good = tmp_path / "good.mmf"
    write_mmf(good, [1], [[1.0, 0.0]])
    good.write_bytes(good.read_bytes()[:-2])
    with pytest.raises(ValueError, match="records"):
        MultimodalTable.load(good)


def test_missing_items_are_masked():
    t = MultimodalTable([1, 2], [[1.0, 0.0], [0.0, 1.0]])
    mat, found = t.matrix([2, 3, 1])
    np.testing.assert_array_equal(found, [True, False, True])
    np.testing.assert_array_equal(mat[1], [0.0, 0.0])


def test_similarity_vector_examples():
    h = np.array([[0.6, 0.8], [1.0, 0.0]], dtype=np.float32)
    sim = similarity_vector(np.array([0.6, 0.8]), h, np.ones(2, bool))
    assert sim.scores[0] == pytest.approx(1.0, abs=1e-6)
    assert sim.valid.all()
    empty = similarity_vector(np.array([1.0, 0.0]), np.zeros((3, 2)), np.zeros(3, bool))
    assert not empty.valid.any() and np.all(empty.scores == 0)
    assert not similarity_vector(None, h, np.ones(2, bool)).valid.any()


def test_similarity_vector_matches_pairwise_oracle():
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((4, 8))
    t = MultimodalTable(np.arange(4), raw)
    sim = similarity_vector(raw[0], t.vectors[1:], np.ones(3, bool))
    oracle = [cosine_similarity(raw[0], raw[j]) for j in (1, 2, 3)]
    np.testing.assert_allclose(sim.scores, oracle, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(2, 6), st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_scale_and_permutation(length, dim, seed, scale):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((length + 1, dim)) + 0.1
    a = MultimodalTable(np.arange(length + 1), raw)
    b = MultimodalTable(np.arange(length + 1), raw * scale)
    valid = np.ones(length, bool)
    sa = similarity_vector(a.vectors[0], a.vectors[1:], valid).scores
    sb = similarity_vector(b.vectors[0], b.vectors[1:], valid).scores
    np.testing.assert_allclose(sa, sb, atol=1e-6)
    perm = rng.permutation(length)
    sp = similarity_vector(a.vectors[0], a.vectors[1:][perm], valid).scores
    np.testing.assert_allclose(sp, sa[perm], atol=1e-7)
    assert np.all(np.abs(sa) <= 1.0)


def test_histogram_representation():
    mlp = MlpParams.init([4, 3, 2], np.random.default_rng(0))
    sim = similarity_vector(np.array([1.0, 0.0]), np.zeros((2, 2)), np.zeros(2, bool))
    np.testing.assert_array_equal(histogram_representation(sim, 4, mlp), mlp_forward(np.zeros(4, np.float32), mlp))

    from dmf.features import SimilarityVector

    s = SimilarityVector(np.array([-0.9, 0.1, 0.95], np.float32), np.ones(3, bool))
    np.testing.assert_allclose(histogram_input(s, 4), np.array([1, 0, 1, 1]) / 3)
    np.testing.assert_array_equal(histogram_input(s, 4, normalize=False), [1, 0, 1, 1])
    assert histogram_representation(s, 4, mlp).tobytes() == histogram_representation(s, 4, mlp).tobytes()
