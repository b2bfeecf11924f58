import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmf.data import (
    SyntheticConfig,
    UndefinedMetric,
    auc,
    gauc,
    gen_synthetic,
    load_interactions,
    write_dataset,
    write_interactions,
)
from dmf.model import TrainExample


def pair_count_auc(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0], [0.1, 0.9]) == 0.0
    assert auc([1, 0, 1, 0], [0.5, 0.5, 0.5, 0.5]) == 0.5
    with pytest.raises(UndefinedMetric):
        auc([1, 1], [0.2, 0.3])


@pytest.mark.parametrize("seed", range(200))
def test_auc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 101))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 10, n) / 10.0  # coarse grid forces ties
    assert auc(labels, scores) == pair_count_auc(labels.tolist(), scores.tolist())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auc_monotone_transform_invariant(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 30)]
    scores = rng.standard_normal(labels.size)
    assert auc(labels, scores) == auc(labels, np.exp(3 * scores) + 1)


def test_gauc_two_user_weighting():
    # user 1: six impressions ranked perfectly; user 2: two impressions inverted; weights 3:1
    users = [1] * 6 + [2] * 2
    labels = [1, 1, 1, 0, 0, 0, 1, 0]
    scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1, 0.1, 0.9]
    assert gauc(users, labels, scores) == pytest.approx(0.75, abs=1e-12)


def test_gauc_single_user_and_skip_rule():
    labels, scores = [1, 0, 1, 0], [0.3, 0.2, 0.1, 0.4]
    assert gauc([5] * 4, labels, scores) == auc(labels, scores)
    value, skipped = gauc([5] * 4 + [6] * 3, labels + [1, 1, 1], scores + [0.0, 0.5, 0.9], return_skipped=True)
    assert value == auc(labels, scores) and skipped == 1
    with pytest.raises(UndefinedMetric):
        gauc([1, 2], [1, 0], [0.5, 0.5])


def _small(**kw):
    return SyntheticConfig(users=80, items=300, examples_per_user=30, **kw)


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = write_dataset(gen_synthetic(_small(seed=4)), tmp_path / "a")
    b = write_dataset(gen_synthetic(_small(seed=4)), tmp_path / "b")
    for k in a:
        with open(a[k], "rb") as fa, open(b[k], "rb") as fb:
            assert fa.read() == fb.read(), k


def test_zero_similarity_weight_decouples_labels():
    ds = gen_synthetic(SyntheticConfig(users=200, items=300, examples_per_user=50, sim_weight=0.0, gated_weight=0.0,
                                       seed=5))
    labels = np.array([e.label for e in ds.train + ds.test])[:10_000]
    c = ds.c_target[:10_000]
    assert labels.size == 10_000
    r = np.corrcoef(labels, c)[0, 1]
    assert abs(r) < 3 / np.sqrt(labels.size)


def test_strong_similarity_weight_is_recoverable_by_threshold():
    ds = gen_synthetic(_small(sim_weight=12.0, id_weight=0.0, gated_weight=0.0, noise=0.1, seed=6))
    labels = [e.label for e in ds.train + ds.test]
    assert auc(labels, ds.c_target) > 0.8


def test_click_rate_matches_mean_sigmoid():
    ds = gen_synthetic(SyntheticConfig(users=1000, examples_per_user=100, seed=7))
    labels = np.array([e.label for e in ds.train + ds.test])
    assert labels.size == 100_000
    assert abs(labels.mean() - ds.click_prob.mean()) < 0.02
    assert np.all((ds.click_prob > 0) & (ds.click_prob < 1))


def test_pairing_mode_has_one_positive_one_negative():
    ds = gen_synthetic(_small(mode="pairing", seed=2))
    labels = np.array([e.label for e in ds.train + ds.test])
    assert labels.size == 2 * 80 and labels.sum() == 80
    with pytest.raises(ValueError):
        gen_synthetic(_small(mode="bogus"))


def test_history_is_preference_biased():
    cfg = _small(seed=8)
    ds = gen_synthetic(cfg)
    flat = replace(cfg, preference_sharpness=0.0)
    biased = np.mean(gen_synthetic(cfg).c_target)
    uniform = np.mean(gen_synthetic(flat).c_target)
    assert biased > uniform + 0.05
    assert len(ds.train) + len(ds.test) == 80 * 30


def test_load_truncates_and_round_trips(tmp_path):
    exs = [TrainExample(1, list(range(1, 151)), 7, 1), TrainExample(2, [3, 4], 5, 0)]
    path = tmp_path / "x.jsonl"
    write_interactions(path, exs)
    back = load_interactions(path)
    assert back[0].history == list(range(51, 151))
    assert back[1] == exs[1]
    assert load_interactions(path, max_len=200) == exs


def test_load_errors_and_warnings(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"user_id": 1, "history": [1], "target_id": 2, "label": 1}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        load_interactions(bad)
    lab = tmp_path / "lab.jsonl"
    lab.write_text(json.dumps({"user_id": 1, "history": [1], "target_id": 2, "label": 3}) + "\n")
    with pytest.raises(ValueError, match="label"):
        load_interactions(lab)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.warns(RuntimeWarning):
        assert load_interactions(empty) == []
    mixed = tmp_path / "mixed.jsonl"
    write_interactions(mixed, [TrainExample(1, [], 2, 1), TrainExample(1, [3], 2, 0)])
    stats = {}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert len(load_interactions(mixed, stats=stats)) == 1
    assert stats == {"dropped_empty_history": 1}
