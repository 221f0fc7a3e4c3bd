import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from typorec.features import BINARY, FLOAT, DescriptorSet
from typorec.match import (
    BRUTE_FORCE,
    HAMMING,
    KDTREE,
    L2,
    UNKNOWN,
    DescriptorIndex,
    Match,
    MatchTable,
    MatcherConfig,
    knn2,
    ratio_filter,
    ratio_mask,
    tally,
    vote,
)


def binary_set(rows):
    return DescriptorSet(BINARY, rows.shape[1] * 8, rows)


def float_set(rows):
    return DescriptorSet(FLOAT, rows.shape[1], rows)


def test_identical_query_distance_zero(rng):
    train = binary_set(rng.integers(0, 256, (10, 32), dtype=np.uint8))
    nb = knn2(binary_set(train.data[3:4].copy()), train, MatcherConfig())
    assert nb.idx[0, 0] == 3 and nb.dist[0, 0] == 0


def test_one_bit_flip(rng):
    train = binary_set(rng.integers(0, 256, (10, 32), dtype=np.uint8))
    q = train.data[6:7].copy()
    q[0, 5] ^= 0x10
    nb = knn2(binary_set(q), train, MatcherConfig())
    assert nb.idx[0, 0] == 6 and nb.dist[0, 0] == 1


def test_knn2_errors(rng):
    fset = float_set(rng.random((5, 4), dtype=np.float32))
    bset = binary_set(rng.integers(0, 256, (5, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        knn2(fset, fset, MatcherConfig(metric=HAMMING))
    with pytest.raises(ValueError):
        knn2(bset, bset, MatcherConfig(metric=L2))
    with pytest.raises(ValueError):
        knn2(bset, binary_set(bset.data[:1]), MatcherConfig())


def _random_pair(rng, metric, n, m):
    if metric == HAMMING:
        # low width makes exact ties frequent
        t = rng.integers(0, 4, (n, 2), dtype=np.uint8)
        q = rng.integers(0, 4, (m, 2), dtype=np.uint8)
        return binary_set(t), binary_set(q)
    t = rng.integers(0, 3, (n, 3)).astype(np.float32) if rng.random() < 0.5 else rng.random((n, 5), dtype=np.float32)
    q = rng.integers(0, 3, (m, t.shape[1])).astype(np.float32) if rng.random() < 0.5 else rng.random((m, t.shape[1]), dtype=np.float32)
    return float_set(t), float_set(q)


@pytest.mark.parametrize("metric", [HAMMING, L2])
def test_kdtree_equals_brute_force(metric):
    rng = np.random.default_rng(123)
    for _ in range(1000):
        train, query = _random_pair(rng, metric, int(rng.integers(2, 40)), int(rng.integers(1, 6)))
        leaf = int(rng.integers(1, 8))
        a = knn2(query, train, MatcherConfig(strategy=BRUTE_FORCE, metric=metric))
        b = knn2(query, train, MatcherConfig(strategy=KDTREE, metric=metric, kdtree_leaf_size=leaf))
        np.testing.assert_array_equal(a.dist, b.dist)
        np.testing.assert_array_equal(a.idx, b.idx)


def test_kdtree_100_descriptor_example(rng):
    train = binary_set(rng.integers(0, 256, (100, 32), dtype=np.uint8))
    query = binary_set(rng.integers(0, 256, (20, 32), dtype=np.uint8))
    a = knn2(query, train, MatcherConfig(strategy=BRUTE_FORCE))
    b = knn2(query, train, MatcherConfig(strategy=KDTREE))
    assert np.array_equal(a.dist, b.dist) and np.array_equal(a.idx, b.idx)


def test_ratio_examples():
    assert ratio_mask(np.array([1.0]), np.array([2.0]), 0.8).tolist() == [True]
    assert ratio_mask(np.array([4.0]), np.array([5.0]), 0.8).tolist() == [False]
    assert ratio_mask(np.array([0.0]), np.array([0.0])).tolist() == [True]
    assert ratio_mask(np.array([1.0]), np.array([np.inf])).tolist() == [False]
    assert MatcherConfig().ratio_threshold == 0.8


def test_ratio_filter_and_views(rng):
    train = rng.random((6, 4), dtype=np.float32)
    idx = DescriptorIndex(train, MatcherConfig(metric=L2), views=np.array([0, 0, 1, 1, 2, 2]))
    q = train[[1, 4]] + 1e-3
    good = ratio_filter(idx.knn2(q))
    assert [m.train_view for m in good] == [0, 2]
    assert [m.query_idx for m in good] == [0, 1]


def test_vote_examples():
    ms = [Match(i, 0 if i < 7 else 1, 0, 0.0) for i in range(10)]
    t = vote(ms, {0: "A", 1: "B"})
    assert (t.winner, t.total_good, t.counts) == ("A", 10, {"A": 7, "B": 3})
    assert vote([], {}).winner == UNKNOWN
    assert tally(["B"] * 5 + ["A"] * 5).winner == "A"
    # votes are summed across the views of one label
    ms = [Match(0, 0, 0, 0), Match(1, 1, 0, 0), Match(2, 2, 0, 0)]
    assert vote(ms, {0: "Z", 1: "Z", 2: "A"}).winner == "Z"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("ABCD"), max_size=30), st.randoms(use_true_random=False))
def test_vote_permutation_invariant(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    assert tally(labels) == tally(shuffled)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_ratio_monotone(d, r1, r2):
    lo, hi = sorted((r1, r2))
    d1 = np.array(d)
    d2 = d1 + np.abs(np.array(d[::-1]))
    assert np.all(ratio_mask(d1, d2, lo) <= ratio_mask(d1, d2, hi))


def _dist(a, b, metric):
    from typorec.match import canonical_distance

    if metric == HAMMING:
        raw = np.bitwise_count(a ^ b).sum()
    else:
        raw = ((a.astype(np.float64) - b) ** 2).sum()
    return float(canonical_distance(np.array([raw]), metric)[0])


@pytest.mark.parametrize("metric", [HAMMING, L2])
def test_metric_axioms(rng, metric):
    for _ in range(200):
        if metric == HAMMING:
            a, b, c = rng.integers(0, 256, (3, 32), dtype=np.uint8)
        else:
            a, b, c = rng.random((3, 16), dtype=np.float32)
        ab, ba = _dist(a, b, metric), _dist(b, a, metric)
        assert ab == ba
        assert _dist(a, c, metric) <= ab + _dist(b, c, metric) + 1e-6


def _table_sets(rng, kind):
    sets = []
    for n in (5, 0, 3, 7, 1):
        if kind == BINARY:
            sets.append(binary_set(rng.integers(0, 4, (n, 2), dtype=np.uint8)))
        else:
            sets.append(float_set(rng.integers(0, 3, (n, 3)).astype(np.float32)))
    return sets


@pytest.mark.parametrize("kind,metric", [(BINARY, HAMMING), (FLOAT, L2)])
@pytest.mark.parametrize("strategy", [BRUTE_FORCE, KDTREE])
def test_match_table_equals_direct_matching(rng, kind, metric, strategy):
    sets = _table_sets(rng, kind)
    cfg = MatcherConfig(strategy=strategy, metric=metric)
    table = MatchTable(sets, cfg)
    for _ in range(20):
        allowed = rng.random(len(sets)) < 0.6
        for v in range(len(sets)):
            allowed_v = allowed.copy()
            allowed_v[v] = False
            m1, m2, nearest = table.top2(v, allowed_v)
            train_ids = [u for u in range(len(sets)) if allowed_v[u]]
            rows = [sets[u].data for u in train_ids]
            if not len(sets[v]):
                continue
            views = np.concatenate([[u] * len(sets[u]) for u in train_ids] or [[]]).astype(int)
            if len(views) < 2:
                assert np.all(~np.isfinite(m2))
                continue
            idx = DescriptorIndex(np.concatenate(rows), MatcherConfig(metric=metric), views=views)
            nb = idx.knn2(sets[v].data)
            np.testing.assert_array_equal(m1, nb.dist[:, 0])
            np.testing.assert_array_equal(m2, nb.dist[:, 1])
            np.testing.assert_array_equal(nearest, nb.views[:, 0])
