import itertools
import time

import numpy as np
import pytest

from typorec.eval import F1Matrix, best_overall, best_per_instance, f1_matrix
from typorec.expert import (
    MAP,
    POOL,
    HierarchicalModel,
    Typologies,
    best_per_typology,
    build_hierarchical,
    choose_k,
    flat_predict_table,
    hierarchical_predict_table,
    hierarchical_recognize,
    kmeans,
    plan_expert,
    silhouette,
    train_expert,
)
from typorec.imgproc import GrayImage
from typorec.match import MatchTable
from typorec.pipeline import FeatureCache, PipelineRegistry, default_registry, recognize


def fm(values, pipelines=None):
    values = np.asarray(values, dtype=np.float64)
    labels = tuple(f"y{i}" for i in range(values.shape[0]))
    pipelines = pipelines or tuple(f"P{j}" for j in range(values.shape[1]))
    return F1Matrix(labels, pipelines, values)


def inertia_of(X, labels):
    return sum(((X[labels == c] - X[labels == c].mean(axis=0)) ** 2).sum() for c in np.unique(labels))


# ---------------------------------------------------------------- k-means


def test_kmeans_single_cluster():
    m = fm([[0.1, 0.9], [0.5, 0.5], [0.3, 0.2]])
    t = kmeans(m, 1)
    assert set(t.assignment.values()) == {0}
    assert np.allclose(t.centroids[0], m.column_means())


def test_kmeans_two_groups_matches_exhaustive_oracle(rng):
    for _ in range(10):
        n = int(rng.integers(3, 9))
        split = int(rng.integers(1, n))
        X = np.vstack([np.tile([0.9, 0.1], (split, 1)), np.tile([0.1, 0.9], (n - split, 1))])
        X += rng.normal(0, 0.02, X.shape)
        t = kmeans(fm(X), 2, seed=int(rng.integers(100)))
        got = np.array([t.assignment[f"y{i}"] for i in range(n)])
        best = min(
            (inertia_of(X, np.array(a)), a)
            for a in itertools.product((0, 1), repeat=n) if 0 < sum(a) < n
        )
        assert t.inertia == pytest.approx(best[0])
        assert len(set(got[:split])) == 1 and len(set(got[split:])) == 1 and got[0] != got[-1]


def test_kmeans_singletons():
    m = fm([[0.1, 0.2], [0.4, 0.8], [0.9, 0.3], [0.0, 1.0]])
    t = kmeans(m, 4)
    assert sorted(t.assignment.values()) == [0, 1, 2, 3] and t.inertia == 0


def test_kmeans_monotone_and_errors(rng):
    m = fm(rng.random((12, 4)))
    history = []
    kmeans(m, 3, seed=1, history=history)
    assert history
    with pytest.raises(ValueError):
        kmeans(m, 0)
    with pytest.raises(ValueError):
        kmeans(m, 13)


def test_kmeans_repairs_empty_clusters():
    # duplicate rows make k-means++ pick identical centres
    m = fm([[0.5, 0.5]] * 4 + [[0.6, 0.4]])
    t = kmeans(m, 3, seed=0)
    assert sorted(set(t.assignment.values())) == [0, 1, 2]


def test_kmeans_seeded_determinism(rng):
    m = fm(rng.random((9, 5)))
    assert kmeans(m, 3, seed=4).to_dict() == kmeans(m, 3, seed=4).to_dict()


def test_silhouette_direct_formula():
    X = np.array([[0.0], [1.0], [10.0], [12.0]])
    labels = np.array([0, 0, 1, 1])
    a = [1, 1, 2, 2]
    b = [11, 10, 9.5, 11.5]
    expect = np.mean([(bb - aa) / max(aa, bb) for aa, bb in zip(a, b)])
    assert silhouette(X, labels) == pytest.approx(expect)


def test_choose_k_cases():
    m = fm([[0.9, 0.1], [0.88, 0.12], [0.91, 0.1], [0.1, 0.9], [0.12, 0.88]])
    assert choose_k(m) == 2
    assert choose_k(fm([[0.1, 0.2], [0.3, 0.4]])) == 1
    with pytest.warns(RuntimeWarning):
        assert choose_k(fm([[0.5, 0.5]] * 4)) == 2


# ----------------------------------------------------------- reductions


def test_best_per_typology_hand_example():
    m = fm([[1.0, 0.0], [0.0, 0.5]])
    t = Typologies(1, {"y0": 0, "y1": 0}, np.zeros((1, 2)), 0.0)
    assert best_per_typology(m, t) == {0: "P0"}


def test_reductions_on_random_matrices():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, p = int(rng.integers(2, 8)), int(rng.integers(2, 6))
        vals = np.round(rng.random((n, p)), 1)  # coarse grid forces ties
        m = fm(vals)
        single = Typologies(1, {l: 0 for l in m.labels}, np.zeros((1, p)), 0.0)
        assert best_per_typology(m, single)[0] == best_overall(m)
        singletons = Typologies(n, {l: i for i, l in enumerate(m.labels)}, np.zeros((n, p)), 0.0)
        per = best_per_typology(m, singletons)
        assert {l: per[i] for i, l in enumerate(m.labels)} == best_per_instance(m)


def test_scaling_invariance():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = fm(rng.random((7, 4)))
        for c in (0.5, 3.0):
            a, b = plan_expert(m, 3, seed=2), plan_expert(m.scaled(c), 3, seed=2)
            assert a.typologies.assignment == b.typologies.assignment
            assert a.psi_star_star == b.psi_star_star and a.psi_star_t == b.psi_star_t
            assert best_per_instance(m) == best_per_instance(m.scaled(c))


# ------------------------------------------------------ hierarchical model


@pytest.fixture(scope="module")
def registry():
    return PipelineRegistry(list(default_registry(60))[:3])


@pytest.fixture(scope="module")
def trained(small_dataset, registry):
    cache = FeatureCache()
    return train_expert(registry, small_dataset, k=2, seed=0, cache=cache), cache


def test_stage_models_hold_their_typology(trained, small_dataset):
    model, _ = trained
    assert model.stage1.label_set == ["T0", "T1"]
    reach = set()
    for c, m in model.stage2.items():
        assert set(m.labels) == set(model.typologies.members(c))
        reach |= set(m.labels)
    assert reach == set(small_dataset.instances)


def test_save_load_round_trip(trained, tmp_path):
    model, _ = trained
    model.save(tmp_path / "m")
    again = HierarchicalModel.load(tmp_path / "m")
    assert again.digest() == model.digest()
    assert again.manifest() == model.manifest()


def test_retrain_same_hash(trained, small_dataset, registry):
    model, _ = trained
    assert train_expert(registry, small_dataset, k=2, seed=0).digest() == model.digest()


def test_constant_view_falls_back(trained):
    model, _ = trained
    res = hierarchical_recognize(model, GrayImage(np.full((128, 128), 235, dtype=np.uint8)))
    assert res.fallback and res.typology is None and res.label == "<unknown>"


def _table_setup(dataset, registry, cache):
    views = dataset.items()
    labels = [v.label for v in views]
    tables = {s.id: MatchTable([cache.get(v.key, s, v.load) for v in views], s.matcher) for s in registry}
    return views, labels, tables


@pytest.mark.parametrize("mode", [POOL, MAP])
def test_table_path_equals_real_models(small_dataset, registry, mode):
    cache = FeatureCache()
    views, labels, tables = _table_setup(small_dataset, registry, cache)
    train = [i for i, v in enumerate(views) if int(v.path.stem) < 4]
    test = [i for i in range(len(views)) if i not in train]
    m = f1_matrix(registry, [views[i] for i in train], cache)
    plan = plan_expert(m, 2)
    model = build_hierarchical(plan, registry, [views[i] for i in train], cache, mode)
    preds, typs, flags = hierarchical_predict_table(plan, tables, labels, np.array(train), test, mode)
    for q, p, t, f in zip(test, preds, typs, flags):
        res = hierarchical_recognize(model, views[q].load())
        assert (res.label, res.typology, res.fallback) == (p, t, f)
    flat = flat_predict_table(tables[plan.psi_star_star], labels, np.array(train), test)
    real = [recognize(model.stage1.relabel(model.instance_labels), views[q].load()).label for q in test]
    assert flat == real


@pytest.mark.slow
def test_collapse_k1(collapse_dataset):
    t0 = time.perf_counter()
    reg = default_registry(60)
    cache = FeatureCache()
    model = train_expert(reg, collapse_dataset, k=1, seed=0, cache=cache)
    assert model.typologies.k == 1
    assert model.psi_star_t[0] == model.psi_star_star
    flat = model.stage1.relabel(model.instance_labels)
    for v in collapse_dataset.items():
        img = v.load()
        assert hierarchical_recognize(model, img).label == recognize(flat, img).label
    assert time.perf_counter() - t0 < 120
