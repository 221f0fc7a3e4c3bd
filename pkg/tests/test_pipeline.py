import numpy as np
import pytest

from typorec import data, features as F
from typorec.imgproc import GrayImage
from typorec.match import HAMMING, KDTREE, L2, UNKNOWN, MatcherConfig
from typorec.pipeline import (
    ContainerError,
    FeatureCache,
    ModelBuildError,
    PipelineRegistry,
    PipelineSpec,
    build_model,
    default_registry,
    deserialize_model,
    model_from_features,
    recognize,
    serialize_model,
)


def train_views(ds, limit=4):
    out = []
    for lbl in ds.instances:
        out += [(data.View(lbl, p).load(), lbl) for p in ds.views[lbl][:limit]]
    return out


def test_default_registry():
    reg = default_registry()
    assert reg.ids == ["P0", "P1", "P2", "P3", "P4", "P5"]
    assert reg.get("P5").matcher.strategy == KDTREE
    assert reg.get("P3").detector == F.NoDetector()
    assert PipelineRegistry.from_dict(reg.to_dict()) == reg
    assert reg.digest() == default_registry().digest() != default_registry(100).digest()
    with pytest.raises(KeyError):
        reg.get("P9")


def test_registry_invariants():
    p = default_registry()[0]
    with pytest.raises(ValueError):
        PipelineRegistry([p])
    with pytest.raises(ValueError):
        PipelineRegistry([p, p])
    with pytest.raises(ValueError):
        PipelineSpec("x", F.NoDetector(), F.BriefConfig(), MatcherConfig(metric=HAMMING))
    with pytest.raises(ValueError):
        PipelineSpec("x", F.FastConfig(), F.BriefConfig(), MatcherConfig(metric=L2))


def test_feature_cache_shares_extraction(small_dataset):
    reg = default_registry(100)
    cache = FeatureCache()
    v = small_dataset.items()[0]
    a = cache.get(v.key, reg.get("P0"), v.load)
    b = cache.get(v.key, reg.get("P5"), v.load)  # same features, different matcher
    assert a is b and cache.misses == 1 and cache.hits == 1


@pytest.mark.parametrize("pid", ["P0", "P1", "P2", "P3", "P4", "P5"])
def test_container_round_trip(small_dataset, pid):
    spec = default_registry(60).get(pid)
    model = build_model(spec, train_views(small_dataset, 3))
    blob = serialize_model(model)
    again = deserialize_model(blob)
    assert serialize_model(again) == blob
    assert again.labels == model.labels and again.spec == spec
    for a, b in zip(model.descriptors, again.descriptors):
        assert np.array_equal(a.data, b.data) and a.keypoints == b.keypoints


def test_container_rejects_corruption(small_dataset):
    model = build_model(default_registry(40).get("P1"), train_views(small_dataset, 2))
    blob = serialize_model(model)
    with pytest.raises(ContainerError):
        deserialize_model(b"XXXX" + blob[4:])
    with pytest.raises(ContainerError):
        deserialize_model(blob + b"\0")
    with pytest.raises(ContainerError):
        deserialize_model(blob[:4] + b"\x09\x00" + blob[6:])


def test_model_bytes_deterministic(small_dataset):
    spec = default_registry(80).get("P2")
    views = train_views(small_dataset, 3)
    assert build_model(spec, views).digest() == build_model(spec, views).digest()


def test_recognize_smoke(small_dataset):
    spec = default_registry(100).get("P0")
    model = build_model(spec, train_views(small_dataset, 4))
    lbl = small_dataset.instances[0]
    probe = data.View(lbl, small_dataset.views[lbl][5]).load()
    res = recognize(model, probe)
    assert res.label == lbl and res.elapsed > 0
    flat = recognize(model, GrayImage(np.full((128, 128), 200, dtype=np.uint8)))
    assert flat.label == UNKNOWN and flat.tally.total_good == 0


def test_build_errors(small_dataset):
    spec = default_registry(50).get("P1")
    views = train_views(small_dataset, 1)
    with pytest.raises(ModelBuildError):
        build_model(spec, views[:1])
    blank = GrayImage(np.full((128, 128), 200, dtype=np.uint8))
    with pytest.raises(ModelBuildError):
        build_model(spec, [(blank, "a"), (blank, "b")])
    empty = F.DescriptorSet.empty(F.BINARY, 256)
    with pytest.raises(ValueError):
        model_from_features(spec, ["a"], [empty, empty])


def test_kdtree_pipeline_matches_brute_force(small_dataset):
    reg = default_registry(80)
    views = train_views(small_dataset, 3)
    brute, tree = build_model(reg.get("P0"), views), build_model(reg.get("P5"), views)
    for lbl in small_dataset.instances:
        img = data.View(lbl, small_dataset.views[lbl][4]).load()
        a, b = recognize(brute, img), recognize(tree, img)
        assert a.tally == b.tally
