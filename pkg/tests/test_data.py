import logging

import numpy as np
import pytest

from typorec import data
from typorec.imgproc import GrayImage, load_image, save_pgm


def test_generate_deterministic(tmp_path):
    spec = data.SynthSpec(n_instances=3, views_per_instance=4, image_size=64, seed=3)
    a = data.generate(spec, tmp_path / "a")
    b = data.generate(spec, tmp_path / "b")
    assert a.content_hash == b.content_hash
    c = data.generate(data.SynthSpec(n_instances=3, views_per_instance=4, image_size=64, seed=4), tmp_path / "c")
    assert c.content_hash != a.content_hash
    assert data.SynthSpec.from_dict(spec.to_dict()) == spec


def test_generate_counts(small_dataset):
    assert small_dataset.instances == ("part00", "part01", "part02")
    assert small_dataset.view_counts() == {"part00": 6, "part01": 6, "part02": 6}
    img = small_dataset.items()[0].load()
    assert img.shape == (128, 128)


def test_subset_counts_and_prefix(tmp_path):
    ds = data.generate(data.SynthSpec(n_instances=4, views_per_instance=12, image_size=48, seed=1), tmp_path)
    sub = data.subset(ds, data.SubsetSpec(p=3, t=10))
    assert len(sub) == 30 and sub.instances == ds.instances[:3]
    small = data.subset(ds, data.SubsetSpec(p=3, t=5))
    for lbl in small.instances:
        assert set(small.views[lbl]) <= set(sub.views[lbl])
        assert list(sub.views[lbl]) == sorted(sub.views[lbl])
    other = data.subset(ds, data.SubsetSpec(p=3, t=5, seed=9))
    assert other.content_hash != small.content_hash
    for bad in (data.SubsetSpec(1, 5), data.SubsetSpec(5, 5), data.SubsetSpec(3, 1), data.SubsetSpec(3, 13)):
        with pytest.raises(data.DatasetError):
            data.subset(ds, bad)


def test_load_layout(tmp_path, caplog):
    img = GrayImage(np.zeros((8, 8), dtype=np.uint8))
    for lbl in ("b", "a"):
        (tmp_path / lbl).mkdir()
        save_pgm(img, tmp_path / lbl / "0.pgm")
    (tmp_path / "a" / "notes.txt").write_text("x")
    save_pgm(img, tmp_path / "stray.pgm")
    with caplog.at_level(logging.WARNING):
        ds = data.load(tmp_path)
    assert ds.instances == ("a", "b")
    assert "stray.pgm" in caplog.text


def test_load_errors(tmp_path):
    with pytest.raises(data.DatasetError):
        data.load(tmp_path / "nope")
    with pytest.raises(data.DatasetError):
        data.load(tmp_path)
    (tmp_path / "empty").mkdir()
    with pytest.raises(data.DatasetError):
        data.load(tmp_path)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        data.SynthSpec(n_instances=2, families=("TEXTURED",))
    with pytest.raises(ValueError):
        data.SynthSpec(families=("BLOB",) * 7)
    with pytest.raises(ValueError):
        data.SynthSpec(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        data.SynthSpec(image_size=16)


def test_engineered_spec_mixes_families():
    spec = data.engineered_spec()
    assert spec.n_instances == 7 and spec.views_per_instance == 50 and spec.seed == 2024
    assert set(spec.families[:2]) == {data.TEXTURED, data.SHAPE}
    assert data.MIXED in spec.families


def test_views_vary_with_pose(small_dataset):
    lbl = small_dataset.instances[0]
    a, b = (load_image(p).data for p in small_dataset.views[lbl][:2])
    assert not np.array_equal(a, b)
