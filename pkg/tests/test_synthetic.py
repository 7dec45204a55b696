import json

import numpy as np
import pytest

from satd.errors import ConfigurationError
from satd.synthetic import band_function, gen_synthetic, load_dataset, mosaic


def test_same_seed_gives_byte_identical_directories(tmp_path):
    gen_synthetic(16, 5, 16, 16, seed=3, out_dir=tmp_path / "a")
    gen_synthetic(16, 5, 16, 16, seed=3, out_dir=tmp_path / "b")
    for name in ("images.stf", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = gen_synthetic(16, 5, 16, 16, seed=4)
    assert not np.array_equal(other.images, load_dataset(tmp_path / "a").images)


def test_ms_bands_are_functions_of_rgb():
    ds = gen_synthetic(8, 6, 12, 12, seed=0)
    for img in ds.images:
        for b in range(3, 6):
            assert np.max(np.abs(img[b] - band_function(b, img[:3]))) <= 1e-12


def test_empty_dataset_has_valid_manifest(tmp_path):
    ds = gen_synthetic(0, out_dir=tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["n"] == 0 and m["items"] == [] and ds.images.shape == (0, 6, 64, 64)


def test_splits_and_captions():
    ds = gen_synthetic(256, 4, 8, 8, seed=0)
    ev = ds.split_indices("eval")
    assert len(ev) == 64 and len(ds.split_indices("train")) == 192
    caps = [ds.items[i]["captions"][-1] for i in ev]
    assert len(set(caps)) == 64
    assert ds.items[0]["captions"][0] == "a satellite image of forest"


def test_invalid_arguments():
    with pytest.raises(ConfigurationError):
        gen_synthetic(4, c_ms=3)
    with pytest.raises(ConfigurationError):
        gen_synthetic(4, n_classes=1)


def test_mosaic_quadrant_labels():
    ds = gen_synthetic(4, 4, 8, 8, seed=0)
    img, lab = mosaic(ds, [0, 1, 2, 3], np.random.default_rng(0))
    assert img.shape == (4, 8, 8)
    assert lab[0, 0] == ds.items[0]["label"] and lab[7, 7] == ds.items[3]["label"]
