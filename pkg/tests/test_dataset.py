import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ilora.dataset import Dataset, generate_dataset, sample_seed, split_sizes
from ilora.intrinsics import IntrinsicKind
from ilora.ntf import read_ntf


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_split_sizes():
    assert split_sizes(250) == {"train": 200, "val": 25, "test": 25}
    assert split_sizes(100) == {"train": 80, "val": 10, "test": 10}
    assert split_sizes(95) == {"train": 77, "val": 9, "test": 9}


def test_minimum_size_enforced(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(5, seed=0, resolution=32, out_dir=tmp_path)


def test_sample_seed_namespacing():
    assert sample_seed(0, 1) != sample_seed(1, 0)
    assert sample_seed(3, 7) == sample_seed(3, 7)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "d"
    manifest = generate_dataset(20, seed=11, resolution=32, out_dir=root)
    return root, manifest


def test_layout_and_manifest(small_dataset):
    root, manifest = small_dataset
    d = json.loads((root / "manifest.json").read_text())
    assert d == manifest.to_dict()
    assert set(d) == {
        "version",
        "n_samples",
        "resolution",
        "seed",
        "splits",
        "depth_min",
        "depth_max",
        "shading_max",
    }
    files = sorted(p.name for p in (root / "samples").iterdir())
    assert f"{0:06d}.rgb.ntf" in files
    for suffix in ("rgb.ntf", "normal.ntf", "depth.ntf", "albedo.ntf", "shading.ntf", "mask.ntf", "spec.json"):
        assert sum(f.endswith(suffix) for f in files) == 20


def test_depth_bounds_are_exact_empirical(small_dataset):
    root, manifest = small_dataset
    lo, hi = np.inf, -np.inf
    for i in range(20):
        d = read_ntf(root / "samples" / f"{i:06d}.depth.ntf")
        lo, hi = min(lo, float(d.min())), max(hi, float(d.max()))
    assert manifest.depth_min == lo
    assert manifest.depth_max == hi
    assert lo > 0


def test_regeneration_is_byte_identical(small_dataset, tmp_path):
    root, _ = small_dataset
    again = tmp_path / "again"
    generate_dataset(20, seed=11, resolution=32, out_dir=again)
    assert tree_digest(root) == tree_digest(again)


def test_different_seed_changes_bytes(small_dataset, tmp_path):
    root, _ = small_dataset
    other = tmp_path / "other"
    generate_dataset(20, seed=12, resolution=32, out_dir=other)
    assert tree_digest(root) != tree_digest(other)


def test_split_indices_partition(small_dataset):
    root, _ = small_dataset
    ds = Dataset(root)
    train, val, test = (ds.split_indices(s) for s in ("train", "val", "test"))
    assert train + val + test == list(range(20))
    assert len(train) == 16 and len(val) == 2 and len(test) == 2
    with pytest.raises(ValueError):
        ds.split_indices("dev")


def test_loaded_sample_consistency(small_dataset):
    root, _ = small_dataset
    ds = Dataset(root)
    s = ds.load(0)
    s.normal.validate()
    s.depth.validate()
    s.albedo.validate()
    s.shading.validate()
    rgb01 = (s.rgb.data.astype(np.float64) + 1) / 2
    product = s.albedo.data.astype(np.float64) * s.shading.data.astype(np.float64)
    assert np.abs(rgb01 - np.clip(product, 0, 1)).max() < 1e-5
    assert np.array_equal(ds.load_rgb(0), s.rgb.data)
    for kind in IntrinsicKind:
        assert np.array_equal(ds.load_intrinsic(0, kind).data, s.intrinsic(kind).data)
