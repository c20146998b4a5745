import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from satkit.data import (Annotation, Dataset, SaliencyStore, batches, load_dataset,
                         load_saliency, store_saliency)
from satkit.errors import ChecksumError, ConfigError, MissingArtifactError
from satkit.saliency import SaliencyMap


def _toy(n=10, shape=(1, 2, 2)):
    rng = np.random.default_rng(0)
    return Dataset("toy", [f"s{i}" for i in range(n)],
                   rng.random((n, *shape)).astype(np.float32),
                   rng.integers(0, 3, n).astype(np.int64), 3)


def test_synthetic_blobs_subset_has_boxes():
    ds = load_dataset("synthetic_blobs", classes=2, per_class=100, seed=7)
    assert len(ds) == 200
    assert set(ds.labels.tolist()) == {0, 1}
    assert ds.annotations is not None and len(ds.annotations) == 200
    assert all(a.kind == "bounding_box" for a in ds.annotations.values())
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_digits_deterministic():
    a = load_dataset("digits", seed=0)
    b = load_dataset("digits", seed=0)
    assert a.sample_ids == b.sample_ids
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.shape[1:] == (1, 8, 8)


def test_digits_class_filter_remaps_labels():
    ds = load_dataset("digits", classes=[0, 1], per_class=50, seed=0)
    assert len(ds) == 100
    assert set(ds.labels.tolist()) == {0, 1}
    assert ds.num_classes == 2
    ds = load_dataset("digits", subset=([7, 3], 20), seed=0)
    # relabelled in the order given: 7 -> 0, 3 -> 1
    assert ds.num_classes == 2 and np.bincount(ds.labels).tolist() == [20, 20]


def test_train_and_test_splits_disjoint():
    tr = load_dataset("digits")
    te = load_dataset("digits", split="test")
    assert not set(tr.sample_ids) & set(te.sample_ids)


def test_load_errors():
    with pytest.raises(ConfigError):
        load_dataset("cifar-1000")
    with pytest.raises(ConfigError):
        load_dataset("digits", classes=[0], per_class=10_000)


def test_batch_sizes():
    ds = _toy(10)
    sizes = [len(y) for _, y, _ in batches(ds, 4, shuffle_seed=3, epoch=0)]
    assert sizes == [4, 4, 2]


def test_batch_order_is_pure():
    ds = _toy(10)
    a = [ids for *_, ids in batches(ds, 4, 3, 1)]
    b = [ids for *_, ids in batches(ds, 4, 3, 1)]
    c = [ids for *_, ids in batches(ds, 4, 3, 2)]
    assert a == b
    assert a != c


def test_empty_dataset_rejected():
    ds = Dataset("empty", [], np.zeros((0, 1, 2, 2), np.float32), np.zeros(0, np.int64), 2)
    with pytest.raises(ValueError):
        next(batches(ds, 4))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), bs=st.integers(1, 50), seed=st.integers(0, 100), epoch=st.integers(0, 5))
def test_batches_partition_dataset(n, bs, seed, epoch):
    ds = _toy(n)
    seen = [sid for *_, ids in batches(ds, bs, seed, epoch) for sid in ids]
    assert len(seen) == n
    assert sorted(seen) == sorted(ds.sample_ids)


@given(x0=st.integers(0, 15), y0=st.integers(0, 15), w=st.integers(1, 16), h=st.integers(1, 16))
def test_bbox_mask_area(x0, y0, w, h):
    x1, y1 = min(16, x0 + w), min(16, y0 + h)
    if x1 <= x0 or y1 <= y0:
        return
    mask = Annotation("bounding_box", bbox=(x0, y0, x1, y1)).to_mask(16, 16)
    assert mask.sum() == (x1 - x0) * (y1 - y0)


def test_bbox_outside_image():
    with pytest.raises(ValueError):
        Annotation("bounding_box", bbox=(0, 0, 20, 4)).to_mask(16, 16)
    with pytest.raises(ValueError):
        Annotation("bounding_box", bbox=(3, 0, 3, 4))


# --- saliency store ---------------------------------------------------------


def _map(values):
    return SaliencyMap(values, "raw", "gradient", "teacher-0", 1)


def test_store_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    values = rng.standard_normal((3, 4, 4)).astype(np.float32)
    store = SaliencyStore(tmp_path / "s", image_shape=(3, 4, 4), sample_ids=["a", "b"])
    store_saliency(store, "a", _map(values))
    again = SaliencyStore.open(tmp_path / "s")
    got = load_saliency(again, "a")
    assert got.values.tobytes() == values.tobytes()
    assert (got.method, got.teacher_id, got.class_index) == ("gradient", "teacher-0", 1)
    assert again.partial  # "b" never written


def test_store_layout(tmp_path):
    store = SaliencyStore(tmp_path, image_shape=(1, 2, 2))
    store.put("x1", _map(np.arange(4, dtype=np.float32).reshape(1, 2, 2)))
    raw = (tmp_path / "maps" / "x1.f32").read_bytes()
    assert np.frombuffer(raw, "<f4").tolist() == [0, 1, 2, 3]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    entry = manifest["entries"]["x1"]
    assert entry["shape"] == [1, 2, 2] and entry["dtype"] == "<f4" and len(entry["sha256"]) == 64


def test_store_missing_entry(tmp_path):
    store = SaliencyStore(tmp_path)
    with pytest.raises(MissingArtifactError):
        load_saliency(store, "nope")


def test_store_detects_corruption(tmp_path):
    store = SaliencyStore(tmp_path, image_shape=(1, 2, 2))
    store.put("a", _map(np.ones((1, 2, 2), np.float32)))
    path = tmp_path / "maps" / "a.f32"
    buf = bytearray(path.read_bytes())
    buf[5] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(ChecksumError):
        SaliencyStore.open(tmp_path).get("a")


def test_store_shape_mismatch(tmp_path):
    store = SaliencyStore(tmp_path, image_shape=(3, 4, 4))
    with pytest.raises(ValueError):
        store.put("a", _map(np.zeros((1, 4, 4), np.float32)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_store_roundtrip_property(tmp_path_factory, values):
    root = tmp_path_factory.mktemp("prop")
    store = SaliencyStore(root)
    store.put("k", _map(values))
    assert SaliencyStore.open(root).get("k").values.tobytes() == values.tobytes()
