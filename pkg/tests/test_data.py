import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from statecnn import data
from statecnn.data import AffineParams, AugmentConfig, Preprocess
from statecnn.errors import IngestionError, InputError, PartitionError
from statecnn.synthetic import write_tree


def tiny_dataset(counts, side=2):
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    images = np.zeros((len(labels), side, side, 3), dtype=np.float32)
    return data.in_memory([f"c{k}" for k in range(len(counts))], images, labels)


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("tree")
    write_tree(root, num_classes=7, per_class=5, side=16)
    return root


def test_scan_sorted_and_stable(tree):
    a, b = data.scan_directory(tree), data.scan_directory(tree)
    assert len(a.classes) == 7
    assert a.classes == sorted(a.classes)
    assert [s.source_path for s in a.samples] == [s.source_path for s in b.samples]
    assert a.class_counts() == [5] * 7


def test_scan_errors_and_skips(tmp_path):
    with pytest.raises(IngestionError):
        data.scan_directory(tmp_path)
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "junk.png").write_bytes(b"not an image")
    with pytest.raises(IngestionError):
        data.scan_directory(tmp_path)
    Image.new("RGB", (3, 3)).save(tmp_path / "a" / "ok.png")
    ds = data.scan_directory(tmp_path)
    assert len(ds) == 1 and ds.skipped == 1


def test_partition_exact_counts():
    tr, va = data.partition(tiny_dataset([10]), 0.8, seed=0)
    assert (len(tr), len(va)) == (8, 2)
    counts = [740] * 4 + [739] * 3
    tr, va = data.partition(tiny_dataset(counts), 0.8, seed=0)
    assert (len(tr), len(va)) == (4141, 1036)


def test_partition_deterministic_and_disjoint():
    d = tiny_dataset([13, 7, 22])
    a = data.partition(d, 0.8, seed=5)
    b = data.partition(d, 0.8, seed=5)
    assert [s.source_path for s in a[0].samples] == [s.source_path for s in b[0].samples]
    tr = {s.source_path for s in a[0].samples}
    va = {s.source_path for s in a[1].samples}
    assert not tr & va
    assert tr | va == {s.source_path for s in d.samples}
    c = data.partition(d, 0.8, seed=6)
    assert {s.source_path for s in c[0].samples} != tr


@settings(max_examples=100)
@given(st.lists(st.integers(2, 60), min_size=1, max_size=8), st.integers(0, 2**31))
def test_partition_is_stratified(counts, seed):
    tr, va = data.partition(tiny_dataset(counts), 0.8, seed)
    for n, a, b in zip(counts, tr.class_counts(), va.class_counts()):
        assert a + b == n
        assert a == int(np.floor(0.8 * n + 1e-9))
        assert abs(a - 4 * b) <= 5  # within one sample of 4:1


def test_partition_rejects_singletons():
    with pytest.raises(PartitionError):
        data.partition(tiny_dataset([5, 1]))


def test_resize_noop_and_default():
    img = np.random.default_rng(0).uniform(0, 255, size=(363, 363, 3)).astype(np.float32)
    assert data.resize(img).tobytes() == img.tobytes()
    assert data.resize(np.zeros((10, 20, 3))).shape == (363, 363, 3)


def bilinear_oracle(img, side):
    h, w = img.shape[:2]
    out = np.zeros((side, side) + img.shape[2:])
    for i in range(side):
        for j in range(side):
            y = min(max((i + 0.5) * h / side - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / side - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_resize_checkerboard():
    board = np.array([[0.0, 255.0], [255.0, 0.0]])[:, :, None].repeat(3, axis=2)
    out = data.resize(board, 4)
    assert out[0, 0, 0] == 0 and out[0, 3, 0] == 255 and out[3, 0, 0] == 255 and out[3, 3, 0] == 0
    # hand-evaluated interior values: weights 0.25 and 0.75 along each axis
    assert out[1, 1, 0] == pytest.approx(255 * (0.25 * 0.75 * 2))
    npt.assert_allclose(out, bilinear_oracle(board, 4), atol=1e-9)


@pytest.mark.parametrize("shape,side", [((5, 7, 3), 11), ((9, 4, 3), 3), ((1, 1, 3), 4)])
def test_resize_vs_oracle(shape, side):
    img = np.random.default_rng(1).uniform(0, 255, size=shape)
    npt.assert_allclose(data.resize(img, side), bilinear_oracle(img, side), atol=1e-9)


def test_rescale():
    v = data.rescale(np.array([0.0, 128.0, 255.0]))
    assert v[0] == 0.0 and v[2] == pytest.approx(1.0, abs=1e-7)
    assert v[1] == pytest.approx(128 / 255, abs=1e-7)


def test_standardize():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(4, 8, 8, 3))
    s = data.standardize(x)
    for img in s:
        assert abs(img.mean()) <= 1e-6 and abs(img.std() - 1) <= 1e-4
    assert np.abs(data.standardize(s) - s).max() <= 1e-6
    const = np.full((5, 5, 3), 0.3)
    npt.assert_array_equal(data.standardize(const), const)


def test_augment_identity_when_disabled():
    img = np.random.default_rng(0).uniform(size=(12, 12, 3)).astype(np.float32)
    out = data.augment(img, AugmentConfig.disabled(), np.random.default_rng(0))
    npt.assert_array_equal(out, img)


def test_full_turn_on_symmetric_cross():
    img = np.zeros((9, 9, 3), dtype=np.float32)
    img[4, :] = img[:, 4] = 1.0
    zero = data.apply_affine(img, AffineParams(angle_deg=0.0))
    full = data.apply_affine(img, AffineParams(angle_deg=360.0))
    npt.assert_array_equal(full, zero)
    quarter = data.apply_affine(img, AffineParams(angle_deg=90.0))
    npt.assert_allclose(quarter, img, atol=1e-6)


def test_horizontal_flip_mirrors_columns():
    img = np.random.default_rng(2).uniform(size=(6, 6, 3))
    npt.assert_allclose(data.apply_affine(img, AffineParams(flip=True)), img[:, ::-1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_preserves_shape(seed):
    img = np.random.default_rng(seed).uniform(size=(16, 16, 3)).astype(np.float32)
    out = data.augment(img, AugmentConfig(), np.random.default_rng(seed))
    assert out.shape == img.shape and out.dtype == img.dtype
    assert out.min() >= img.min() - 1e-6 and out.max() <= img.max() + 1e-6


def test_batch_stream_is_deterministic(tree):
    ds = data.scan_directory(tree)
    kw = dict(batch_size=8, shuffle_seed=3, epoch=2, preprocess=Preprocess(24), augment_cfg=AugmentConfig(seed=4))
    a = list(data.batches(ds, **kw))
    b = list(data.batches(ds, **kw))
    assert len(a) == 5
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        npt.assert_array_equal(x.indices, y.indices)
    other = list(data.batches(ds, **{**kw, "epoch": 3}))
    assert other[0].images.tobytes() != a[0].images.tobytes()


def test_batch_counts():
    assert data.num_batches(3882, 32) == 122
    ds = tiny_dataset([3882])
    sizes = [len(b.indices) for b in data.batches(ds, 32, preprocess=Preprocess(2))]
    assert len(sizes) == 122 and sizes[:-1] == [32] * 121 and sizes[-1] == 10


def test_batch_labels_follow_samples():
    ds = tiny_dataset([3, 4, 2])
    seen = []
    for b in data.batches(ds, 4, shuffle_seed=1, preprocess=Preprocess(2)):
        npt.assert_array_equal(b.labels, ds.labels[b.indices])
        seen.extend(b.indices.tolist())
    assert sorted(seen) == list(range(9))


def test_one_hot():
    npt.assert_array_equal(data.one_hot([3], 7)[0], [0, 0, 0, 1, 0, 0, 0])
    oh = data.one_hot(np.arange(7).repeat(3), 7)
    assert np.all(oh.sum(1) == 1) and set(np.unique(oh)) == {0, 1}


def test_manifest_round_trip(tree, tmp_path):
    ds = data.scan_directory(tree)
    tr, va = data.partition(ds, 0.8, 1)
    path = tmp_path / "split.json"
    data.write_manifest(path, tr, va, 1, 0.8)
    doc = json.loads(path.read_text())
    assert doc["classes"] == ds.classes
    assert all(not p.startswith("/") for p in doc["splits"]["train"])
    tr2, va2 = data.read_manifest(path)
    assert [s.source_path for s in tr2.samples] == [s.source_path for s in tr.samples]
    assert [s.label for s in va2.samples] == [s.label for s in va.samples]
    with pytest.raises(InputError):
        data.read_manifest(tmp_path / "missing.json")


def test_batches_reject_empty():
    with pytest.raises(InputError):
        next(data.batches(data.Dataset(["a"], []), 4))
