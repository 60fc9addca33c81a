import json
import struct

import numpy as np
import pytest

from helpers import tiny_classifier
from statecnn import checkpoint
from statecnn.errors import CheckpointError, ShapeError
from statecnn.model import TinyBackbone, build, set_trainable, summarize


@pytest.fixture
def model():
    m = tiny_classifier(["a", "b", "c"], units=3, channels=4, side=32)
    rng = np.random.default_rng(0)
    for p in m.params:
        v = rng.normal(size=p.value.shape)
        p.value = (np.abs(v) + 0.1 if p.name.endswith("moving_variance") else v).astype(np.float32)
    set_trainable(m, 2)
    return m


def test_round_trip_is_bit_exact(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt", epoch=3, stage=1, metrics={"val_loss": 0.5})
    fresh = tiny_classifier(["a", "b", "c"], units=3, channels=4, side=32, seed=9)
    checkpoint.load(path, fresh)
    for a, b in zip(model.params, fresh.params):
        assert a.name == b.name and a.value.tobytes() == b.value.tobytes()
        assert a.trainable == b.trainable
    assert summarize(fresh).totals == summarize(model).totals


def test_file_layout(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt", epoch=1, stage=2)
    raw = path.read_bytes()
    magic, version, mlen = struct.unpack_from("<8sIQ", raw)
    assert magic == b"SCNNCKPT" and version == 1
    manifest = json.loads(raw[20:20 + mlen])
    assert manifest["epoch"] == 1 and manifest["stage"] == 2
    nbytes = sum(int(np.prod(e["shape"])) * 4 for e in manifest["tensors"])
    assert len(raw) == 20 + mlen + nbytes
    first = manifest["tensors"][0]
    np.testing.assert_array_equal(
        np.frombuffer(raw[20 + mlen:20 + mlen + first["nbytes"]], "<f4"), model.params[0].value.ravel())


def test_load_model_rebuilds_from_manifest(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    loaded, manifest = checkpoint.load_model(path)
    assert loaded.classes == ["a", "b", "c"]
    x = np.random.default_rng(1).uniform(size=(2, 32, 32, 3)).astype(np.float32)
    assert loaded.forward(x).tobytes() == model.forward(x).tobytes()


def test_saving_is_deterministic(model, tmp_path):
    a = checkpoint.save(model, tmp_path / "a.ckpt", epoch=1, stage=1, metrics={"x": 1.0})
    b = checkpoint.save(model, tmp_path / "b.ckpt", epoch=1, stage=1, metrics={"x": 1.0})
    assert a.read_bytes() == b.read_bytes()


def test_truncated_payload_leaves_template_untouched(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-4])
    fresh = tiny_classifier(["a", "b", "c"], units=3, channels=4, side=32, seed=9)
    before = [p.value.tobytes() for p in fresh.params]
    with pytest.raises(CheckpointError):
        checkpoint.load(path, fresh)
    assert [p.value.tobytes() for p in fresh.params] == before


@pytest.mark.parametrize("damage", [b"NOTACKPT", b"SCNNCKPT\x02\x00\x00\x00"])
def test_bad_header(model, tmp_path, damage):
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    path.write_bytes(damage + raw[len(damage):])
    with pytest.raises(CheckpointError):
        checkpoint.read(path)


def test_mismatched_class_count_names_layer(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    other = tiny_classifier(["a", "b", "c", "d"], units=3, channels=4, side=32)
    before = [p.value.tobytes() for p in other.params]
    with pytest.raises(ShapeError, match="dense_2"):
        checkpoint.load(path, other)
    assert [p.value.tobytes() for p in other.params] == before


def test_mismatched_architecture(model, tmp_path):
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        checkpoint.load(path, build(3, input_side=363))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.read(tmp_path / "nope.ckpt")


def test_batchnorm_settings_survive_round_trip(tmp_path):
    m = build(3, TinyBackbone(units=2, channels=4, downsample=1),
              input_side=32, bn_momentum=0.9, bn_epsilon=1e-4)
    loaded, _ = checkpoint.load_model(checkpoint.save(m, tmp_path / "m.ckpt"))
    bns = [layer for layer in loaded.head.layers if layer.kind == "batchnorm"]
    assert bns and all(b.momentum == 0.9 and b.epsilon == 1e-4 for b in bns)
