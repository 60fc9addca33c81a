import numpy as np
import numpy.testing as npt
import pytest

from oracles import numeric_grad, rel_error
from statecnn.errors import ConfigError, ShapeError
from statecnn.layers import ParamCount
from statecnn.model import (ShapeOnlyBackbone, TinyBackbone, build, from_config, make_backbone,
                            set_trainable, summarize)
from statecnn.optim import RMSprop, categorical_crossentropy

HEAD_COUNTS = [589856, 128, 0, 0, 18496, 256, 0, 0, 0, 8224, 128, 0, 0, 231, 28, 0]
HEAD_SHAPES = [(10, 10, 32)] * 3 + [(5, 5, 32)] + [(5, 5, 64)] * 3 + [(2, 2, 64), (256,)] + [(32,)] * 4 \
    + [(7,)] * 3


@pytest.fixture(scope="module")
def default_model():
    return build(7)


def tiny_model(units=3, side=16, classes=3, dtype=np.float64, dropout=0.5, seed=0):
    bb = TinyBackbone(units=units, channels=4, downsample=1, seed=seed, dtype=dtype)
    return build(classes, bb, dropout, seed, side, dtype=dtype)


def test_shape_only_features():
    bb = ShapeOnlyBackbone()
    x = np.random.default_rng(0).uniform(size=(2, 363, 363, 3)).astype(np.float32)
    f = bb.forward(x)
    assert f.shape == (2, 10, 10, 2048)
    assert f.tobytes() == bb.forward(x).tobytes()
    assert not np.array_equal(f[0], f[1])
    assert ShapeOnlyBackbone(seed=1).forward(x[:1]).tobytes() != f[:1].tobytes()


def test_head_rows_match_reference(default_model):
    rows = summarize(default_model).rows[1:]
    assert [r.params.total for r in rows] == HEAD_COUNTS
    assert [r.output_shape for r in rows] == HEAD_SHAPES
    assert rows[0].name == "conv2d_1" and rows[0].shape_text == "(None, 10, 10, 32)"


def test_summary_totals(default_model):
    s = summarize(default_model)
    assert s.totals == ParamCount(22420131, 617077, 21803054)
    assert s.totals.total == s.totals.trainable + s.totals.frozen
    assert default_model.param_count() == s.totals
    head = default_model.head.param_count()
    assert head == ParamCount(617347, 617077, 270)
    text = s.render()
    for line in ("Total params: 22,420,131", "Trainable params: 617,077", "Non-trainable params: 21,803,054"):
        assert line in text


def test_build_is_deterministic():
    a, b = build(7, seed=3), build(7, seed=3)
    assert [p.value.tobytes() for p in a.params] == [p.value.tobytes() for p in b.params]
    c = build(7, seed=4)
    assert a.params[0].value.tobytes() != c.params[0].value.tobytes()


def test_forward_contract():
    m = tiny_model(dtype=np.float32)
    x = np.random.default_rng(1).uniform(size=(5, 16, 16, 3)).astype(np.float32)
    p = m.forward(x)
    assert p.shape == (5, 3)
    npt.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    npt.assert_array_equal(m.predict(x), p.argmax(axis=1))
    # inference is pure
    assert m.forward(x).tobytes() == p.tobytes()
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 15, 15, 3), np.float32))


def test_set_trainable_policies():
    m = build(7)
    assert m.param_count().trainable == 617077
    set_trainable(m, 0)
    assert m.param_count().trainable == 617077
    with pytest.raises(ConfigError):
        set_trainable(m, 1)  # the declared unit has no weights

    t = build(3, TinyBackbone(units=6), input_side=64)
    set_trainable(t, 4)
    assert [u.trainable for u in t.backbone.units] == [False, False, True, True, True, True]
    set_trainable(t, "freeze_backbone_all")
    assert not any(u.trainable for u in t.backbone.units)
    set_trainable(t, ["block2"])
    assert [u.trainable for u in t.backbone.units] == [False, True, False, False, False, False]
    with pytest.raises(ConfigError):
        set_trainable(t, 7)
    with pytest.raises(ConfigError):
        set_trainable(t, ["nope"])

    four = build(3, TinyBackbone(units=4), input_side=64)
    set_trainable(four, 4)
    assert all(u.trainable for u in four.backbone.units)


def test_moving_statistics_never_trainable():
    m = tiny_model()
    set_trainable(m, 2)
    assert not any(p.trainable for p in m.params if p.statistic)


def _loss_fn(m, x, y):
    drops = m.dropout_layers

    def loss():
        for d in drops:
            d.step = 0
        return categorical_crossentropy(m.forward(x, training=True, cache=False), y)[0]

    return loss


@pytest.mark.parametrize("seed", range(8))
def test_end_to_end_gradient(seed):
    m = tiny_model(seed=seed)
    set_trainable(m, 2)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(6, 16, 16, 3))
    y = np.eye(3)[rng.integers(0, 3, 6)]
    loss = _loss_fn(m, x, y)
    for d in m.dropout_layers:
        d.step = 0
    probs = m.forward(x, training=True)
    m.backward(categorical_crossentropy(probs, y)[1])

    checked = 0
    for p in m.trainable_params:
        analytic = p.grad.copy()
        idx = tuple(rng.integers(0, s) for s in p.value.shape)
        # batchnorm on a handful of logits is sharply curved, so the step is small
        h = 1e-7
        old = p.value[idx]
        p.value[idx] = old + h
        fp = loss()
        p.value[idx] = old - h
        fm = loss()
        p.value[idx] = old
        numeric = (fp - fm) / (2 * h)
        if abs(numeric) > 1e-8 or abs(analytic[idx]) > 1e-8:
            assert abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric)) <= 1e-3, p.name
            checked += 1
    assert checked >= 10


def test_end_to_end_dense_weight_vector():
    m = tiny_model(seed=5)
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(4, 16, 16, 3))
    y = np.eye(3)[rng.integers(0, 3, 4)]
    loss = _loss_fn(m, x, y)
    loss()
    for d in m.dropout_layers:
        d.step = 0
    m.backward(categorical_crossentropy(m.forward(x, training=True), y)[1])
    dense = m.head.layers[-3]
    assert rel_error(dense.weights.grad, numeric_grad(loss, dense.weights.value, h=1e-7)) <= 1e-3


def test_frozen_backbone_survives_training():
    m = tiny_model(dtype=np.float32)
    before = [p.value.tobytes() for p in m.backbone.params]
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(6, 16, 16, 3)).astype(np.float32)
    y = np.eye(3, dtype=np.float32)[rng.integers(0, 3, 6)]
    opt = RMSprop()
    for _ in range(5):
        m.backward(categorical_crossentropy(m.forward(x, training=True), y)[1])
        opt.step(m.params)
    assert [p.value.tobytes() for p in m.backbone.params] == before


def test_from_config_rebuilds_same_model():
    m = tiny_model(dtype=np.float32, seed=2)
    r = from_config(m.config)
    assert [p.value.tobytes() for p in r.params] == [p.value.tobytes() for p in m.params]


def test_make_backbone_rejects_unknown():
    with pytest.raises(ConfigError):
        make_backbone({"kind": "resnet"})
    with pytest.raises(ShapeError):
        ShapeOnlyBackbone().output_shape((50, 50, 3))
