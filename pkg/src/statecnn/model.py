"""The state classifier: a 16-layer head on top of a pluggable backbone.

Backbones expose an ordered list of freezable units (bottom to top). Two are
provided: :class:`ShapeOnlyBackbone`, which honours the output-shape and
parameter-count contract of the pretrained Inception v3 body (``mixed10``)
without carrying any weights, and :class:`TinyBackbone`, a small real conv
stack that can be fine-tuned.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ParamCount,
                     ParamSlot, ReLU, Sequential, Softmax, param_count)

INCEPTION_V3_PARAMS = 21_802_784
INCEPTION_V3_CHANNELS = 2048


class BackboneUnit(Sequential):
    """A named group of layers frozen and unfrozen together."""

    def __init__(self, name: str, layers: list[Layer]):
        super().__init__(layers)
        self.name = name

    @property
    def trainable(self) -> bool:
        return any(p.trainable for p in self.params)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            if not p.statistic:
                p.trainable = flag
                if not flag:
                    p.grad = None


class Backbone:
    kind = "backbone"
    units: list
    out_channels: int

    def output_shape(self, input_shape) -> tuple[int, int, int]:
        raise NotImplementedError

    def forward(self, images, training=False, cache=None):
        raise NotImplementedError

    def backward(self, dfeatures, need_input_grad=False):
        return None

    @property
    def params(self) -> list[ParamSlot]:
        return [p for u in self.units for p in getattr(u, "params", [])]

    @property
    def declared_param_count(self) -> int:
        return self.param_count().total

    def param_count(self) -> ParamCount:
        return sum((u.param_count() for u in self.units), ParamCount(0, 0, 0))

    def config(self) -> dict:
        raise NotImplementedError


@dataclass
class DeclaredUnit:
    """A unit that reports a parameter count but holds no weights."""

    name: str
    declared_params: int
    trainable: bool = False

    params = ()

    def param_count(self) -> ParamCount:
        n = self.declared_params
        return ParamCount(n, n, 0) if self.trainable else ParamCount(n, 0, n)

    def set_trainable(self, flag: bool) -> None:
        if flag:
            raise ConfigError(f"unit {self.name!r} has no materialised weights and cannot be trained")


def _inception_spatial(size: int) -> int:
    # stride-2 valid 3x3 stem conv, valid 3x3, same 3x3, 3x3/2 pool,
    # 1x1, valid 3x3, 3x3/2 pool, then two stride-2 reduction blocks
    def down(s):
        return (s - 3) // 2 + 1

    s = down(size)
    s = s - 2
    s = down(s)
    s = s - 2
    s = down(s)
    s = down(s)
    s = down(s)
    if size < 75 or s < 1:
        raise ShapeError(f"input side {size} is below the backbone minimum of 75")
    return s


class ShapeOnlyBackbone(Backbone):
    """Stands in for the pretrained Inception v3 convolutional body.

    Emits deterministic pseudorandom non-negative features of the right shape
    (``[10, 10, 2048]`` for a 363x363 input), keyed by ``(seed, image bytes)``.
    """

    kind = "shape_only"

    def __init__(self, declared_params: int = INCEPTION_V3_PARAMS, seed: int = 0,
                 channels: int = INCEPTION_V3_CHANNELS, dtype=np.float32):
        self.seed = seed
        self.out_channels = channels
        self.dtype = np.dtype(dtype)
        self.units = [DeclaredUnit("mixed10", declared_params)]

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != 3:
            raise ShapeError(f"backbone expects 3 input channels, got {c}")
        return _inception_spatial(h), _inception_spatial(w), self.out_channels

    def forward(self, images, training=False, cache=None):
        shape = self.output_shape(images.shape[1:])
        out = np.empty((images.shape[0],) + shape, dtype=self.dtype)
        for i, img in enumerate(images):
            digest = hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=8).digest()
            rng = np.random.default_rng([self.seed, int.from_bytes(digest, "little")])
            out[i] = rng.random(shape, dtype=np.float32)
        return out

    def config(self):
        return {"kind": self.kind, "declared_params": self.units[0].declared_params,
                "seed": self.seed, "channels": self.out_channels}


class TinyBackbone(Backbone):
    """A trainable stack of ``units`` conv(3x3)+ReLU blocks.

    The first ``downsample`` units use stride 2, so a 64x64 input yields an
    8x8 feature map with the default of 3.
    """

    kind = "tiny_trainable"

    def __init__(self, units: int = 6, channels: int = 8, downsample: int = 3, seed: int = 0,
                 dtype=np.float32):
        if units < 1 or channels < 1 or not 0 <= downsample <= units:
            raise ConfigError(f"invalid tiny backbone units={units} channels={channels} downsample={downsample}")
        self.seed, self.downsample = seed, downsample
        self.out_channels = channels
        rng = np.random.default_rng([seed, 1])
        self.units = []
        cin = 3
        for i in range(units):
            name = f"block{i + 1}"
            stride = 2 if i < downsample else 1
            conv = Conv2D(cin, channels, (3, 3), stride, "same", rng=rng, dtype=dtype, name=f"{name}_conv")
            self.units.append(BackboneUnit(name, [conv, ReLU(f"{name}_relu")]))
            cin = channels
        for u in self.units:
            u.set_trainable(False)

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for u in self.units:
            shape = u.output_shape(shape)
        return shape

    def _lowest_trainable(self) -> int | None:
        for i, u in enumerate(self.units):
            if u.trainable:
                return i
        return None

    def forward(self, images, training=False, cache=None):
        keep = training if cache is None else cache
        low = self._lowest_trainable() if keep else None
        x = images
        for i, u in enumerate(self.units):
            x = u.forward(x, training, cache=low is not None and i >= low)
        return x

    def backward(self, dfeatures, need_input_grad=False):
        low = self._lowest_trainable()
        if low is None:
            return None
        d = dfeatures
        for i in range(len(self.units) - 1, low - 1, -1):
            need = need_input_grad or i > low
            d = self.units[i].backward(d, need_input_grad=need)
        return d if need_input_grad and low == 0 else None

    def config(self):
        return {"kind": self.kind, "units": len(self.units), "channels": self.out_channels,
                "downsample": self.downsample, "seed": self.seed}


def make_backbone(options: dict, dtype=np.float32) -> Backbone:
    options = dict(options)
    kind = options.pop("kind", "shape_only")
    if kind == "shape_only":
        return ShapeOnlyBackbone(dtype=dtype, **options)
    if kind == "tiny_trainable":
        return TinyBackbone(dtype=dtype, **options)
    raise ConfigError(f"unknown backbone kind {kind!r}")


def build_head(in_shape, classes: int, dropout_rate: float, rng: np.random.Generator,
               conv_blocks: int = 2, dropout_seed: int = 0, dtype=np.float32,
               epsilon: float = 1e-3, momentum: float = 0.99) -> list[Layer]:
    """conv/bn/relu/pool blocks (32 then 64 filters), then
    flatten -> dense(32)/bn/relu/dropout -> dense(classes)/bn/softmax."""
    if conv_blocks not in (1, 2):
        raise ConfigError(f"conv_blocks must be 1 or 2, got {conv_blocks}")
    counters: dict[str, int] = {}

    def name(prefix):
        counters[prefix] = counters.get(prefix, 0) + 1
        return f"{prefix}_{counters[prefix]}"

    def bn(c):
        return BatchNorm(c, epsilon, momentum, dtype=dtype, name=name("batch_normalization"))

    layers: list[Layer] = []
    shape = tuple(in_shape)
    cin = shape[-1]
    for filters in (32, 64)[:conv_blocks]:
        layers += [
            Conv2D(cin, filters, (3, 3), (1, 1), "same", rng=rng, dtype=dtype, name=name("conv2d")),
            bn(filters),
            ReLU(name("activation")),
            MaxPool2D((2, 2), name=name("max_pooling2d")),
        ]
        cin = filters
    layers.append(Flatten(name("flatten")))
    for layer in layers:
        shape = layer.output_shape(shape)
    layers += [
        Dense(shape[0], 32, rng=rng, dtype=dtype, name=name("dense")),
        bn(32),
        ReLU(name("activation")),
        Dropout(dropout_rate, dropout_seed, name=name("dropout")),
        Dense(32, classes, rng=rng, dtype=dtype, name=name("dense")),
        bn(classes),
        Softmax(name("activation")),
    ]
    return layers


class StateClassifier:
    """Backbone plus head. ``forward`` maps ``(N, S, S, 3)`` images to class
    probabilities; ``backward`` takes the gradient with respect to them."""

    def __init__(self, backbone: Backbone, head: list[Layer], classes: list[str],
                 input_side: int, config: dict | None = None):
        first = head[0]
        if isinstance(first, Conv2D) and first.in_channels != backbone.out_channels:
            raise ConfigError(f"head expects {first.in_channels} input channels, "
                              f"backbone emits {backbone.out_channels}")
        self.backbone = backbone
        self.head = Sequential(head)
        self.classes = list(classes)
        self.input_side = input_side
        self.config = config or {}
        self.head.output_shape(backbone.output_shape((input_side, input_side, 3)))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def params(self) -> list[ParamSlot]:
        return self.backbone.params + self.head.params

    @property
    def trainable_params(self) -> list[ParamSlot]:
        return [p for p in self.params if p.trainable]

    @property
    def dropout_layers(self) -> list[Dropout]:
        return [layer for layer in self.head.layers if isinstance(layer, Dropout)]

    def forward(self, images: np.ndarray, training: bool = False, cache: bool | None = None) -> np.ndarray:
        """Class probabilities. ``cache`` (default: ``training``) keeps what
        :meth:`backward` needs."""
        expected = (self.input_side, self.input_side, 3)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"expected images of shape (N, {', '.join(map(str, expected))}), got {images.shape}")
        feats = self.backbone.forward(images, training, cache)
        return self.head.forward(feats, training, cache)

    def backward(self, dprobs: np.ndarray) -> None:
        need_feat_grad = any(getattr(u, "trainable", False) for u in self.backbone.units)
        dfeat = self.head.backward(dprobs, need_input_grad=need_feat_grad)
        if need_feat_grad:
            self.backbone.backward(dfeat)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images).argmax(axis=1)

    def param_count(self) -> ParamCount:
        return self.backbone.param_count() + self.head.param_count()


def build(classes=7, backbone: Backbone | None = None, dropout_rate: float = 0.5, seed: int = 0,
          input_side: int = 363, conv_blocks: int = 2, dtype=np.float32,
          bn_epsilon: float = 1e-3, bn_momentum: float = 0.99) -> StateClassifier:
    """Construct the classifier with seeded head initialisation.

    ``classes`` is either a count or a list of class names. The backbone
    starts fully frozen. ``bn_momentum`` is the weight kept by the moving
    statistics at each training step; with 0.99 they need a few hundred
    steps to forget their initial values.
    """
    names = [f"class_{i}" for i in range(classes)] if isinstance(classes, int) else list(classes)
    if len(names) < 2:
        raise ConfigError("at least two classes are required")
    backbone = backbone if backbone is not None else ShapeOnlyBackbone(dtype=dtype)
    feat_shape = backbone.output_shape((input_side, input_side, 3))
    rng = np.random.default_rng([seed, 2])
    head = build_head(feat_shape, len(names), dropout_rate, rng, conv_blocks,
                      dropout_seed=seed, dtype=dtype, epsilon=bn_epsilon, momentum=bn_momentum)
    config = {
        "classes": names,
        "backbone": backbone.config(),
        "dropout": dropout_rate,
        "seed": seed,
        "input_side": input_side,
        "conv_blocks": conv_blocks,
        "bn_epsilon": bn_epsilon,
        "bn_momentum": bn_momentum,
    }
    model = StateClassifier(backbone, head, names, input_side, config)
    set_trainable(model, "freeze_backbone_all")
    return model


def from_config(config: dict, dtype=np.float32) -> StateClassifier:
    """Rebuild an (untrained) model from :attr:`StateClassifier.config`."""
    return build(config["classes"], make_backbone(config["backbone"], dtype), config["dropout"],
                 config["seed"], config["input_side"], config.get("conv_blocks", 2), dtype,
                 config.get("bn_epsilon", 1e-3), config.get("bn_momentum", 0.99))


def check_unfreezable(model: StateClassifier, k: int) -> None:
    """Raise :class:`ConfigError` unless the top ``k`` backbone units can be trained."""
    units = model.backbone.units
    declared = [u.name for u in units[max(len(units) - k, 0):] if isinstance(u, DeclaredUnit)] if k > 0 else []
    if declared:
        raise ConfigError(f"backbone units {declared} hold no weights and cannot be fine-tuned; "
                          "use a tiny_trainable backbone or set stage2.unfreeze_top_k to 0")
    if not 0 <= k <= len(units):
        raise ConfigError(f"cannot unfreeze top {k} of {len(units)} backbone units")


def set_trainable(model: StateClassifier, policy="freeze_backbone_all") -> None:
    """Set backbone trainability.

    ``policy`` is ``"freeze_backbone_all"``, an integer ``k`` (unfreeze the
    ``k`` units nearest the output, freeze the rest) or an iterable of unit
    names to unfreeze. Head weights stay trainable; batchnorm moving
    statistics are never trainable.
    """
    units = model.backbone.units
    if policy == "freeze_backbone_all":
        chosen: set[str] = set()
    elif isinstance(policy, (int, np.integer)) and not isinstance(policy, bool):
        k = int(policy)
        if not 0 <= k <= len(units):
            raise ConfigError(f"cannot unfreeze top {k} of {len(units)} backbone units")
        chosen = {u.name for u in units[len(units) - k:]} if k else set()
    elif isinstance(policy, Iterable) and not isinstance(policy, str):
        chosen = set(policy)
        unknown = chosen - {u.name for u in units}
        if unknown:
            raise ConfigError(f"unknown backbone units {sorted(unknown)}")
    else:
        raise ConfigError(f"unknown trainability policy {policy!r}")
    for u in units:
        if u.name in chosen or u.trainable:
            u.set_trainable(u.name in chosen)
    for p in model.head.params:
        p.trainable = not p.statistic


@dataclass
class SummaryRow:
    name: str
    type: str
    output_shape: tuple
    params: ParamCount
    connected_to: str

    @property
    def shape_text(self) -> str:
        return "(None, " + ", ".join(str(d) for d in self.output_shape) + ")"


@dataclass
class Summary:
    rows: list[SummaryRow]

    @property
    def totals(self) -> ParamCount:
        return sum((r.params for r in self.rows), ParamCount(0, 0, 0))

    def render(self) -> str:
        headers = ("Layer (type)", "Output Shape", "Param #", "Connected to")
        table = [(f"{r.name} ({r.type})", r.shape_text, str(r.params.total), r.connected_to)
                 for r in self.rows]
        widths = [max(len(h), *(len(t[i]) for t in table)) + 2 for i, h in enumerate(headers)]

        def line(cols):
            return "".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()

        width = sum(widths)
        total, trainable, frozen = self.totals
        out = [line(headers), "=" * width]
        out += [line(t) for t in table]
        out += ["=" * width,
                f"Total params: {total:,}",
                f"Trainable params: {trainable:,}",
                f"Non-trainable params: {frozen:,}"]
        return "\n".join(out)


def summarize(model: StateClassifier) -> Summary:
    rows = []
    shape = (model.input_side, model.input_side, 3)
    prev = "input_1"
    bb = model.backbone
    for unit in bb.units:
        if isinstance(unit, DeclaredUnit):
            shape = bb.output_shape(shape)
            rtype = type(bb).__name__
        else:
            shape = unit.output_shape(shape)
            rtype = "BackboneUnit"
        rows.append(SummaryRow(unit.name, rtype, shape, unit.param_count(), f"{prev}[0][0]"))
        prev = unit.name
    for layer in model.head.layers:
        shape = layer.output_shape(shape)
        rows.append(SummaryRow(layer.name, layer.label, shape, param_count(layer), f"{prev}[0][0]"))
        prev = layer.name
    return Summary(rows)
