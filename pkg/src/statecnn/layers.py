"""Layers with explicit forward and backward passes.

Every layer maps a channels-last batch to a batch. ``forward`` stores what
``backward`` needs only when ``cache`` is true (the default in training mode),
so inference-mode forwards never write layer state and may be shared.
``backward(dout)`` returns the gradient with respect to the layer input and
writes parameter gradients into the trainable :class:`ParamSlot` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor
from .errors import ConfigError, ShapeError, StateError


@dataclass(eq=False)
class ParamSlot:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray | None = None
    # moving statistics: never trainable, whatever the freezing policy says
    statistic: bool = False

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamCount(NamedTuple):
    total: int
    trainable: int
    frozen: int

    def __add__(self, other):
        return ParamCount(*(a + b for a, b in zip(self, other)))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    label = "Layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: list[ParamSlot] = []
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False, cache: bool | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (batch axis excluded)."""
        return tuple(input_shape)

    def param_count(self) -> ParamCount:
        return param_count(self)

    def _saved(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a cached forward pass")
        return self._cache

    def _store(self, cache, training, value):
        self._cache = value if (training if cache is None else cache) else None

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def param_count(layer: Layer) -> ParamCount:
    total = sum(p.size for p in layer.params)
    trainable = sum(p.size for p in layer.params if p.trainable)
    return ParamCount(total, trainable, total - trainable)


def _set_grad(slot: ParamSlot, grad: np.ndarray) -> None:
    if slot.trainable:
        slot.grad = grad.astype(slot.value.dtype, copy=False)


class Conv2D(Layer):
    kind = "conv2d"
    label = "Conv2D"

    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), stride=(1, 1),
                 padding: str = "same", rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str | None = None):
        super().__init__(name)
        kh, kw = kernel
        if padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding {padding!r}")
        if isinstance(stride, int):
            stride = (stride, stride)
        self.in_channels, self.filters = in_channels, filters
        self.kernel, self.stride, self.padding = (kh, kw), tuple(stride), padding
        rng = rng if rng is not None else np.random.default_rng(0)
        w = glorot_uniform(rng, (kh, kw, in_channels, filters),
                           kh * kw * in_channels, kh * kw * filters, dtype)
        self.weights = ParamSlot(f"{self.name}/kernel", w)
        self.bias = ParamSlot(f"{self.name}/bias", np.zeros(filters, dtype=dtype))
        self.params = [self.weights, self.bias]

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        return (tensor.window_output_size(h, self.kernel[0], self.stride[0], self.padding),
                tensor.window_output_size(w, self.kernel[1], self.stride[1], self.padding),
                self.filters)

    def forward(self, x, training=False, cache=None):
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (N, H, W, {self.in_channels}), got {x.shape}")
        view = tensor.pad_and_window(x, self.kernel, self.stride, self.padding)
        # windows: (N, Ho, Wo, C, kh, kw); kernel: (kh, kw, C, F)
        w = self.weights.value.transpose(2, 0, 1, 3)
        out = np.tensordot(view.windows, w, axes=([3, 4, 5], [0, 1, 2]))
        out += self.bias.value
        self._store(cache, training, (x.shape, view))
        return out

    def backward(self, dout, need_input_grad=True):
        in_shape, view = self._saved()
        w = self.weights.value.transpose(2, 0, 1, 3)
        if self.weights.trainable:
            dw = np.tensordot(view.windows, dout, axes=([0, 1, 2], [0, 1, 2]))
            _set_grad(self.weights, dw.transpose(1, 2, 0, 3))
        _set_grad(self.bias, dout.sum(axis=(0, 1, 2)))
        if not need_input_grad:
            return None

        dcols = np.tensordot(dout, w, axes=([3], [3]))  # (N, Ho, Wo, C, kh, kw)
        dpad = np.zeros(view.padded.shape, dtype=dout.dtype)
        ho, wo = view.out_hw
        sh, sw = self.stride
        for a in range(self.kernel[0]):
            for b in range(self.kernel[1]):
                dpad[:, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw, :] += dcols[..., a, b]
        top, _, left, _ = view.pads
        return dpad[:, top:top + in_shape[1], left:left + in_shape[2], :]


class BatchNorm(Layer):
    """Per-channel normalization over every axis but the last."""

    kind = "batchnorm"
    label = "BatchNormalization"

    def __init__(self, channels: int, epsilon: float = 1e-3, momentum: float = 0.99,
                 dtype=np.float32, name: str | None = None):
        super().__init__(name)
        if epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be positive, got {epsilon}")
        if not 0 <= momentum <= 1:
            raise ConfigError(f"batchnorm momentum must lie in [0, 1], got {momentum}")
        self.channels, self.epsilon, self.momentum = channels, epsilon, momentum
        self.gamma = ParamSlot(f"{self.name}/gamma", np.ones(channels, dtype=dtype))
        self.beta = ParamSlot(f"{self.name}/beta", np.zeros(channels, dtype=dtype))
        self.moving_mean = ParamSlot(f"{self.name}/moving_mean", np.zeros(channels, dtype=dtype),
                                     trainable=False, statistic=True)
        self.moving_variance = ParamSlot(f"{self.name}/moving_variance", np.ones(channels, dtype=dtype),
                                         trainable=False, statistic=True)
        self.params = [self.gamma, self.beta, self.moving_mean, self.moving_variance]

    def output_shape(self, input_shape):
        if input_shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {input_shape[-1]}")
        return tuple(input_shape)

    def forward(self, x, training=False, cache=None):
        if x.ndim not in (2, 4) or x.shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected rank 2 or 4 with {self.channels} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.moving_mean.value = (m * self.moving_mean.value + (1 - m) * mean).astype(x.dtype)
            self.moving_variance.value = (m * self.moving_variance.value + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.moving_mean.value, self.moving_variance.value
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        self._store(cache, training, (training, xhat, inv_std))
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dout):
        training, xhat, inv_std = self._saved()
        axes = tuple(range(dout.ndim - 1))
        _set_grad(self.gamma, (dout * xhat).sum(axis=axes))
        _set_grad(self.beta, dout.sum(axis=axes))
        dxhat = dout * self.gamma.value
        if not training:
            return dxhat * inv_std
        m = dout.size // dout.shape[-1]
        return inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    kind = "relu"
    label = "Activation"

    def forward(self, x, training=False, cache=None):
        self._store(cache, training, x > 0)
        return np.maximum(x, 0)

    def backward(self, dout):
        # subgradient at exactly 0 is 0
        return dout * self._saved()


class MaxPool2D(Layer):
    kind = "maxpool2d"
    label = "MaxPooling2D"

    def __init__(self, pool=(2, 2), stride=None, name: str | None = None):
        super().__init__(name)
        self.pool = tuple(pool)
        self.stride = tuple(stride) if stride is not None else self.pool

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (tensor.window_output_size(h, self.pool[0], self.stride[0], "valid"),
                tensor.window_output_size(w, self.pool[1], self.stride[1], "valid"), c)

    def forward(self, x, training=False, cache=None):
        view = tensor.pad_and_window(x, self.pool, self.stride, "valid")
        n, ho, wo, c = view.windows.shape[:4]
        flat = view.windows.reshape(n, ho, wo, c, -1)
        # argmax picks the first row-major position on ties
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._store(cache, training, (x.shape, idx))
        return out

    def backward(self, dout):
        in_shape, idx = self._saved()
        dx = np.zeros(in_shape, dtype=dout.dtype)
        ph, pw = self.pool
        sh, sw = self.stride
        ho, wo = idx.shape[1:3]
        for a in range(ph):
            for b in range(pw):
                hit = idx == a * pw + b
                dx[:, a:a + sh * (ho - 1) + 1:sh, b:b + sw * (wo - 1) + 1:sw, :] += np.where(hit, dout, 0)
        return dx


class Flatten(Layer):
    kind = "flatten"
    label = "Flatten"

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)

    def forward(self, x, training=False, cache=None):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected rank 4, got {x.shape}")
        self._store(cache, training, x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._saved())


class Dense(Layer):
    kind = "dense"
    label = "Dense"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str | None = None):
        super().__init__(name)
        self.in_features, self.units = in_features, units
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = ParamSlot(f"{self.name}/kernel",
                                 glorot_uniform(rng, (in_features, units), in_features, units, dtype))
        self.bias = ParamSlot(f"{self.name}/bias", np.zeros(units, dtype=dtype))
        self.params = [self.weights, self.bias]

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expected ({self.in_features},), got {tuple(input_shape)}")
        return (self.units,)

    def forward(self, x, training=False, cache=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        self._store(cache, training, x)
        return x @ self.weights.value + self.bias.value

    def backward(self, dout, need_input_grad=True):
        x = self._saved()
        _set_grad(self.weights, x.T @ dout)
        _set_grad(self.bias, dout.sum(axis=0))
        return dout @ self.weights.value.T if need_input_grad else None


class Dropout(Layer):
    """Inverted dropout.

    The training-mode mask is drawn from ``(seed, step)``; ``step`` advances by
    one per training forward.
    """

    kind = "dropout"
    label = "Dropout"

    def __init__(self, rate: float = 0.5, seed: int = 0, name: str | None = None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate, self.seed, self.step = rate, seed, 0

    def forward(self, x, training=False, cache=None):
        if not training or self.rate == 0:
            self._store(cache, training, 1)
            return x
        rng = np.random.default_rng([self.seed, self.step])
        self.step += 1
        mask = (rng.random(x.shape) >= self.rate) * x.dtype.type(1 / (1 - self.rate))
        mask = mask.astype(x.dtype)
        self._store(cache, training, mask)
        return x * mask

    def backward(self, dout):
        return dout * self._saved()


class Softmax(Layer):
    kind = "softmax"
    label = "Activation"

    def forward(self, x, training=False, cache=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        self._store(cache, training, p)
        return p

    def backward(self, dout):
        p = self._saved()
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


class Sequential:
    """An ordered chain of layers."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x, training=False, cache=None):
        for layer in self.layers:
            x = layer.forward(x, training, cache)
        return x

    def backward(self, dout, need_input_grad=True):
        for layer in reversed(self.layers[1:]):
            dout = layer.backward(dout)
        first = self.layers[0]
        if need_input_grad:
            return first.backward(dout)
        if first.params:
            first.backward(dout, need_input_grad=False)
        return None

    @property
    def params(self) -> list[ParamSlot]:
        return [p for layer in self.layers for p in layer.params]

    def param_count(self) -> ParamCount:
        return sum((param_count(layer) for layer in self.layers), ParamCount(0, 0, 0))

    def output_shape(self, input_shape):
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
        return input_shape
