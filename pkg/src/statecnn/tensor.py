"""Dense array core.

Tensors are plain :class:`numpy.ndarray` objects restricted to rank 1-4 and
to two precisions (``float32`` for training, ``float64`` for gradient checks).
Batches of images are laid out channels-last, ``(N, H, W, C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError

PRECISIONS = {"single": np.float32, "double": np.float64}
MAX_RANK = 4


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ShapeError(f"unknown precision {precision!r}") from None
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dtype}")
    return dtype


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    """Validate extents and return the shape as a tuple."""
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got shape {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got shape {dims}")
    if math.prod(dims) >= 2**63:
        raise ShapeError(f"element count of {dims} overflows 63 bits")
    return dims


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    seed: int


@dataclass(frozen=True)
class Normal:
    mu: float
    sigma: float
    seed: int


def create(shape, fill=0.0, precision="single") -> np.ndarray:
    """New tensor filled with a constant, or a seeded uniform/normal draw.

    Seeded fills depend only on ``(seed, rule, shape, precision)``.
    """
    dims = check_shape(shape)
    dtype = as_dtype(precision)
    if isinstance(fill, Uniform):
        rng = np.random.default_rng(fill.seed)
        return rng.uniform(fill.lo, fill.hi, size=dims).astype(dtype)
    if isinstance(fill, Normal):
        rng = np.random.default_rng(fill.seed)
        return rng.normal(fill.mu, fill.sigma, size=dims).astype(dtype)
    return np.full(dims, fill, dtype=dtype)


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """``a op b`` for equal shapes, or with ``b`` a per-channel vector.

    Division by zero yields IEEE infinities/NaNs; use :func:`all_finite` to
    detect them.
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    if a.shape != b.shape and not (b.ndim == 1 and b.shape[0] == a.shape[-1]):
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return fn(a, b)


def all_finite(a: np.ndarray) -> bool:
    return bool(np.isfinite(a).all())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def reduce(a: np.ndarray, axes, stat: str) -> np.ndarray:
    """Reduce over ``axes`` (removed from the result).

    ``variance`` is the population variance (divides by the count).
    """
    raw = [int(ax) for ax in np.atleast_1d(axes)]
    bad = [ax for ax in raw if not -a.ndim <= ax < a.ndim]
    if bad:
        raise ShapeError(f"axes {bad} out of range for rank {a.ndim}")
    axes = tuple(sorted({ax % a.ndim for ax in raw}))
    if stat == "max":
        return a.max(axis=axes)
    # accumulate in double so single-precision results carry one rounding only
    wide = a.astype(np.float64, copy=False)
    if stat == "sum":
        out = wide.sum(axis=axes)
    elif stat == "mean":
        out = wide.mean(axis=axes)
    elif stat == "variance":
        out = wide.var(axis=axes)
    else:
        raise InputError(f"unknown statistic {stat!r}")
    return np.asarray(out).astype(a.dtype)


def argmax(a: np.ndarray) -> int:
    """Index of the maximum; ties go to the lowest index."""
    if a.ndim != 1:
        raise ShapeError(f"argmax expects rank 1, got shape {a.shape}")
    return int(np.argmax(a))


def flat_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major offset of a multi-index."""
    offset = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of range for {tuple(shape)}")
        offset = offset * d + i
    return offset


def unravel(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    index = []
    for d in reversed(shape):
        offset, i = divmod(offset, d)
        index.append(i)
    if offset:
        raise IndexError("offset out of range")
    return tuple(reversed(index))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    # odd totals put the extra row/column at the bottom/right
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


@dataclass
class WindowView:
    """Patches of a padded NHWC tensor.

    ``windows`` is a read-only strided view of shape
    ``(N, out_h, out_w, C, kh, kw)`` into ``padded``.
    """

    padded: np.ndarray
    windows: np.ndarray
    kernel: tuple[int, int]
    stride: tuple[int, int]
    pads: tuple[int, int, int, int]  # top, bottom, left, right

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.windows.shape[1], self.windows.shape[2]

    def positions(self) -> Iterator[tuple[int, int, tuple[int, int]]]:
        """Yield ``(i, j, (row, col))``: each output cell and its patch origin
        in padded coordinates."""
        for i in range(self.out_hw[0]):
            for j in range(self.out_hw[1]):
                yield i, j, (i * self.stride[0], j * self.stride[1])


def window_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if kernel > size:
            raise ShapeError(f"kernel {kernel} larger than input extent {size}")
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def pad_and_window(a: np.ndarray, kernel, stride, padding: str) -> WindowView:
    if a.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C), got shape {a.shape}")
    kh, kw = kernel
    sh, sw = stride
    _, h, w, _ = a.shape
    if padding == "same":
        top, bottom = same_padding(h, kh, sh)
        left, right = same_padding(w, kw, sw)
    elif padding == "valid":
        top = bottom = left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if kh > h + top + bottom or kw > w + left + right:
        raise ShapeError(f"kernel {kernel} larger than padded input {a.shape[1:3]}")
    if top or bottom or left or right:
        padded = np.pad(a, ((0, 0), (top, bottom), (left, right), (0, 0)))
    else:
        padded = a
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    return WindowView(padded, windows, (kh, kw), (sh, sw), (top, bottom, left, right))


def to_bytes(a: np.ndarray) -> bytes:
    """Little-endian float32, row-major, no padding."""
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def from_bytes(buf: bytes, shape, precision="single") -> np.ndarray:
    expected = math.prod(shape) * 4
    if len(buf) != expected:
        raise ShapeError(f"buffer holds {len(buf)} bytes, shape {tuple(shape)} needs {expected}")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(as_dtype(precision))
