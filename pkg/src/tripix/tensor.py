"""Dense tensor math: the reference layer the sparse paths are verified against.

Arrays are wrapped in a thin :class:`Tensor` so shapes, dtypes and finiteness
can be policed at module boundaries; the heavy lifting stays in numpy.
Convolution is cross-correlation (no kernel flip) with zero padding, the
convention used by every network in this package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Shapes inconsistent with the requested operation."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense N-d array of 32- or 64-bit reals in row-major order."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        self.data = _as_float_array(data, dtype)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(self.data.reshape(shape))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor contains non-finite values")
        return self

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def as_array(x) -> np.ndarray:
    """Accept a Tensor or anything array-like, return the raw ndarray."""
    if isinstance(x, Tensor):
        return x.data
    return _as_float_array(x)


@dataclass
class ConvSpec:
    """A 2-d convolution: kernel (C_o, C_i, k, k), optional bias, stride, zero padding."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if not isinstance(self.kernel, Tensor):
            self.kernel = Tensor(self.kernel)
        if self.bias is not None and not isinstance(self.bias, Tensor):
            self.bias = Tensor(self.bias)
        k = self.kernel
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise ShapeError(f"kernel must be (C_o, C_i, k, k), got {k.shape}")
        if self.bias is not None and self.bias.shape != (k.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_o={k.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]

    def out_size(self, h_in: int, w_in: int) -> tuple:
        k, s, p = self.ksize, self.stride, self.padding
        h_out = (h_in + 2 * p - k) // s + 1
        w_out = (w_in + 2 * p - k) // s + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"non-positive output size {h_out}x{w_out} for input "
                f"{h_in}x{w_in} with k={k} stride={s} padding={p}"
            )
        return h_out, w_out


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (C, H, W) into patch columns of shape (C*k*k, H_o*W_o)."""
    c, h, w = x.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    xp = _pad2d(x, padding)
    cols = np.empty((c, k, k, h_out, w_out), dtype=x.dtype)
    for dy in range(k):
        ylim = dy + stride * (h_out - 1) + 1
        for dx in range(k):
            xlim = dx + stride * (w_out - 1) + 1
            cols[:, dy, dx] = xp[:, dy:ylim:stride, dx:xlim:stride]
    return cols.reshape(c * k * k, h_out * w_out)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto (C, H, W)."""
    c, h, w = x_shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, h_out, w_out)
    for dy in range(k):
        ylim = dy + stride * (h_out - 1) + 1
        for dx in range(k):
            xlim = dx + stride * (w_out - 1) + 1
            xp[:, dy:ylim:stride, dx:xlim:stride] += cols6[:, dy, dx]
    if padding == 0:
        return xp
    return xp[:, padding:-padding, padding:-padding]


def conv2d_raw(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: Optional[np.ndarray],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Cross-correlation on raw arrays; no validation, no finiteness check."""
    c_out, c_in, k, _ = kernel.shape
    h_out = (x.shape[1] + 2 * padding - k) // stride + 1
    w_out = (x.shape[2] + 2 * padding - k) // stride + 1
    cols = im2col(x, k, stride, padding)
    out = (kernel.reshape(c_out, c_in * k * k) @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_dense(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dense 2-d cross-correlation of a (C_i, H, W) tensor with zero padding."""
    xa = as_array(x)
    if xa.ndim != 3:
        raise ShapeError(f"input must be (C, H, W), got shape {xa.shape}")
    if xa.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input has {xa.shape[0]} channels, kernel expects {spec.in_channels}"
        )
    spec.out_size(xa.shape[1], xa.shape[2])  # raises on non-positive output
    bias = spec.bias.data if spec.bias is not None else None
    out = conv2d_raw(xa, spec.kernel.data, bias, spec.stride, spec.padding)
    return Tensor(out).check_finite()


def softmax_raw(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, computed with max-subtraction for stability."""
    xa = as_array(x)
    if not np.all(np.isfinite(xa)):
        raise ValueError("softmax input must be finite")
    return Tensor(softmax_raw(xa, axis)).check_finite()


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate two tensors along one axis; all other axes must agree."""
    aa, ba = as_array(a), as_array(b)
    if aa.ndim != ba.ndim:
        raise ShapeError(f"rank mismatch: {aa.shape} vs {ba.shape}")
    ax = axis % aa.ndim
    for i, (da, db) in enumerate(zip(aa.shape, ba.shape)):
        if i != ax and da != db:
            raise ShapeError(
                f"shapes {aa.shape} and {ba.shape} differ on non-concat axis {i}"
            )
    return Tensor(np.concatenate([aa, ba], axis=ax))
