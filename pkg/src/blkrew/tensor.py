"""Dense GEMM kernels and convolution lowering.

Arrays are plain ``numpy.float64`` ndarrays in C (row-major) order. The GEMM
here accumulates over the inner dimension in ascending order so every output
element is a fixed sequential sum; results are bit-reproducible and can be
compared exactly against a naive triple loop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def as_matrix(a, name: str = "operand") -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def gemm(a, b, out: np.ndarray | None = None) -> np.ndarray:
    """Return ``a @ b`` summed over k = 0, 1, ..., K-1 in that order.

    Each step adds the rank-1 product of column k of ``a`` and row k of ``b``
    to the accumulator, so element (i, j) is
    ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)`` exactly, independent of how the
    rows of ``a`` are split between callers.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    if out is None:
        out = np.zeros((m, n))
    else:
        if out.shape != (m, n):
            raise ShapeError(f"out has shape {out.shape}, expected {(m, n)}")
        out[...] = 0.0
    if m == 0 or n == 0:
        return out
    tmp = np.empty((m, n))
    for kk in range(k):
        np.multiply(a[:, kk, None], b[kk], out=tmp)
        out += tmp
    return out


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel dims must be >= 1")
        if min(self.in_channels, self.out_channels, self.padding) < 0:
            raise ValueError("channel counts and padding must be nonnegative")

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ph = h + 2 * self.padding
        pw = w + 2 * self.padding
        if self.kernel_h > ph or self.kernel_w > pw:
            raise ShapeError(
                f"{self.kernel_h}x{self.kernel_w} window larger than padded input {ph}x{pw}"
            )
        return (ph - self.kernel_h) // self.stride + 1, (pw - self.kernel_w) // self.stride + 1


def _check_input(x, spec: ConvSpec) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"expected input of shape ({spec.in_channels}, H, W), got {x.shape}")
    return x


def im2col(x, spec: ConvSpec) -> np.ndarray:
    """Lower a C x H x W input to a (C*kh*kw) x (out_h*out_w) patch matrix.

    Row index is ``(c*kh + dy)*kw + dx``; column index is ``oy*out_w + ox``.
    """
    x = _check_input(x, spec)
    c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    p, s = spec.padding, spec.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, spec.kernel_h, spec.kernel_w, oh, ow))
    for dy in range(spec.kernel_h):
        for dx in range(spec.kernel_w):
            cols[:, dy, dx] = xp[:, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s]
    return cols.reshape(spec.patch_size, oh * ow)


def col2im(cols, spec: ConvSpec, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to C x H x W."""
    oh, ow = spec.output_hw(h, w)
    cols = np.asarray(cols, dtype=np.float64)
    if cols.shape != (spec.patch_size, oh * ow):
        raise ShapeError(f"cols has shape {cols.shape}, expected {(spec.patch_size, oh * ow)}")
    p, s = spec.padding, spec.stride
    xp = np.zeros((spec.in_channels, h + 2 * p, w + 2 * p))
    cols = cols.reshape(spec.in_channels, spec.kernel_h, spec.kernel_w, oh, ow)
    for dy in range(spec.kernel_h):
        for dx in range(spec.kernel_w):
            xp[:, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s] += cols[:, dy, dx]
    return xp[:, p:p + h, p:p + w].copy()


def conv2d_gemm(x, weights, spec: ConvSpec) -> np.ndarray:
    """Convolve via ``gemm(weights, im2col(x))``.

    ``weights`` is the GEMM form: one row per output channel (filter), one
    column per (input channel, kernel row, kernel column).
    """
    x = _check_input(x, spec)
    weights = as_matrix(weights, "weights")
    if weights.shape != (spec.out_channels, spec.patch_size):
        raise ShapeError(
            f"weights have shape {weights.shape}, expected {(spec.out_channels, spec.patch_size)}"
        )
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    return gemm(weights, im2col(x, spec)).reshape(spec.out_channels, oh, ow)
