"""Convolution kernels: depth-wise (same padding, stride 1) and standard 2-D.

All kernels compute cross-correlation with zero padding. Depth-wise
convolution is evaluated tap by tap over a padded copy of the input so the
per-pixel accumulation order is fixed (taps in row-major order, bias last).
Standard convolution uses an im2col layout and a single matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import TensorError, check_tensor


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    span = dilation * (k - 1) + 1
    out = (size + 2 * padding - span) // stride + 1
    if out < 1:
        raise TensorError(f"kernel span {span} does not fit input {size} with padding {padding}")
    return out


@dataclass
class DepthwiseKernel:
    """Per-channel k x k filter with bias and dilation; padding keeps the size."""

    weight: np.ndarray  # (c, k, k)
    bias: np.ndarray  # (c,)
    dilation: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise TensorError(f"depth-wise weight must have shape (c, k, k), got {w.shape}")
        if w.shape[1] % 2 == 0:
            raise TensorError("kernel size must be odd")
        if self.dilation < 1:
            raise TensorError("dilation must be a positive integer")
        b = np.asarray(self.bias)
        if b.shape != (w.shape[0],):
            raise TensorError(f"bias shape {b.shape} does not match {w.shape[0]} channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise TensorError("depth-wise kernel has non-finite values")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[1]

    @property
    def padding(self) -> int:
        return self.dilation * (self.k - 1) // 2

    @classmethod
    def identity(cls, channels: int, k: int, dilation: int = 1, dtype=np.float64) -> "DepthwiseKernel":
        """Center tap 1, everything else 0: reproduces its input exactly."""
        w = np.zeros((channels, k, k), dtype=dtype)
        w[:, k // 2, k // 2] = 1
        return cls(w, np.zeros(channels, dtype=dtype), dilation)


def _check_depthwise(x: np.ndarray, kern: DepthwiseKernel) -> None:
    check_tensor(x, "x")
    if x.shape[1] != kern.channels:
        raise TensorError(f"channel mismatch: input has {x.shape[1]}, kernel has {kern.channels}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise TensorError("empty spatial extent")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def depthwise_conv2d(x: np.ndarray, kern: DepthwiseKernel) -> np.ndarray:
    _check_depthwise(x, kern)
    n, c, h, w = x.shape
    k, d, p = kern.k, kern.dilation, kern.padding
    weight = kern.weight.astype(x.dtype, copy=False)
    xp = _pad(x, p)
    y = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            tap = weight[:, u, v][None, :, None, None]
            y += tap * xp[:, :, u * d:u * d + h, v * d:v * d + w]
    y += kern.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return y


def depthwise_conv2d_backward(grad_y: np.ndarray, x: np.ndarray, kern: DepthwiseKernel):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``L = sum(grad_y * y)``."""
    _check_depthwise(x, kern)
    if grad_y.shape != x.shape:
        raise TensorError(f"grad shape {grad_y.shape} does not match input {x.shape}")
    n, c, h, w = x.shape
    k, d, p = kern.k, kern.dilation, kern.padding
    weight = kern.weight.astype(x.dtype, copy=False)
    xp = _pad(x, p)
    gxp = np.zeros_like(xp)
    grad_w = np.empty((c, k, k), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            win = (slice(None), slice(None), slice(u * d, u * d + h), slice(v * d, v * d + w))
            grad_w[:, u, v] = np.einsum("nchw,nchw->c", grad_y, xp[win])
            gxp[win] += weight[:, u, v][None, :, None, None] * grad_y
    grad_x = gxp[:, :, p:p + h, p:p + w] if p else gxp
    grad_b = grad_y.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int, padding: int):
    check_tensor(x, "x")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise TensorError(f"conv weight must be (c_out, c_in, k, k), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise TensorError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")
    if stride < 1 or padding < 0:
        raise TensorError("stride must be >= 1 and padding >= 0")
    k = weight.shape[2]
    return (conv_output_size(x.shape[2], k, stride, padding),
            conv_output_size(x.shape[3], k, stride, padding))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (c*k*k, n*ho*wo) column matrix."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, n, ho, wo),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride), writeable=False)
    return view.reshape(c * k * k, n * ho * wo)


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    ho, wo = _check_conv(x, weight, stride, padding)
    n = x.shape[0]
    c_out, c_in, k, _ = weight.shape
    weight = weight.astype(x.dtype, copy=False)
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        y = np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], xs, optimize=True)
        return np.ascontiguousarray(y)
    cols = _im2col(_pad(x, padding), k, stride, ho, wo)
    y = weight.reshape(c_out, -1) @ cols
    return np.ascontiguousarray(y.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d_backward(grad_y: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Return ``(grad_x, grad_weight)``."""
    ho, wo = _check_conv(x, weight, stride, padding)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    if grad_y.shape != (n, c_out, ho, wo):
        raise TensorError(f"grad shape {grad_y.shape} does not match output {(n, c_out, ho, wo)}")
    weight = weight.astype(x.dtype, copy=False)
    if k == 1 and padding == 0:
        w2 = weight[:, :, 0, 0]
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        grad_w = np.einsum("nohw,nchw->oc", grad_y, xs, optimize=True)[:, :, None, None]
        gxs = np.einsum("oc,nohw->nchw", w2, grad_y, optimize=True)
        if stride > 1:
            grad_x = np.zeros_like(x)
            grad_x[:, :, ::stride, ::stride] = gxs
        else:
            grad_x = np.ascontiguousarray(gxs)
        return grad_x, grad_w
    xp = _pad(x, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    gy = grad_y.transpose(1, 0, 2, 3).reshape(c_out, -1)
    grad_w = (gy @ cols.T).reshape(weight.shape)
    gcols = (weight.reshape(c_out, -1).T @ gy).reshape(c_in, k, k, n, ho, wo)
    gxp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                gcols[:, u, v].transpose(1, 0, 2, 3)
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return np.ascontiguousarray(grad_x), grad_w
