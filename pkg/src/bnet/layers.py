"""Executable layers with manual backward passes.

Each layer exposes ``forward(*inputs)``, ``backward(grad)`` returning one
gradient per input, a ``params`` dict of learned arrays and a ``grads`` dict
filled by ``backward``. Parameters are updated in place by the optimizer.
"""
from __future__ import annotations

import numpy as np

from .conv import (DepthwiseKernel, conv2d, conv2d_backward, conv_output_size,
                   depthwise_conv2d, depthwise_conv2d_backward)
from .tensor import TensorError


class Layer:
    params: dict = {}
    buffers: dict = {}

    def __init__(self):
        self.grads = {}
        self.training = True

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)


class Conv2d(Layer):
    def __init__(self, weight: np.ndarray, stride: int = 1, padding: int = 0):
        super().__init__()
        self.weight = weight
        self.stride = stride
        self.padding = padding
        self.params = {"weight": weight}

    def forward(self, x):
        self._x = x
        return conv2d(x, self.weight, self.stride, self.padding)

    def backward(self, g):
        gx, gw = conv2d_backward(g, self._x, self.weight, self.stride, self.padding)
        self.grads = {"weight": gw}
        return (gx,)


class DepthwiseConv2d(Layer):
    """Stand-alone depth-wise convolution with bias (same padding, stride 1)."""

    def __init__(self, kernel: DepthwiseKernel):
        super().__init__()
        self.kernel = kernel
        self.params = {"weight": kernel.weight, "bias": kernel.bias}

    def forward(self, x):
        self._x = x
        return depthwise_conv2d(x, self.kernel)

    def backward(self, g):
        gx, gw, gb = depthwise_conv2d_backward(g, self._x, self.kernel)
        self.grads = {"weight": gw, "bias": gb}
        return (gx,)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, g):
        return (np.where(self._mask, g, g.dtype.type(0)),)


class Add(Layer):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise TensorError(f"residual operands differ: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, g):
        return (g, g)


class MaxPool2d(Layer):
    def __init__(self, k: int = 3, stride: int = 2, padding: int = 1):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x):
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        sn, sc, sh, sw = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp, (n, c, ho, wo, k, k), (sn, sc, sh * s, sw * s, sh, sw), writeable=False)
        flat = win.reshape(n, c, ho, wo, k * k)
        self._arg = flat.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self._shape
        k, s, p = self.k, self.stride, self.padding
        gp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        ho, wo = g.shape[2:]
        du, dv = np.divmod(self._arg, k)
        rows = du + (np.arange(ho) * s)[None, None, :, None]
        cols = dv + (np.arange(wo) * s)[None, None, None, :]
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gp, (ni, ci, rows, cols), g)
        return (np.ascontiguousarray(gp[:, :, p:p + h, p:p + w]),)


class GlobalAvgPool(Layer):
    """(n, c, h, w) -> (n, c, 1, 1)."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, g):
        n, c, h, w = self._shape
        return (np.broadcast_to(g / (h * w), self._shape).copy(),)


class Linear(Layer):
    """Fully connected layer on (n, c, 1, 1) features; output (n, out, 1, 1)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        self.weight, self.bias = weight, bias
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x):
        self._x = x.reshape(x.shape[0], -1)
        y = self._x @ self.weight.T + self.bias
        return y[:, :, None, None]

    def backward(self, g):
        g2 = g.reshape(g.shape[0], -1)
        self.grads = {"weight": g2.T @ self._x, "bias": g2.sum(axis=0)}
        gx = g2 @ self.weight
        return (gx.reshape(gx.shape[0], -1, 1, 1),)
