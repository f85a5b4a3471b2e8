"""Dense NCHW tensors and the reductions shared by every layer.

Tensors are plain ``numpy.ndarray`` objects of rank 4 in batch, channel,
height, width order with dtype float32 or float64. Helpers in this module
validate that contract and provide the per-channel statistics and
elementwise maps the rest of the package builds on.
"""
from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class TensorError(ValueError):
    """Raised when a tensor violates the shape, dtype or finiteness contract."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise TensorError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise TensorError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate an NCHW float tensor and return it unchanged."""
    if not isinstance(x, np.ndarray):
        raise TensorError(f"{name}: expected numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise TensorError(f"{name}: expected rank 4 (n, c, h, w), got shape {x.shape}")
    resolve_dtype(x.dtype)
    return x


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise TensorError(f"{name}: non-finite values")
    return x


def channel_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the batch and spatial axes.

    The variance divides by the element count ``n*h*w`` (no Bessel
    correction). It is computed from centered values, which keeps it
    non-negative and accurate for inputs with a large common offset.
    """
    check_tensor(x, "x")
    n, c, h, w = x.shape
    if n * h * w == 0 or c == 0:
        raise TensorError("empty reduction")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = np.mean(centered * centered, axis=(0, 2, 3))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise TensorError("non-finite channel statistics")
    return mean, var


def broadcast_channel(v: np.ndarray) -> np.ndarray:
    """View a length-c vector as (1, c, 1, 1) for per-channel arithmetic."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise TensorError(f"per-channel vector must be rank 1, got shape {v.shape}")
    return v[None, :, None, None]


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def map_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise TensorError(f"unknown binary op {op!r}") from None
    return fn(a, b)


def map_unary(a: np.ndarray, op: str, scale: float | None = None) -> np.ndarray:
    """Apply ``scale``, ``relu`` or ``relu_grad`` elementwise."""
    if op == "scale":
        if scale is None:
            raise TensorError("scale op needs a factor")
        return (a * a.dtype.type(scale)).astype(a.dtype, copy=False)
    if op == "relu":
        return np.maximum(a, a.dtype.type(0))
    if op == "relu_grad":
        return (a > 0).astype(a.dtype)
    raise TensorError(f"unknown unary op {op!r}")
