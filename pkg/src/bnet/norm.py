"""Normalization layers: BN, BNET-k, GN and GNET-k.

Every layer standardizes its input and then applies a recovery step. BN and
GN recover with a per-channel affine map ``gamma * xhat + beta``. The
enhanced variants (BNET, GNET) replace it with a depth-wise k x k
convolution whose bias plays the role of ``beta``; with ``k == 1`` the two
coincide.

The functional API (``normalize_train``, ``recover_bnet``, ``norm_backward``
...) operates on a :class:`NormLayer`, which owns the learned parameters,
running statistics and mode.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .conv import DepthwiseKernel, depthwise_conv2d, depthwise_conv2d_backward
from .tensor import TensorError, broadcast_channel, channel_mean_var, check_tensor


class NormError(ValueError):
    pass


@dataclass(frozen=True)
class NormKind:
    """Which normalizer and recovery a layer uses.

    ``family`` is one of ``bn``, ``bnet``, ``gn``, ``gnet``. ``k`` and
    ``dilation`` describe the recovery kernel of the enhanced families;
    ``groups`` is the GN group count (0 picks a divisor automatically).
    """

    family: str = "bn"
    k: int = 1
    dilation: int = 1
    groups: int = 0

    def __post_init__(self):
        if self.family not in ("bn", "bnet", "gn", "gnet"):
            raise NormError(f"unknown norm family {self.family!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise NormError("kernel size must be odd")
        if self.dilation < 1:
            raise NormError("dilation must be a positive integer")
        if not self.enhanced and (self.k != 1 or self.dilation != 1):
            raise NormError(f"{self.family} has no recovery kernel")

    @property
    def enhanced(self) -> bool:
        return self.family in ("bnet", "gnet")

    @property
    def batch_stats(self) -> bool:
        return self.family in ("bn", "bnet")

    @property
    def name(self) -> str:
        if not self.enhanced:
            return self.family
        s = f"{self.family}{self.k}"
        return s + (f"d{self.dilation}" if self.dilation != 1 else "")

    @classmethod
    def parse(cls, text: str) -> "NormKind":
        """Parse ``bn``, ``gn``, ``bnet3``, ``bnet3d2``, ``gnet3`` and friends."""
        m = re.fullmatch(r"(bnet|gnet|bn|gn)(\d+)?(?:d(\d+))?", text.strip().lower())
        if not m:
            raise NormError(f"cannot parse norm kind {text!r}")
        family, k, d = m.group(1), m.group(2), m.group(3)
        if family in ("bn", "gn") and (k or d):
            raise NormError(f"cannot parse norm kind {text!r}")
        if family in ("bnet", "gnet") and not k:
            k = "3"
        return cls(family, int(k or 1), int(d or 1))

    def base(self) -> "NormKind":
        """The plain normalizer of the same family (BNET -> BN, GNET -> GN)."""
        return NormKind("bn" if self.batch_stats else "gn", groups=self.groups)

    def enhance(self, k: int, dilation: int = 1) -> "NormKind":
        return NormKind("bnet" if self.batch_stats else "gnet", k, dilation, self.groups)


BN = NormKind("bn")
GN = NormKind("gn")


def default_groups(channels: int, preferred: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass
class NormCache:
    """Values saved by a forward pass for the matching backward pass."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    training: bool
    token: int
    mean: np.ndarray = field(default=None, repr=False)
    var: np.ndarray = field(default=None, repr=False)


class NormLayer:
    """State of one normalization layer plus forward/backward methods."""

    def __init__(self, kind: NormKind | str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float64, init: str = "identity", rng=None):
        if isinstance(kind, str):
            kind = NormKind.parse(kind)
        if channels < 1:
            raise NormError("channels must be positive")
        if not 0 < momentum <= 1:
            raise NormError("momentum must lie in (0, 1]")
        if eps < 0:
            raise NormError("epsilon must be non-negative")
        self.kind = kind
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.dtype = np.dtype(dtype)
        self.training = True
        self.groups = 0
        if not kind.batch_stats:
            self.groups = kind.groups or default_groups(channels)
            if channels % self.groups:
                raise NormError(f"{channels} channels not divisible into {self.groups} groups")

        self.gamma = self.beta = self.kernel = None
        if kind.enhanced:
            self.kernel = DepthwiseKernel.identity(channels, kind.k, kind.dilation, self.dtype)
            if init == "uniform":
                rng = rng if rng is not None else np.random.default_rng(0)
                bound = 1.0 / kind.k
                self.kernel.weight[...] = rng.uniform(-bound, bound, self.kernel.weight.shape)
                self.kernel.bias[...] = rng.uniform(-bound, bound, channels)
            elif init != "identity":
                raise NormError(f"unknown init {init!r}")
        else:
            self.gamma = np.ones(channels, dtype=self.dtype)
            self.beta = np.zeros(channels, dtype=self.dtype)

        self.running_mean = self.running_var = None
        if kind.batch_stats:
            self.running_mean = np.zeros(channels, dtype=self.dtype)
            self.running_var = np.ones(channels, dtype=self.dtype)

        self.grads: dict[str, np.ndarray] = {}
        self.cache: NormCache | None = None
        self._token = 0

    def __repr__(self):
        return f"NormLayer({self.kind.name}, channels={self.channels}, training={self.training})"

    @property
    def params(self) -> dict[str, np.ndarray]:
        if self.kernel is not None:
            return {"weight": self.kernel.weight, "bias": self.kernel.bias}
        return {"gamma": self.gamma, "beta": self.beta}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        if self.running_mean is None:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def train(self, mode: bool = True) -> "NormLayer":
        self.training = mode
        return self

    def eval(self) -> "NormLayer":
        return self.train(False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind.batch_stats:
            if self.training:
                x_hat, cache = normalize_train(x, self)
            else:
                x_hat, cache = _normalize_frozen(x, self)
        else:
            x_hat, cache = group_normalize(x, self)
        self.cache = cache
        return recover(x_hat, self)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        grad_x, self.grads = norm_backward(grad_y, self.cache, self)
        return grad_x

    __call__ = forward


def _check_input(x: np.ndarray, s: NormLayer) -> None:
    check_tensor(x, "x")
    if x.shape[1] != s.channels:
        raise NormError(f"layer has {s.channels} channels, input has {x.shape[1]}")


def _next_token(s: NormLayer) -> int:
    s._token += 1
    return s._token


def normalize_train(x: np.ndarray, s: NormLayer) -> tuple[np.ndarray, NormCache]:
    """Standardize with batch statistics and update the running averages."""
    if not s.kind.batch_stats:
        raise NormError("normalize_train applies to BN/BNET layers; use group_normalize")
    if not s.training:
        raise NormError("layer is in eval mode")
    _check_input(x, s)
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise NormError("degenerate batch: need at least 2 values per channel in train mode")
    try:
        mean, var = channel_mean_var(x)
    except TensorError as e:
        raise NormError(str(e)) from None
    denom = var + s.eps
    if np.any(denom <= 0):
        raise NormError("zero variance with eps=0")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = (x - broadcast_channel(mean)) * broadcast_channel(inv_std)
    m = s.dtype.type(s.momentum)
    s.running_mean *= 1 - m
    s.running_mean += m * mean
    s.running_var *= 1 - m
    s.running_var += m * var
    cache = NormCache(x_hat, inv_std, True, _next_token(s), mean, var)
    return x_hat, cache


def _normalize_frozen(x: np.ndarray, s: NormLayer) -> tuple[np.ndarray, NormCache]:
    _check_input(x, s)
    denom = s.running_var + s.eps
    if np.any(denom <= 0):
        raise NormError("running variance is zero and eps is 0")
    inv_std = (1.0 / np.sqrt(denom)).astype(x.dtype)
    x_hat = (x - broadcast_channel(s.running_mean.astype(x.dtype))) * broadcast_channel(inv_std)
    return x_hat, NormCache(x_hat, inv_std, False, _next_token(s))


def normalize_eval(x: np.ndarray, s: NormLayer) -> np.ndarray:
    """Standardize with the running statistics; each sample is independent."""
    if not s.kind.batch_stats:
        raise NormError("normalize_eval applies to BN/BNET layers; use group_normalize")
    if s.training:
        raise NormError("layer is in train mode")
    return _normalize_frozen(x, s)[0]


def group_normalize(x: np.ndarray, s: NormLayer) -> tuple[np.ndarray, NormCache]:
    """Standardize each (sample, group) slice over its channels and positions."""
    if s.kind.batch_stats:
        raise NormError("group_normalize applies to GN/GNET layers")
    _check_input(x, s)
    n, c, h, w = x.shape
    g = s.groups
    if (c // g) * h * w < 2:
        raise NormError("degenerate group: need at least 2 values per group")
    xg = x.reshape(n, g, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.mean(centered * centered, axis=2, keepdims=True)
    denom = var + s.eps
    if np.any(denom <= 0):
        raise NormError("zero variance with eps=0")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = (centered * inv_std).reshape(x.shape)
    return x_hat, NormCache(x_hat, inv_std, True, _next_token(s), mean[..., 0], var[..., 0])


def recover_bn(x_hat: np.ndarray, s: NormLayer) -> np.ndarray:
    if s.kind.enhanced:
        raise NormError(f"{s.kind.name} layer has no affine recovery")
    dt = x_hat.dtype
    return x_hat * broadcast_channel(s.gamma.astype(dt)) + broadcast_channel(s.beta.astype(dt))


def recover_bnet(x_hat: np.ndarray, s: NormLayer) -> np.ndarray:
    if not s.kind.enhanced:
        raise NormError(f"{s.kind.name} layer has no convolutional recovery")
    return depthwise_conv2d(x_hat, s.kernel)


def recover(x_hat: np.ndarray, s: NormLayer) -> np.ndarray:
    return recover_bnet(x_hat, s) if s.kind.enhanced else recover_bn(x_hat, s)


def norm_backward(grad_y: np.ndarray, cache: NormCache | None, s: NormLayer):
    """Gradients of ``sum(grad_y * y)`` through normalization and recovery.

    Returns ``(grad_x, grads)`` where ``grads`` maps parameter names to
    gradients. In train mode (and always for GN) the dependence of the
    statistics on ``x`` is included.
    """
    if cache is None or cache.token != s._token:
        raise NormError("stale or missing cache: backward must follow the matching forward")
    x_hat = cache.x_hat
    if grad_y.shape != x_hat.shape:
        raise NormError(f"grad shape {grad_y.shape} does not match {x_hat.shape}")
    if s.kind.enhanced:
        g_hat, gw, gb = depthwise_conv2d_backward(grad_y, x_hat, s.kernel)
        grads = {"weight": gw, "bias": gb}
    else:
        grads = {"gamma": np.einsum("nchw,nchw->c", grad_y, x_hat),
                 "beta": grad_y.sum(axis=(0, 2, 3))}
        g_hat = grad_y * broadcast_channel(s.gamma.astype(grad_y.dtype))

    if s.kind.batch_stats:
        inv_std = broadcast_channel(cache.inv_std)
        if not cache.training:
            return g_hat * inv_std, grads
        g_mean = g_hat.mean(axis=(0, 2, 3), keepdims=True)
        gx_mean = np.mean(g_hat * x_hat, axis=(0, 2, 3), keepdims=True)
        return inv_std * (g_hat - g_mean - x_hat * gx_mean), grads

    n = x_hat.shape[0]
    gh = g_hat.reshape(n, s.groups, -1)
    xh = x_hat.reshape(n, s.groups, -1)
    g_mean = gh.mean(axis=2, keepdims=True)
    gx_mean = np.mean(gh * xh, axis=2, keepdims=True)
    grad_x = cache.inv_std * (gh - g_mean - xh * gx_mean)
    return grad_x.reshape(x_hat.shape), grads
