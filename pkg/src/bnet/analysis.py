"""Cost counting, finite-difference gradient checks and enhancement heatmaps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .layers import ReLU
from .model import GraphError, LayerGraph, Network
from .norm import NormLayer

# ---------------------------------------------------------------------------
# parameter / FLOP accounting
# ---------------------------------------------------------------------------


@dataclass
class LayerCost:
    name: str
    op: str
    out_shape: tuple
    params: int
    macs: int
    all_ops: int
    is_norm: bool


@dataclass
class CostReport:
    """Per-layer costs and totals. One MAC is counted as one FLOP."""

    arch: str
    input_hw: tuple
    layers: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_all_ops(self) -> int:
        """MACs plus one op per element for relu, add and pooling."""
        return sum(l.all_ops for l in self.layers)

    @property
    def norm_params(self) -> int:
        return sum(l.params for l in self.layers if l.is_norm)

    @property
    def norm_macs(self) -> int:
        return sum(l.macs for l in self.layers if l.is_norm)

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def summary(self) -> str:
        return (f"{self.arch} @ {self.input_hw[0]}x{self.input_hw[1]}: "
                f"params {self.params_m:.1f} M ({self.total_params}), "
                f"GFLOPs {self.gflops:.1f} ({self.total_macs} MACs), "
                f"norm share {self.norm_params} params / {self.norm_macs} MACs")

    def table(self) -> str:
        rows = [("layer", "op", "output", "params", "MACs")]
        for l in self.layers:
            rows.append((l.name, l.op, "x".join(map(str, l.out_shape)), str(l.params), str(l.macs)))
        rows.append(("total", "", "", str(self.total_params), str(self.total_macs)))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = []
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "op", "out_c", "out_h", "out_w", "params", "macs", "all_ops", "norm"])
        for l in self.layers:
            wr.writerow([l.name, l.op, *l.out_shape, l.params, l.macs, l.all_ops, int(l.is_norm)])
        wr.writerow(["total", "", "", "", "", self.total_params, self.total_macs,
                     self.total_all_ops, ""])
        return buf.getvalue()


def _layer_macs(node) -> tuple[int, int]:
    c, h, w = node.out_shape
    elems = c * h * w
    a = node.attrs
    if node.op == "conv":
        k = a["k"]
        macs = k * k * a["c_in"] * a["c_out"] * h * w
        return macs, macs
    if node.op == "linear":
        macs = a["c_in"] * a["c_out"]
        return macs, macs
    if node.op == "norm":
        k = a["kind"].k
        macs = k * k * elems
        return macs, macs
    if node.op == "dwconv":
        macs = a["k"] ** 2 * elems
        return macs, macs
    if node.op == "maxpool":
        return 0, a["k"] ** 2 * elems
    if node.op == "gap":
        ci, hi, wi = node.in_shape
        return 0, ci * hi * wi
    if node.op in ("relu", "add"):
        return 0, elems
    raise GraphError(f"cannot cost op {node.op!r}")


def _report(graph: LayerGraph) -> CostReport:
    for node in graph:
        if any(d < 1 for d in node.out_shape):
            raise GraphError(f"{node.name}: unresolved output shape {node.out_shape}")
    rep = CostReport(graph.arch, tuple(graph.input_shape[1:]))
    for node in graph:
        macs, all_ops = _layer_macs(node)
        rep.layers.append(LayerCost(node.name, node.op, tuple(node.out_shape), node.param_count,
                                    macs, all_ops, node.op == "norm"))
    return rep


def count_params(graph: LayerGraph) -> CostReport:
    return _report(graph)


def count_flops(graph: LayerGraph, input_hw=None) -> CostReport:
    """Costs at the graph's resolution, or rebuilt at ``input_hw`` if given.

    Rebuilding needs the graph to come from one of the builders; pass a graph
    constructed at the wanted resolution otherwise.
    """
    if input_hw is not None:
        hw = (input_hw, input_hw) if np.isscalar(input_hw) else tuple(input_hw)
        if tuple(graph.input_shape[1:]) != hw:
            raise GraphError(f"graph was built for {graph.input_shape[1:]}, not {hw}; rebuild it")
    return _report(graph)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Normwise relative error per checked tensor and the overall maximum.

    ``table`` maps a tensor name to ``(entries checked, relative error,
    worst single-entry relative error)``. Only the normwise figure is a
    pass/fail quantity; the per-entry one is diagnostic, since entries far
    below the loss rounding level (about eps * |loss| / step) cannot be
    resolved by any step size.
    """

    max_rel_err: float
    table: dict
    kinks: int = 0

    def __str__(self):
        lines = [f"{name:<40s} {n:6d}  {err:.3e}  {entry:.3e}"
                 for name, (n, err, entry) in self.table.items()]
        lines.append(f"kink-straddling entries skipped: {self.kinks}")
        lines.append(f"max_rel_err {self.max_rel_err:.3e}")
        return "\n".join(lines)


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """|a - n| / (|a| + |n| + 1e-12) with |.| the Euclidean norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / (np.linalg.norm(a) + np.linalg.norm(n) + 1e-12))


def _relu_masks(net: Network):
    return [layer._mask for layer in net.layers.values() if isinstance(layer, ReLU)]


def grad_check(net: Network, x: np.ndarray, labels: np.ndarray, step: float = 1e-6,
               max_entries: int | None = None, seed: int = 0,
               kink_retries: int = 3) -> GradCheckReport:
    """Compare backprop gradients with central differences of the training loss.

    The loss is mean softmax cross-entropy in the network's current mode.
    Running statistics are restored before each evaluation so every loss
    sees the same state. Every entry of every parameter and of the input is
    differenced unless ``max_entries`` caps the count per tensor, in which
    case a seeded random subset is checked.

    A difference quotient is meaningless when the two perturbed evaluations
    sit on opposite sides of a ReLU kink. Such entries are retried with a
    step ten times smaller, up to ``kink_retries`` times; entries that still
    straddle a kink are left out of the comparison and counted in
    ``report.kinks``.
    """
    from .losses import softmax_cross_entropy

    if net.dtype != np.float64:
        raise ValueError("gradient checks need a float64 network")
    x = np.array(x, dtype=np.float64)
    buffers = {k: v.copy() for k, v in net.buffers().items()}

    def restore():
        for k, v in net.buffers().items():
            v[...] = buffers[k]

    def loss():
        restore()
        val, _ = softmax_cross_entropy(net.forward(x), labels)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss")
        return val, [m.copy() for m in _relu_masks(net)]

    restore()
    val, g = softmax_cross_entropy(net.forward(x), labels)
    if not np.isfinite(val):
        raise FloatingPointError("non-finite loss")
    grad_x = net.backward(g)
    analytic = {k: v.copy() for k, v in net.gradients().items()}
    analytic["input"] = grad_x

    rng = np.random.default_rng(seed)
    targets = dict(net.parameters())
    targets["input"] = x
    table = {}
    kinks = 0
    for name, arr in targets.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        keep, num = [], []
        for i in idx:
            orig = flat[i]
            h = step
            for _ in range(kink_retries + 1):
                flat[i] = orig + h
                fp, mp = loss()
                flat[i] = orig - h
                fm, mm = loss()
                flat[i] = orig
                if all(np.array_equal(a, b) for a, b in zip(mp, mm)):
                    keep.append(i)
                    num.append((fp - fm) / (2 * h))
                    break
                h /= 10
            else:
                kinks += 1
        a = analytic[name].reshape(-1)[keep]
        num = np.asarray(num)
        entry = float((np.abs(a - num) / (np.abs(a) + np.abs(num) + 1e-12)).max()) if keep else 0.0
        table[name] = (len(keep), relative_error(a, num), entry)
    restore()
    return GradCheckReport(max(e for _, e, _ in table.values()), table, kinks)


# ---------------------------------------------------------------------------
# enhancement heatmaps
# ---------------------------------------------------------------------------


@dataclass
class Heatmap:
    """Per-position count of channels whose output beats its linear fit."""

    counts: np.ndarray  # (h, w) ints
    layer: str
    channels: int
    skipped: list = field(default_factory=list)
    slopes: np.ndarray | None = None
    intercepts: np.ndarray | None = None

    @property
    def shape(self):
        return self.counts.shape

    def to_csv(self) -> str:
        return "".join(",".join(str(int(v)) for v in row) + "\n" for row in self.counts)

    def to_pgm(self) -> str:
        h, w = self.counts.shape
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in self.counts)
        return f"P2\n{w} {h}\n{max(self.channels, 1)}\n{body}\n"


def fit_lines(x: np.ndarray, y: np.ndarray):
    """Closed-form least squares ``y ~ a * x + b`` per row of (c, m) arrays.

    Returns ``(a, b, degenerate)`` where ``degenerate`` marks rows whose
    ``x`` has zero variance (their ``a``, ``b`` are set to nan).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx = x.mean(axis=1, keepdims=True)
    my = y.mean(axis=1, keepdims=True)
    dx, dy = x - mx, y - my
    sxx = np.sum(dx * dx, axis=1)
    sxy = np.sum(dx * dy, axis=1)
    degenerate = sxx <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(degenerate, np.nan, sxy / np.where(degenerate, 1.0, sxx))
    b = my[:, 0] - a * mx[:, 0]
    return a, b, degenerate


def enhancement_heatmap(net: Network, image: np.ndarray, layer: str) -> Heatmap:
    """Where a BNET/GNET layer's recovery exceeds a per-channel linear fit.

    The network runs in eval mode on a single image. For every channel of
    ``layer`` the normalized inputs and recovered outputs over all spatial
    positions are fitted with a least-squares line; a position counts for a
    channel when the output lies strictly above the line. Residuals within
    the dtype's rounding level of the fit count as ties (not enhanced), so
    an exactly affine recovery always yields an all-zero map.
    """
    node = net.graph.node(layer)
    if node.op != "norm" or not node.attrs["kind"].enhanced:
        raise GraphError(f"{layer!r} is not a BNET/GNET layer")
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1 or image.shape[1:] != tuple(net.graph.input_shape):
        raise GraphError(f"image shape {image.shape} does not match network input {net.graph.input_shape}")
    mode = net.training
    net.eval()
    try:
        _, acts = net.forward(image, keep=True)
        norm: NormLayer = net.layers[layer]
        x_in = acts[node.inputs[0]]
        if norm.kind.batch_stats:
            from .norm import normalize_eval
            x_hat = normalize_eval(x_in, norm)
        else:
            from .norm import group_normalize
            x_hat = group_normalize(x_in, norm)[0]
        y = acts[layer]
    finally:
        net.train(mode)
    c, h, w = y.shape[1:]
    xs = x_hat[0].reshape(c, -1).astype(np.float64)
    ys = y[0].reshape(c, -1).astype(np.float64)
    a, b, degenerate = fit_lines(xs, ys)
    fit = a[:, None] * xs + b[:, None]
    resid = ys - fit
    eps = np.finfo(y.dtype).eps
    scale = np.abs(ys).max(axis=1) + np.abs(a * xs.T).max(axis=0) + np.abs(b)
    tol = 64 * eps * np.where(degenerate, 0.0, scale)
    enhanced = (resid > tol[:, None]) & ~degenerate[:, None]
    counts = enhanced.sum(axis=0).reshape(h, w).astype(np.int64)
    return Heatmap(counts, layer, c, np.flatnonzero(degenerate).tolist(), a, b)
