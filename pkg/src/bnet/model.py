"""Network descriptions (LayerGraph), architecture builders and an executor.

A :class:`LayerGraph` is an ordered list of :class:`Node` records. Each node
names its inputs, carries per-sample input/output shapes ``(c, h, w)`` and the
shapes of its learned parameters, so the same description serves both for
pure shape-level counting and, through :class:`Network`, for execution.

Norm slots inside residual blocks are labeled ``A``, ``B``, ``C`` (bottleneck:
after the first 1x1, the 3x3 and the expanding 1x1 conv). Basic blocks have
slots ``A`` and ``C``, ``C`` being the last norm of the block.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .conv import DepthwiseKernel, conv_output_size
from .layers import Add, Conv2d, DepthwiseConv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU
from .norm import BN, NormKind, NormLayer, default_groups
from .tensor import resolve_dtype

SLOTS = ("A", "B", "C")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    name: str
    op: str  # conv, norm, relu, dwconv, add, maxpool, gap, linear
    inputs: tuple
    in_shape: tuple
    out_shape: tuple
    params: dict = field(default_factory=dict, hash=False, compare=False)
    attrs: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.params.values())


@dataclass
class LayerGraph:
    nodes: list
    input_shape: tuple
    arch: str = ""
    plugins: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def node(self, name: str) -> Node:
        try:
            return self._index[name]
        except KeyError:
            raise GraphError(f"no layer named {name!r}") from None

    @property
    def output_shape(self) -> tuple:
        return self.nodes[-1].out_shape

    def norm_nodes(self) -> list:
        return [n for n in self.nodes if n.op == "norm"]

    def param_count(self) -> int:
        return sum(n.param_count for n in self.nodes)

    def validate(self) -> "LayerGraph":
        """Check the shape chain, residual operands and block slot labels."""
        shapes = {"input": tuple(self.input_shape)}
        for n in self.nodes:
            for src in n.inputs:
                if src not in shapes:
                    raise GraphError(f"{n.name}: unknown input {src!r}")
            if shapes[n.inputs[0]] != tuple(n.in_shape):
                raise GraphError(f"{n.name}: input shape {shapes[n.inputs[0]]} != declared {n.in_shape}")
            if n.op == "add" and shapes[n.inputs[0]] != shapes[n.inputs[1]]:
                raise GraphError(f"{n.name}: residual operands differ")
            if n.name in shapes:
                raise GraphError(f"duplicate layer name {n.name!r}")
            shapes[n.name] = tuple(n.out_shape)
        blocks: dict = {}
        for n in self.norm_nodes():
            if n.attrs.get("block"):
                blocks.setdefault((n.attrs["block"], n.attrs["block_type"]), []).append(n.attrs["slot"])
        for (name, btype), slots in blocks.items():
            want = list(SLOTS) if btype == "bottleneck" else ["A", "C"]
            if sorted(slots) != want:
                raise GraphError(f"block {name} has norm slots {slots}, expected {want}")
        return self


def parse_positions(positions) -> frozenset:
    if isinstance(positions, str):
        positions = [p for p in positions.replace(",", "").upper()]
    out = frozenset(p.upper() for p in positions)
    if not out or not out <= set(SLOTS):
        raise GraphError(f"plug-in positions must be a non-empty subset of A, B, C; got {positions!r}")
    return out


class _Builder:
    def __init__(self, input_shape):
        self.nodes: list = []
        self.cur = "input"
        self.shape = tuple(input_shape)
        self.shapes = {"input": self.shape}

    def _add(self, name, op, out_shape, inputs=None, params=None, **attrs):
        inputs = tuple(inputs or (self.cur,))
        node = Node(name, op, inputs, self.shapes[inputs[0]], tuple(out_shape), params or {}, attrs)
        self.nodes.append(node)
        self.shapes[name] = node.out_shape
        self.cur, self.shape = name, node.out_shape
        return name

    def conv(self, name, c_out, k, stride=1, padding=None):
        c, h, w = self.shape
        padding = (k - 1) // 2 if padding is None else padding
        out = (c_out, conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding))
        return self._add(name, "conv", out, params={"weight": (c_out, c, k, k)},
                         k=k, stride=stride, padding=padding, c_in=c, c_out=c_out)

    def norm(self, name, kind: NormKind, slot=None, block=None, block_type=None):
        c = self.shape[0]
        if kind.enhanced:
            params = {"weight": (c, kind.k, kind.k), "bias": (c,)}
        else:
            params = {"gamma": (c,), "beta": (c,)}
        if not kind.batch_stats and c % (kind.groups or default_groups(c)):
            raise GraphError(f"{name}: {c} channels not divisible into {kind.groups} groups")
        return self._add(name, "norm", self.shape, params=params, kind=kind,
                         slot=slot, block=block, block_type=block_type)

    def relu(self, name):
        return self._add(name, "relu", self.shape)

    def dwconv(self, name, k=3, dilation=1):
        c = self.shape[0]
        return self._add(name, "dwconv", self.shape, params={"weight": (c, k, k), "bias": (c,)},
                         k=k, dilation=dilation)

    def add(self, name, a, b):
        return self._add(name, "add", self.shapes[a], inputs=(a, b))

    def maxpool(self, name, k=3, stride=2, padding=1):
        c, h, w = self.shape
        out = (c, conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding))
        return self._add(name, "maxpool", out, k=k, stride=stride, padding=padding)

    def gap(self, name):
        return self._add(name, "gap", (self.shape[0], 1, 1))

    def linear(self, name, out):
        c = self.shape[0] * self.shape[1] * self.shape[2]
        return self._add(name, "linear", (out, 1, 1), params={"weight": (out, c), "bias": (out,)},
                         c_in=c, c_out=out)

    def bottleneck(self, prefix, width, stride, norm_map, base, expansion=4, extra_conv=False):
        entry = self.cur
        c_in = self.shape[0]
        c_out = width * expansion
        kw = dict(block=prefix, block_type="bottleneck")
        self.conv(f"{prefix}.conv1", width, 1, padding=0)
        self.norm(f"{prefix}.normA", norm_map["A"], slot="A", **kw)
        self.relu(f"{prefix}.relu1")
        self.conv(f"{prefix}.conv2", width, 3, stride=stride, padding=1)
        self.norm(f"{prefix}.normB", norm_map["B"], slot="B", **kw)
        self.relu(f"{prefix}.relu2")
        self.conv(f"{prefix}.conv3", c_out, 1, padding=0)
        self.norm(f"{prefix}.normC", norm_map["C"], slot="C", **kw)
        if extra_conv:
            self.relu(f"{prefix}.relu_extra")
            self.dwconv(f"{prefix}.dwconv", 3)
        main = self.cur
        skip = entry
        if stride != 1 or c_in != c_out:
            self.cur, self.shape = entry, self.shapes[entry]
            self.conv(f"{prefix}.downsample.conv", c_out, 1, stride=stride, padding=0)
            skip = self.norm(f"{prefix}.downsample.norm", base)
        self.add(f"{prefix}.add", main, skip)
        return self.relu(f"{prefix}.relu3")

    def basic(self, prefix, width, stride, norm_map, base, extra_conv=False):
        entry = self.cur
        c_in = self.shape[0]
        kw = dict(block=prefix, block_type="basic")
        self.conv(f"{prefix}.conv1", width, 3, stride=stride, padding=1)
        self.norm(f"{prefix}.normA", norm_map["A"], slot="A", **kw)
        self.relu(f"{prefix}.relu1")
        self.conv(f"{prefix}.conv2", width, 3, padding=1)
        self.norm(f"{prefix}.normC", norm_map["C"], slot="C", **kw)
        if extra_conv:
            self.relu(f"{prefix}.relu_extra")
            self.dwconv(f"{prefix}.dwconv", 3)
        main = self.cur
        skip = entry
        if stride != 1 or c_in != width:
            self.cur, self.shape = entry, self.shapes[entry]
            self.conv(f"{prefix}.downsample.conv", width, 1, stride=stride, padding=0)
            skip = self.norm(f"{prefix}.downsample.norm", base)
        self.add(f"{prefix}.add", main, skip)
        return self.relu(f"{prefix}.relu2")


def _norm_map(kind: NormKind, positions) -> tuple[dict, NormKind]:
    base = kind.base() if kind.enhanced else kind
    pos = parse_positions(positions)
    return {s: (kind if s in pos else base) for s in SLOTS}, base


def build_bottleneck_block(width: int, norm_map: dict, in_channels: int | None = None,
                           stride: int = 1, input_hw=(56, 56), expansion: int = 4,
                           extra_conv: bool = False) -> LayerGraph:
    """A single bottleneck block as a stand-alone graph.

    ``norm_map`` maps each of ``A``, ``B``, ``C`` to a :class:`NormKind` (or
    its string form). The projection shortcut, when needed, uses BN.
    """
    if width < 1:
        raise GraphError("width must be >= 1")
    missing = [s for s in SLOTS if s not in norm_map]
    if missing:
        raise GraphError(f"norm map is missing slots {missing}")
    nm = {s: NormKind.parse(v) if isinstance(v, str) else v for s, v in norm_map.items()}
    c_in = in_channels if in_channels is not None else width * expansion
    b = _Builder((c_in, *input_hw))
    b.bottleneck("block", width, stride, nm, nm["A"].base(), expansion, extra_conv)
    return LayerGraph(b.nodes, b.shapes["input"], "bottleneck",
                      {s: nm[s].name for s in SLOTS}).validate()


def build_mini_resnet(depths=(2, 2, 2), base_width: int = 16, norm_kind: NormKind | str = BN,
                      positions="C", num_classes: int = 10, input_hw: int = 32,
                      in_channels: int = 3, extra_conv: bool = False) -> LayerGraph:
    """Desk-scale bottleneck ResNet: 3x3 stem, bottleneck stages, pooled linear head.

    Stage ``i`` has width ``base_width * 2**i``; stages after the first start
    with a stride-2 block. Enhanced norms go only into the slots named by
    ``positions``; every other norm uses the plain family.
    """
    if isinstance(norm_kind, str):
        norm_kind = NormKind.parse(norm_kind)
    if base_width < 1 or not depths or any(d < 1 for d in depths):
        raise GraphError("base_width and every stage depth must be >= 1")
    if num_classes < 2 or input_hw < 1:
        raise GraphError("need at least 2 classes and a positive input size")
    nm, base = _norm_map(norm_kind, positions)
    b = _Builder((in_channels, input_hw, input_hw))
    b.conv("stem.conv", base_width, 3, padding=1)
    b.norm("stem.norm", base)
    b.relu("stem.relu")
    for i, depth in enumerate(depths):
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0) else 1
            b.bottleneck(f"stage{i + 1}.block{j + 1}", base_width * 2 ** i, stride, nm, base,
                         extra_conv=extra_conv)
    b.gap("pool")
    b.linear("fc", num_classes)
    plugins = {s: k.name for s, k in nm.items()}
    if extra_conv:
        plugins["extra"] = "dwconv3"
    return LayerGraph(b.nodes, b.shapes["input"], "mini", plugins).validate()


def build_bn_plus_conv_variant(depths=(2, 2, 2), base_width: int = 16, num_classes: int = 10,
                               input_hw: int = 32, in_channels: int = 3) -> LayerGraph:
    """BN everywhere plus a relu and 3x3 depth-wise conv after each block's last norm."""
    return build_mini_resnet(depths, base_width, BN, "C", num_classes, input_hw,
                             in_channels, extra_conv=True)


RESNET_LAYOUTS = {18: ("basic", (2, 2, 2, 2)), 34: ("basic", (3, 4, 6, 3)),
                  50: ("bottleneck", (3, 4, 6, 3)), 101: ("bottleneck", (3, 4, 23, 3))}


def build_resnet_shape_graph(variant: int, norm_kind: NormKind | str = BN, positions="C",
                             input_hw: int = 224, num_classes: int = 1000,
                             extra_conv: bool = False) -> LayerGraph:
    """Full-size ImageNet ResNet description for counting (stride on the 3x3 conv)."""
    if isinstance(norm_kind, str):
        norm_kind = NormKind.parse(norm_kind)
    try:
        block, depths = RESNET_LAYOUTS[int(variant)]
    except (KeyError, ValueError):
        raise GraphError(f"unsupported ResNet variant {variant!r}") from None
    nm, base = _norm_map(norm_kind, positions)
    b = _Builder((3, input_hw, input_hw))
    b.conv("stem.conv", 64, 7, stride=2, padding=3)
    b.norm("stem.norm", base)
    b.relu("stem.relu")
    b.maxpool("stem.pool")
    for i, depth in enumerate(depths):
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0) else 1
            prefix = f"stage{i + 1}.block{j + 1}"
            if block == "basic":
                b.basic(prefix, 64 * 2 ** i, stride, nm, base, extra_conv)
            else:
                b.bottleneck(prefix, 64 * 2 ** i, stride, nm, base, extra_conv=extra_conv)
    b.gap("pool")
    b.linear("fc", num_classes)
    return LayerGraph(b.nodes, b.shapes["input"], f"resnet{variant}",
                      {s: k.name for s, k in nm.items()}).validate()


def parse_norm_choice(text: str) -> tuple[NormKind, bool]:
    """CLI norm names: ``bn``, ``bnet3``, ``bnet3d2``, ``gn``, ``gnet3`` ... and ``bnconv``."""
    if text.strip().lower() == "bnconv":
        return BN, True
    return NormKind.parse(text), False


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Network:
    """Executes a :class:`LayerGraph` with per-node layers and manual backprop.

    Parameters are initialized from ``(seed, parameter name)`` so that two
    graphs sharing layer names get identical weights for those layers
    regardless of the norm choices elsewhere.
    """

    def __init__(self, graph: LayerGraph, dtype="f32", seed: int = 0, bnet_init: str = "identity",
                 momentum: float = 0.1, eps: float = 1e-5):
        self.graph = graph
        self.dtype = resolve_dtype(dtype)
        self.seed = seed
        self.layers = {}
        for node in graph:
            self.layers[node.name] = self._make(node, bnet_init, momentum, eps)
        self.training = True

    def _make(self, node: Node, bnet_init, momentum, eps):
        dt = self.dtype
        rng = _init_rng(self.seed, node.name)
        a = node.attrs
        if node.op == "conv":
            shape = node.params["weight"]
            fan_in = shape[1] * shape[2] * shape[3]
            w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dt)
            return Conv2d(w, a["stride"], a["padding"])
        if node.op == "norm":
            return NormLayer(a["kind"], node.out_shape[0], momentum, eps, dt, bnet_init, rng)
        if node.op == "dwconv":
            c, k = node.out_shape[0], a["k"]
            bound = 1.0 / k
            kern = DepthwiseKernel(rng.uniform(-bound, bound, (c, k, k)).astype(dt),
                                   rng.uniform(-bound, bound, c).astype(dt), a["dilation"])
            return DepthwiseConv2d(kern)
        if node.op == "linear":
            bound = 1.0 / np.sqrt(a["c_in"])
            w = rng.uniform(-bound, bound, node.params["weight"]).astype(dt)
            return Linear(w, rng.uniform(-bound, bound, node.params["bias"]).astype(dt))
        if node.op == "relu":
            return ReLU()
        if node.op == "add":
            return Add()
        if node.op == "maxpool":
            return MaxPool2d(a["k"], a["stride"], a["padding"])
        if node.op == "gap":
            return GlobalAvgPool()
        raise GraphError(f"cannot execute op {node.op!r}")

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        for layer in self.layers.values():
            layer.train(mode)
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits of shape (n, classes); with ``keep`` also every activation."""
        if x.shape[1:] != tuple(self.graph.input_shape):
            raise GraphError(f"input shape {x.shape[1:]} != graph input {self.graph.input_shape}")
        acts = {"input": x.astype(self.dtype, copy=False)}
        last = {}
        for i, node in enumerate(self.graph):
            for src in node.inputs:
                last[src] = i
        for i, node in enumerate(self.graph):
            acts[node.name] = self.layers[node.name].forward(*(acts[s] for s in node.inputs))
            if not keep:
                for src in node.inputs:
                    if last[src] == i:
                        del acts[src]
        out = acts[self.graph.nodes[-1].name]
        logits = out.reshape(out.shape[0], -1)
        return (logits, acts) if keep else logits

    __call__ = forward

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(logits); returns d(loss)/d(input)."""
        last = self.graph.nodes[-1]
        grads = {last.name: grad_logits.reshape(grad_logits.shape[0], *last.out_shape)}
        for node in reversed(self.graph.nodes):
            g = grads.pop(node.name)
            back = self.layers[node.name].backward(g)
            if isinstance(back, np.ndarray):
                back = (back,)
            for src, gi in zip(node.inputs, back):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return grads["input"]

    def parameters(self) -> dict:
        return {f"{name}.{p}": arr for name, layer in self.layers.items()
                for p, arr in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{name}.{p}": g for name, layer in self.layers.items()
                for p, g in layer.grads.items()}

    def buffers(self) -> dict:
        return {f"{name}.{b}": arr for name, layer in self.layers.items()
                for b, arr in layer.buffers.items()}

    def state_dict(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise GraphError(f"state is missing {missing[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise GraphError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def norm_layers(self) -> dict:
        return {name: layer for name, layer in self.layers.items() if isinstance(layer, NormLayer)}
