"""
Layer-level IR for the ENet-style segmentation family.

A :class:`ModelGraph` is a list of :class:`Node` objects plus directed edges;
the order of a node's in-edges fixes the operand order of ``Add``. Convolutions
are square stride-1 kernels with "same" padding; downsampling is done by
``MaxPool`` and upsampling by nearest-neighbour ``Upsample``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fixed_point import (
    MAX_EMULATED_BITS,
    AccFormat,
    FixedPointError,
    FxFormat,
    acc_format_for,
    hls_compat,
    parse_format,
    quantize_array,
)


class Kind(str, enum.Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    CONV = "ConvBN"
    MAXPOOL = "MaxPool"
    UPSAMPLE = "Upsample"
    SPATIAL_PAD = "SpatialPad"
    CHANNEL_PAD = "ChannelPad"
    RELU = "Relu"
    ADD = "Add"


ARITY = {Kind.INPUT: 0, Kind.ADD: 2}


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: str
    kind: Kind
    kernel: int = 1
    filters: int = 0
    pad: int = 0
    channels: int = 0
    weight_fmt: FxFormat | None = None
    bias_fmt: FxFormat | None = None
    out_fmt: FxFormat | None = None
    weights: np.ndarray | None = None  # (filters, C_in, k, k), float
    bias: np.ndarray | None = None     # (filters,), float

    def __post_init__(self):
        self.kind = Kind(self.kind)


@dataclass(frozen=True)
class Diagnostic:
    node: str | None
    message: str

    def __str__(self):
        return f"{self.node}: {self.message}" if self.node else self.message


@dataclass(frozen=True)
class ConvParams:
    """Quantized arithmetic parameters of one ConvBN node."""

    kernel: int
    weights: np.ndarray   # int64 mantissas (filters, C_in, k, k)
    bias: np.ndarray      # int64, already aligned to the accumulator's fraction
    acc: AccFormat
    in_fmt: FxFormat
    out_fmt: FxFormat


@dataclass
class ModelGraph:
    nodes: list[Node]
    edges: list[tuple[str, str]]
    input_shape: tuple[int, int, int] = (3, 240, 152)
    name: str = "model"
    # (block name, block type, id of the block's last node); used for the shape table
    blocks: list[tuple[str, str, str]] = field(default_factory=list)
    _conv_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.edges = [tuple(e) for e in self.edges]
        self._index = {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def predecessors(self, node_id: str) -> list[str]:
        return [s for s, d in self.edges if d == node_id]

    def successors(self, node_id: str) -> list[str]:
        return [d for s, d in self.edges if s == node_id]

    def find(self, kind: Kind) -> list[Node]:
        return [n for n in self.nodes if n.kind == kind]

    @property
    def input_node(self) -> Node:
        return self.find(Kind.INPUT)[0]

    @property
    def output_node(self) -> Node:
        return self.find(Kind.OUTPUT)[0]

    def topo_order(self) -> list[str]:
        return _stable_topo(self)

    def shapes(self) -> dict[str, tuple[int, int, int]]:
        shapes, _, diags = _infer(self)
        if diags:
            raise GraphError("; ".join(map(str, diags)))
        return shapes

    def formats(self) -> dict[str, FxFormat]:
        _, fmts, diags = _infer(self)
        if diags:
            raise GraphError("; ".join(map(str, diags)))
        return fmts

    def conv_params(self, node_id: str) -> ConvParams:
        if node_id not in self._conv_cache:
            node = self.node(node_id)
            (src,) = self.predecessors(node_id)
            in_fmt = self.formats()[src]
            self._conv_cache[node_id] = _quantize_conv(node, in_fmt)
        return self._conv_cache[node_id]

    def edge_ids(self) -> list[str]:
        return [edge_id(s, d) for s, d in self.edges]


def edge_id(src: str, dst: str) -> str:
    return f"{src}->{dst}"


def _stable_topo(graph: ModelGraph) -> list[str]:
    # Kahn's algorithm, ties broken by declaration order
    pos = {n.id: i for i, n in enumerate(graph.nodes)}
    indeg = {n.id: 0 for n in graph.nodes}
    for _, d in graph.edges:
        indeg[d] += 1
    ready = sorted((i for i, v in indeg.items() if v == 0), key=pos.get)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for d in graph.successors(nid):
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
                ready.sort(key=pos.get)
    if len(order) != len(graph.nodes):
        raise GraphError("graph has a cycle")
    return order


def _quantize_conv(node: Node, in_fmt: FxFormat) -> ConvParams:
    k = node.kernel
    c_in = node.weights.shape[1]
    acc = acc_format_for(node.weight_fmt, in_fmt, k * k * c_in, node.bias_fmt)
    wq = quantize_array(node.weights, node.weight_fmt)
    bq = quantize_array(node.bias, node.bias_fmt) << (acc.frac_bits - node.bias_fmt.frac_bits)
    return ConvParams(k, wq, bq, acc, in_fmt, node.out_fmt)


def _infer(graph: ModelGraph):
    """Shape/format inference; never raises, returns diagnostics instead."""
    diags: list[Diagnostic] = []
    shapes: dict[str, tuple[int, int, int]] = {}
    fmts: dict[str, FxFormat] = {}
    try:
        order = _stable_topo(graph)
    except GraphError as exc:
        return shapes, fmts, [Diagnostic(None, str(exc))]
    except KeyError as exc:
        return shapes, fmts, [Diagnostic(str(exc.args[0]), "edge references unknown node")]

    for nid in order:
        node = graph.node(nid)
        preds = graph.predecessors(nid)
        want = ARITY.get(node.kind, 1)
        if len(preds) != want:
            diags.append(Diagnostic(nid, f"{node.kind.value} expects {want} input(s), has {len(preds)}"))
            continue
        if any(p not in shapes for p in preds):
            continue  # upstream already failed
        ins = [shapes[p] for p in preds]
        in_fmts = [fmts[p] for p in preds]
        try:
            shape, fmt = _node_rule(graph, node, ins, in_fmts)
        except GraphError as exc:
            diags.append(Diagnostic(nid, str(exc)))
            continue
        shapes[nid], fmts[nid] = shape, fmt
    return shapes, fmts, diags


def _node_rule(graph, node: Node, ins, in_fmts):
    k = node.kind
    if k == Kind.INPUT:
        if node.out_fmt is None:
            raise GraphError("Input needs an out_fmt")
        return graph.input_shape, node.out_fmt
    (c, h, w), fmt = ins[0], in_fmts[0]
    if k == Kind.CONV:
        if node.kernel < 1 or node.filters < 1:
            raise GraphError("ConvBN needs kernel >= 1 and filters >= 1")
        if None in (node.weight_fmt, node.bias_fmt, node.out_fmt):
            raise GraphError("ConvBN needs weight_fmt, bias_fmt and out_fmt")
        if node.weights is None or node.bias is None:
            raise GraphError("ConvBN has no weights")
        want = (node.filters, c, node.kernel, node.kernel)
        if tuple(node.weights.shape) != want:
            raise GraphError(f"weights shape {tuple(node.weights.shape)} != {want}")
        if tuple(node.bias.shape) != (node.filters,):
            raise GraphError(f"bias shape {tuple(node.bias.shape)} != ({node.filters},)")
        try:
            acc = acc_format_for(node.weight_fmt, fmt, node.kernel ** 2 * c, node.bias_fmt)
        except FixedPointError as exc:
            raise GraphError(str(exc)) from None
        if acc.bits > MAX_EMULATED_BITS:
            raise GraphError(f"accumulator needs {acc.bits} bits, emulation limit is {MAX_EMULATED_BITS}")
        return (node.filters, h, w), node.out_fmt
    if k == Kind.MAXPOOL:
        if node.kernel < 1 or h // node.kernel < 1 or w // node.kernel < 1:
            raise GraphError(f"MaxPool({node.kernel}) does not fit a {h}x{w} input")
        return (c, h // node.kernel, w // node.kernel), fmt
    if k == Kind.UPSAMPLE:
        if node.kernel < 1:
            raise GraphError("Upsample factor must be >= 1")
        return (c, h * node.kernel, w * node.kernel), fmt
    if k == Kind.SPATIAL_PAD:
        if node.pad < 0:
            raise GraphError("negative padding")
        return (c, h + node.pad, w + node.pad), fmt
    if k == Kind.CHANNEL_PAD:
        if node.channels < c:
            raise GraphError(f"ChannelPad({node.channels}) cannot shrink {c} channels")
        return (node.channels, h, w), fmt
    if k == Kind.RELU:
        return (c, h, w), node.out_fmt or fmt
    if k == Kind.ADD:
        if ins[0] != ins[1]:
            raise GraphError(f"Add operand shapes differ: {ins[0]} vs {ins[1]}")
        return ins[0], node.out_fmt or in_fmts[0]
    if k == Kind.OUTPUT:
        return (c, h, w), fmt
    raise GraphError(f"unknown node kind {k}")


def validate(graph: ModelGraph) -> list[Diagnostic]:
    """Every problem found in ``graph``; an empty list means it is runnable."""
    diags = []
    ids = [n.id for n in graph.nodes]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    for d in dupes:
        diags.append(Diagnostic(d, "duplicate node id"))
    for kind in (Kind.INPUT, Kind.OUTPUT):
        count = len(graph.find(kind))
        if count != 1:
            diags.append(Diagnostic(None, f"expected exactly one {kind.value} node, found {count}"))
    known = set(ids)
    for s, d in graph.edges:
        for end in (s, d):
            if end not in known:
                diags.append(Diagnostic(end, f"edge {s}->{d} references unknown node"))
    if diags:
        return diags
    for n in graph.nodes:
        if n.kind != Kind.OUTPUT and not graph.successors(n.id):
            diags.append(Diagnostic(n.id, "node output is never consumed"))
    _, _, infer_diags = _infer(graph)
    return diags + infer_diags


def parameter_count(graph: ModelGraph) -> int:
    shapes = graph.shapes()
    total = 0
    for n in graph.find(Kind.CONV):
        (src,) = graph.predecessors(n.id)
        c_in = shapes[src][0]
        total += n.kernel ** 2 * c_in * n.filters + n.filters
    return total


# -- batchnorm folding ---------------------------------------------------------

@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_variance: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        if np.any(np.asarray(self.moving_variance) + self.epsilon <= 0):
            raise ValueError("moving_variance + epsilon must be positive")


def fold_batchnorm(weights, bias, bn: BnParams):
    """Merge a batchnorm that follows a convolution into the convolution.

    ``weights`` is (filters, C_in, k, k); returns new (weights, bias) such that
    conv(x; w', b') == bn(conv(x; w, b)).
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    filters = weights.shape[0]
    for name in ("gamma", "beta", "moving_mean", "moving_variance"):
        if np.shape(getattr(bn, name)) != (filters,):
            raise ValueError(f"bn.{name} must have shape ({filters},)")
    scale = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(
        np.asarray(bn.moving_variance, dtype=np.float64) + bn.epsilon)
    w = weights * scale[:, None, None, None]
    b = (bias - bn.moving_mean) * scale + bn.beta
    return w, b


# -- ENet builder ----------------------------------------------------------------

INPUT_FMT = parse_format("u8.0")


@dataclass(frozen=True)
class QuantConfig:
    """Formats used inside one block."""

    weight: FxFormat
    bias: FxFormat
    conv_out: FxFormat
    act: FxFormat

    @classmethod
    def uniform(cls, bits: int) -> "QuantConfig":
        return cls(
            weight=FxFormat(bits, 0, True),
            bias=FxFormat(bits, 0, True),
            conv_out=parse_format("s16.6"),
            act=FxFormat(bits, 0, False),
        )

    def compat(self) -> "QuantConfig":
        return QuantConfig(*(hls_compat(f) for f in (self.weight, self.bias, self.conv_out, self.act)))


BLOCKS = ("initial", "b1", "b2", "b3", "b4", "b5", "final")

FILTER_PRESETS = {
    "enet": (32, 64, 64, 64, 128, 48),
    "enet16": (32, 16, 16, 16, 16, 16),
    "enet12": (32, 12, 12, 12, 12, 12),
    "enet8": (32, 8, 8, 8, 8, 8),
    "enet6": (32, 6, 6, 6, 6, 6),
    "enet4": (32, 4, 4, 4, 4, 4),
    "enethq": (8, 2, 4, 8, 4, 3),
    "tiny": (2, 2, 2, 2, 2, 2),
}

# Illustrative heterogeneous assignment (kernel bits drawn from {4, 8} per block).
_HQ_BITS = {"initial": 8, "b1": 4, "b2": 4, "b3": 8, "b4": 4, "b5": 8, "final": 8}

QUANT_PRESETS: dict[str, Mapping[str, QuantConfig]] = {
    "q8": {b: QuantConfig.uniform(8) for b in BLOCKS},
    "q4": {b: QuantConfig.uniform(4) for b in BLOCKS},
    "q2": {b: QuantConfig.uniform(2) for b in BLOCKS},
    "hq": {b: QuantConfig.uniform(bits) for b, bits in _HQ_BITS.items()},
}


def resolve_quant(quant) -> dict[str, QuantConfig]:
    if isinstance(quant, str):
        try:
            return dict(QUANT_PRESETS[quant.lower()])
        except KeyError:
            raise ValueError(f"unknown quantization preset {quant!r}") from None
    if isinstance(quant, QuantConfig):
        return {b: quant for b in BLOCKS}
    missing = set(BLOCKS) - set(quant)
    if missing:
        raise ValueError(f"quant config missing blocks: {sorted(missing)}")
    return dict(quant)


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.nodes: list[Node] = []
        self.edges: list[tuple[str, str]] = []
        self.channels: dict[str, int] = {}
        self.rng = rng

    def add(self, node: Node, *inputs: str, channels: int) -> str:
        self.nodes.append(node)
        for src in inputs:
            self.edges.append((src, node.id))
        self.channels[node.id] = channels
        return node.id

    def conv(self, nid, src, k, f, q: QuantConfig) -> str:
        c_in = self.channels[src]
        fan_in = k * k * c_in
        bound = min(0.9, math.sqrt(3.0 / fan_in))
        w = self.rng.uniform(-bound, bound, size=(f, c_in, k, k))
        b = np.zeros(f)
        bn = BnParams(
            gamma=self.rng.uniform(0.8, 1.2, f),
            beta=self.rng.uniform(-0.1, 0.1, f),
            moving_mean=self.rng.uniform(-0.05, 0.05, f),
            moving_variance=self.rng.uniform(0.8, 1.2, f),
        )
        w, b = fold_batchnorm(w, b, bn)
        # stand-in for trained weights: keep them inside the I=0 weight range
        w = np.clip(w, -0.99, 0.99)
        b = np.clip(b, -0.99, 0.99)
        # weights live on disk as float32; keep the in-memory copy identical
        w = w.astype(np.float32).astype(np.float64)
        b = b.astype(np.float32).astype(np.float64)
        node = Node(nid, Kind.CONV, kernel=k, filters=f, weight_fmt=q.weight,
                    bias_fmt=q.bias, out_fmt=q.conv_out, weights=w, bias=b)
        return self.add(node, src, channels=f)

    def relu(self, nid, src, q: QuantConfig) -> str:
        return self.add(Node(nid, Kind.RELU, out_fmt=q.act), src, channels=self.channels[src])

    def pool(self, nid, src) -> str:
        return self.add(Node(nid, Kind.MAXPOOL, kernel=2), src, channels=self.channels[src])

    def upsample(self, nid, src) -> str:
        return self.add(Node(nid, Kind.UPSAMPLE, kernel=2), src, channels=self.channels[src])

    def match_channels(self, nid, src, f, q: QuantConfig) -> str:
        c = self.channels[src]
        if c == f:
            return src
        if c < f:
            return self.add(Node(nid + "_pad", Kind.CHANNEL_PAD, channels=f), src, channels=f)
        return self.conv(nid + "_proj", src, 1, f, q)

    def bottleneck(self, prefix, src, f, mode, q: QuantConfig) -> str:
        x = self.conv(f"{prefix}.conv1", src, 1, f, q)
        x = self.relu(f"{prefix}.relu1", x, q)
        x = self.conv(f"{prefix}.conv3", x, 3, f, q)
        x = self.relu(f"{prefix}.relu2", x, q)
        x = self.conv(f"{prefix}.conv1b", x, 1, f, q)
        skip = src
        if mode == "down":
            x = self.pool(f"{prefix}.pool", x)
            skip = self.pool(f"{prefix}.skip_pool", skip)
        elif mode == "up":
            x = self.upsample(f"{prefix}.up", x)
            skip = self.upsample(f"{prefix}.skip_up", skip)
        skip = self.match_channels(f"{prefix}.skip", skip, f, q)
        add = self.add(Node(f"{prefix}.add", Kind.ADD, out_fmt=q.conv_out), x, skip, channels=f)
        return self.relu(f"{prefix}.relu", add, q)


def build_enet(filters: Sequence[int], input_shape=(3, 240, 152), quant="q8",
               n_classes: int = 4, seed: int = 0, hls_compat_mode: bool = False,
               name: str | None = None) -> ModelGraph:
    """ENet-style encoder/decoder with randomly initialised, BN-folded weights.

    Each of the five bottleneck stages holds three bottlenecks; only the first
    one of a stage changes resolution.
    """
    filters = tuple(int(f) for f in filters)
    if len(filters) != 6 or min(filters) < 1:
        raise ValueError(f"need six positive filter counts, got {filters}")
    c, h, w = (int(v) for v in input_shape)
    if h % 8 or w % 8:
        raise ValueError(f"input height and width must be divisible by 8, got {h}x{w}")
    qcfg = resolve_quant(quant)
    if hls_compat_mode:
        qcfg = {b: q.compat() for b, q in qcfg.items()}

    bld = _Builder(np.random.default_rng(seed))
    blocks = []
    x = bld.add(Node("input", Kind.INPUT, out_fmt=INPUT_FMT), channels=c)

    q = qcfg["initial"]
    x = bld.conv("initial.conv", x, 3, filters[0], q)
    x = bld.relu("initial.relu", x, q)
    x = bld.pool("initial.pool", x)
    blocks.append(("Initial", "downsample", x))

    modes = ("down", "down", None, "up", "up")
    for i, (f, mode) in enumerate(zip(filters[1:], modes), start=1):
        q = qcfg[f"b{i}"]
        for j in range(3):
            x = bld.bottleneck(f"b{i}.{j}", x, f, mode if j == 0 else None, q)
        blocks.append((f"3x bottleneck {i}", {"down": "downsample", "up": "upsample"}.get(mode, ""), x))

    q = qcfg["final"]
    x = bld.upsample("final.up", x)
    x = bld.conv("final.conv", x, 3, n_classes, q)
    blocks.append(("Final", "upsample", x))
    bld.add(Node("output", Kind.OUTPUT), x, channels=n_classes)

    label = name or "enet-" + "-".join(map(str, filters))
    return ModelGraph(bld.nodes, bld.edges, (c, h, w), label, blocks)


def block_table(graph: ModelGraph) -> list[tuple[str, str, tuple[int, int, int]]]:
    shapes = graph.shapes()
    return [(name, kind, shapes[last]) for name, kind, last in graph.blocks]
