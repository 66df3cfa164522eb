"""
Analytic storage / multiplier / latency model.

Storage is counted in pixel-vectors ("elements") and bits, multipliers stand
in for DSPs. Vendor primitives (BRAM18, LUT) are not modelled.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping

from .model_ir import Kind, ModelGraph, edge_id
from .stream_kernels import same_padding

LINE_BUFFER = "line"
ENCODED = "encoded"


def buffer_elements(impl: str, kernel: int, width: int) -> int:
    """Window-history storage of one window generator, in pixel-vectors."""
    if kernel < 1 or width < kernel:
        raise ValueError(f"need 1 <= K <= W, got K={kernel}, W={width}")
    if kernel == 1:
        return 0
    if impl in (LINE_BUFFER, "line_buffer"):
        return (kernel - 1) * width
    if impl == ENCODED:
        return kernel * kernel * kernel * (width - kernel + 1)
    raise ValueError(f"unknown implementation {impl!r}")


def multipliers(kernel: int, c_in: int, filters: int, reuse_factor: int = 1) -> int:
    if reuse_factor < 1:
        raise ValueError("reuse factor must be >= 1")
    return math.ceil(kernel * kernel * c_in * filters / reuse_factor)


@dataclass
class LayerResources:
    node: str
    kind: str
    buffer_elements: int = 0
    buffer_bits: int = 0
    multipliers: int = 0
    register_bits: int = 0


@dataclass
class ResourceEstimate:
    layers: list[LayerResources]
    fifo_bits: int
    fifo_depth_total: int
    impl: str
    reuse_factor: int
    lut: str = "not modeled"

    @property
    def buffer_elements(self) -> int:
        return sum(l.buffer_elements for l in self.layers)

    @property
    def buffer_bits(self) -> int:
        return sum(l.buffer_bits for l in self.layers)

    @property
    def multipliers(self) -> int:
        return sum(l.multipliers for l in self.layers)

    @property
    def register_bits(self) -> int:
        return sum(l.register_bits for l in self.layers)

    @property
    def memory_bits(self) -> int:
        return self.buffer_bits + self.fifo_bits

    def totals(self) -> dict:
        return {
            "buffer_elements": self.buffer_elements,
            "buffer_bits": self.buffer_bits,
            "fifo_bits": self.fifo_bits,
            "memory_bits": self.memory_bits,
            "multipliers": self.multipliers,
            "register_bits": self.register_bits,
            "lut": self.lut,
        }


@dataclass
class LatencyReport:
    cycles: int
    clock_ns: float
    batch_size: int

    @property
    def latency_ms(self) -> float:
        return self.cycles * self.clock_ns * 1e-6

    @property
    def per_image_ms(self) -> float:
        return self.latency_ms / self.batch_size


def latency_ms(cycles: int, clock_ns: float) -> float:
    return cycles * clock_ns * 1e-6


def _counter_bits(n: int) -> int:
    return max(1, math.ceil(math.log2(n + 1)))


def fifo_bits(graph: ModelGraph, depths: Mapping[str, int]) -> int:
    shapes = graph.shapes()
    fmts = graph.formats()
    total = 0
    for s, d in graph.edges:
        total += int(depths[edge_id(s, d)]) * shapes[s][0] * fmts[s].total_bits
    return total


def estimate_resources(graph: ModelGraph, depths: Mapping[str, int], reuse_factor: int = 1,
                       impl: str = LINE_BUFFER) -> ResourceEstimate:
    shapes = graph.shapes()
    fmts = graph.formats()
    layers = []
    for nid in graph.topo_order():
        node = graph.node(nid)
        preds = graph.predecessors(nid)
        if node.kind == Kind.CONV:
            c, h, w = shapes[preds[0]]
            k = node.kernel
            before, after = same_padding(k)
            wp, hp = w + before + after, h + before + after
            pixel_bits = c * fmts[preds[0]].total_bits
            elems = buffer_elements(impl, k, wp)
            regs = k * k * pixel_bits + 3 * _counter_bits(hp * wp)
            layers.append(LayerResources(nid, node.kind.value, elems, elems * pixel_bits,
                                         multipliers(k, c, node.filters, reuse_factor), regs))
        elif node.kind == Kind.MAXPOOL:
            c, h, w = shapes[preds[0]]
            k = node.kernel
            pixel_bits = c * fmts[preds[0]].total_bits
            elems = buffer_elements(impl, k, w)
            regs = k * k * pixel_bits + 3 * _counter_bits(h * w)
            layers.append(LayerResources(nid, node.kind.value, elems, elems * pixel_bits, 0, regs))
        elif node.kind == Kind.UPSAMPLE:
            c, h, w = shapes[preds[0]]
            pixel_bits = c * fmts[preds[0]].total_bits
            layers.append(LayerResources(nid, node.kind.value, w, w * pixel_bits, 0,
                                         2 * _counter_bits(h * w)))
    return ResourceEstimate(layers, fifo_bits(graph, depths), sum(int(v) for v in depths.values()),
                            impl, reuse_factor)


def estimate(graph: ModelGraph, depths: Mapping[str, int], reuse_factor: int, clock_ns: float,
             batch_size: int, cycles: int, impl: str = LINE_BUFFER):
    """(ResourceEstimate, LatencyReport); ``cycles`` comes from a completed simulation."""
    res = estimate_resources(graph, depths, reuse_factor, impl)
    return res, LatencyReport(int(cycles), float(clock_ns), int(batch_size))


def report_dict(res: ResourceEstimate, lat: LatencyReport | None = None) -> dict:
    out = {
        "impl": res.impl,
        "reuse_factor": res.reuse_factor,
        "totals": res.totals(),
        "fifo_depth_total": res.fifo_depth_total,
        "layers": [asdict(l) for l in res.layers],
    }
    if lat is not None:
        out["latency"] = {
            "cycles": lat.cycles,
            "clock_ns": lat.clock_ns,
            "batch_size": lat.batch_size,
            "latency_ms": lat.latency_ms,
            "per_image_ms": lat.per_image_ms,
        }
    return out


def report_json(res: ResourceEstimate, lat: LatencyReport | None = None) -> str:
    return json.dumps(report_dict(res, lat), indent=2)
