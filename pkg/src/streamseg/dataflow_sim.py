"""
Cycle-approximate simulation of the layer-per-process dataflow design.

Every graph node becomes a process; every edge becomes a bounded FIFO. One
cycle is one sweep over all processes in topological order. In a cycle a
process first tries to push the head of its output buffer to all of its
outgoing FIFOs (a fan-out write needs space in every one of them), then, if it
is not stalled and its output buffer is empty, does one unit of work: consume
at most one pixel-vector per input FIFO, or inject one padding pixel.

ConvBN processes stall ``reuse_factor - 1`` extra cycles after each output.
The simulation stops when the sink has received every output pixel, when no
process can make progress (deadlock), or when the cycle budget runs out.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fixed_point import FxTensor
from .model_ir import Kind, ModelGraph, edge_id, validate
from .stream_kernels import (
    PoolState,
    SpatialPadState,
    UpsampleState,
    add_step,
    channel_pad_step,
    conv_window,
    make_window,
    relu_step,
    same_padding,
)

COMPLETED = "completed"
DEADLOCK = "deadlock"
BUDGET_EXHAUSTED = "budget_exhausted"


class SimulationError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class Fifo:
    __slots__ = ("id", "src", "dst", "capacity", "queue", "max_occupancy",
                 "_integral", "_last_t")

    def __init__(self, src: str, dst: str, capacity: int):
        if capacity < 1:
            raise ValueError(f"FIFO {src}->{dst} needs a depth >= 1, got {capacity}")
        self.id = edge_id(src, dst)
        self.src = src
        self.dst = dst
        self.capacity = capacity
        self.queue: deque = deque()
        self.max_occupancy = 0
        self._integral = 0
        self._last_t = 0

    def _account(self, t: int):
        self._integral += len(self.queue) * (t - self._last_t)
        self._last_t = t

    def has_space(self) -> bool:
        return len(self.queue) < self.capacity

    def push(self, item, t: int):
        self._account(t)
        self.queue.append(item)
        n = len(self.queue)
        assert n <= self.capacity, f"FIFO {self.id} overflowed"
        if n > self.max_occupancy:
            self.max_occupancy = n

    def pop(self, t: int):
        self._account(t)
        return self.queue.popleft()

    def mean_occupancy(self, cycles: int) -> float:
        self._account(cycles)
        return self._integral / cycles if cycles else 0.0


@dataclass(frozen=True)
class EdgeTrace:
    edge_id: str
    producer: str
    consumer: str
    capacity: int
    max_occupancy: int
    mean_occupancy: float


@dataclass
class OccupancyTrace:
    edges: list[EdgeTrace]

    def max_occupancy(self) -> dict[str, int]:
        return {e.edge_id: e.max_occupancy for e in self.edges}

    def memory_efficiency(self) -> float:
        """Sum of peak occupancies over sum of depths."""
        total = sum(e.capacity for e in self.edges)
        return sum(e.max_occupancy for e in self.edges) / total if total else 0.0

    def mean_occupancy_ratio(self) -> float:
        """Mean over FIFOs of peak occupancy / depth."""
        if not self.edges:
            return 0.0
        return float(np.mean([e.max_occupancy / e.capacity for e in self.edges]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge_id", "producer", "consumer", "capacity", "max_occupancy", "mean_occupancy"])
        for e in self.edges:
            w.writerow([e.edge_id, e.producer, e.consumer, e.capacity, e.max_occupancy,
                        f"{e.mean_occupancy:.6f}"])
        return buf.getvalue()


@dataclass
class SimConfig:
    fifo_depths: Mapping[str, int] = field(default_factory=dict)
    reuse_factor: int = 1
    cycle_budget: int | None = None
    window_impl: str = "line"

    def __post_init__(self):
        if self.reuse_factor < 1:
            raise ValueError(f"reuse factor must be >= 1, got {self.reuse_factor}")
        for k, v in self.fifo_depths.items():
            if int(v) < 1:
                raise ValueError(f"FIFO depth for {k} must be >= 1, got {v}")


@dataclass
class SimResult:
    status: str
    outputs: list[FxTensor]
    makespan_cycles: int
    trace: OccupancyTrace
    batch_size: int
    dump: str = ""

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


def baseline_depths(graph: ModelGraph) -> dict[str, int]:
    """One slot per pixel-vector of the edge's tensor: the conservative default."""
    shapes = graph.shapes()
    return {edge_id(s, d): shapes[s][1] * shapes[s][2] for s, d in graph.edges}


# -- processes ---------------------------------------------------------------------

class _Process:
    def __init__(self, nid: str, inputs: list[Fifo], outputs: list[Fifo], n_images: int):
        self.id = nid
        self.inputs = inputs
        self.outputs = outputs
        self.n_images = n_images
        self.images_done = 0
        self.out_buf: deque = deque()
        self.busy = 0

    @property
    def finished(self) -> bool:
        return self.images_done >= self.n_images

    def tick(self, t: int) -> bool:
        progress = False
        if self.out_buf and all(f.has_space() for f in self.outputs):
            item = self.out_buf.popleft()
            for f in self.outputs:
                f.push(item, t)
            progress = True
        if self.busy:
            self.busy -= 1
            return True
        if not self.out_buf and not self.finished:
            progress |= self.work(t)
        return progress

    def work(self, t: int) -> bool:
        raise NotImplementedError

    def status(self) -> str:
        waiting = [f.id for f in self.inputs if not f.queue]
        blocked = [f.id for f in self.outputs if not f.has_space()]
        return (f"{self.id}: images {self.images_done}/{self.n_images}, out_buf {len(self.out_buf)}, "
                f"busy {self.busy}, empty inputs {waiting}, full outputs {blocked}")


class _Source(_Process):
    def __init__(self, nid, outputs, images: Sequence[FxTensor]):
        super().__init__(nid, [], outputs, len(images))
        self.pixels = [img.mantissas.reshape(img.shape[0], -1).T.copy() for img in images]
        self.pos = 0

    def work(self, t):
        px = self.pixels[self.images_done]
        self.out_buf.append(px[self.pos])
        self.pos += 1
        if self.pos == len(px):
            self.pos = 0
            self.images_done += 1
        return True


class _Sink(_Process):
    def __init__(self, nid, inputs, n_images, shape):
        super().__init__(nid, inputs, [], n_images)
        self.shape = shape
        self.per_image = shape[1] * shape[2]
        self.received: list[list[np.ndarray]] = [[]]
        self.last_cycle = -1

    def work(self, t):
        (f,) = self.inputs
        if not f.queue:
            return False
        cur = self.received[-1]
        cur.append(f.pop(t))
        if len(cur) == self.per_image:
            self.images_done += 1
            self.last_cycle = t
            if not self.finished:
                self.received.append([])
        return True


class _Conv(_Process):
    def __init__(self, nid, inputs, outputs, n_images, params, in_shape, rf, impl):
        super().__init__(nid, inputs, outputs, n_images)
        self.params = params
        self.c, self.h, self.w = in_shape
        self.before, after = same_padding(params.kernel)
        self.hp = self.h + self.before + after
        self.wp = self.w + self.before + after
        self.rf = rf
        self.impl = impl
        self.zero = np.zeros(self.c, dtype=np.int64)
        self._reset()

    def _reset(self):
        self.window = make_window(self.impl, self.params.kernel, self.hp, self.wp)
        self.step_idx = 0

    def work(self, t):
        r, c = divmod(self.step_idx, self.wp)
        r -= self.before
        c -= self.before
        if 0 <= r < self.h and 0 <= c < self.w:
            (f,) = self.inputs
            if not f.queue:
                return False
            pixel = f.pop(t)
        else:
            pixel = self.zero
        event = self.window.step(pixel)
        if event is not None:
            self.out_buf.append(conv_window(event.window, self.params))
            self.busy = self.rf - 1
        self.step_idx += 1
        if self.step_idx == self.hp * self.wp:
            self.images_done += 1
            self._reset()
        return True


class _Streaming(_Process):
    """Single-input kernel with a per-image lifecycle of ``per_image`` pixels."""

    def __init__(self, nid, inputs, outputs, n_images, per_image, factory, fn):
        super().__init__(nid, inputs, outputs, n_images)
        self.per_image = per_image
        self.factory = factory
        self.fn = fn
        self.state = factory()
        self.seen = 0

    def work(self, t):
        (f,) = self.inputs
        if not f.queue:
            return False
        out = self.fn(self.state, f.pop(t))
        if out is not None:
            if isinstance(out, list):
                self.out_buf.extend(out)
            else:
                self.out_buf.append(out)
        self.seen += 1
        if self.seen == self.per_image:
            self.seen = 0
            self.images_done += 1
            self.state = self.factory()
        return True


class _Add(_Process):
    def __init__(self, nid, inputs, outputs, n_images, per_image, fmts, out_fmt):
        super().__init__(nid, inputs, outputs, n_images)
        self.per_image = per_image
        self.fmts = fmts
        self.out_fmt = out_fmt
        self.seen = 0

    def work(self, t):
        a, b = self.inputs
        if not a.queue or not b.queue:
            return False
        self.out_buf.append(add_step(a.pop(t), b.pop(t), *self.fmts, self.out_fmt))
        self.seen += 1
        if self.seen == self.per_image:
            self.seen = 0
            self.images_done += 1
        return True


def _build(graph: ModelGraph, images: Sequence[FxTensor], cfg: SimConfig):
    shapes = graph.shapes()
    fmts = graph.formats()
    depths = baseline_depths(graph)
    unknown = set(cfg.fifo_depths) - set(depths)
    if unknown:
        raise ValueError(f"depth map names unknown edges: {sorted(unknown)}")
    depths.update({k: int(v) for k, v in cfg.fifo_depths.items()})
    fifos = {edge_id(s, d): Fifo(s, d, depths[edge_id(s, d)]) for s, d in graph.edges}
    n = len(images)
    procs = []
    sink = None
    for nid in graph.topo_order():
        node = graph.node(nid)
        preds = graph.predecessors(nid)
        ins = [fifos[edge_id(p, nid)] for p in preds]
        outs = [fifos[edge_id(nid, s)] for s in graph.successors(nid)]
        k = node.kind
        if k == Kind.INPUT:
            proc = _Source(nid, outs, images)
        elif k == Kind.OUTPUT:
            proc = sink = _Sink(nid, ins, n, shapes[nid])
        elif k == Kind.CONV:
            proc = _Conv(nid, ins, outs, n, graph.conv_params(nid), shapes[preds[0]],
                         cfg.reuse_factor, cfg.window_impl)
        elif k == Kind.ADD:
            proc = _Add(nid, ins, outs, n, shapes[nid][1] * shapes[nid][2],
                        (fmts[preds[0]], fmts[preds[1]]), fmts[nid])
        else:
            c, h, w = shapes[preds[0]]
            proc = _Streaming(nid, ins, outs, n, h * w, *_kernel_factory(node, (c, h, w),
                                                                       fmts[preds[0]], fmts[nid], cfg))
        procs.append(proc)
    return procs, fifos, sink


def _kernel_factory(node, in_shape, in_fmt, out_fmt, cfg):
    c, h, w = in_shape
    k = node.kind
    if k == Kind.MAXPOOL:
        return (lambda: PoolState(node.kernel, h, w, cfg.window_impl)), (lambda s, p: s.step(p))
    if k == Kind.UPSAMPLE:
        return (lambda: UpsampleState(node.kernel, w)), (lambda s, p: s.step(p))
    if k == Kind.SPATIAL_PAD:
        return (lambda: SpatialPadState(node.pad, h, w)), (lambda s, p: s.step(p))
    if k == Kind.CHANNEL_PAD:
        return (lambda: None), (lambda s, p: channel_pad_step(p, node.channels))
    if k == Kind.RELU:
        return (lambda: None), (lambda s, p: relu_step(p, in_fmt, out_fmt))
    raise ValueError(f"no streaming kernel for {k}")


def _default_budget(graph: ModelGraph, n_images: int, rf: int) -> int:
    # every cycle before completion advances at least one bounded counter
    shapes = graph.shapes()
    work = 0
    for node in graph.nodes:
        c, h, w = shapes[node.id]
        k = node.kernel if node.kind == Kind.CONV else 0
        work += (h + k) * (w + k) * (rf + 2) * max(1, len(graph.successors(node.id)))
    return n_images * work + 1000


def simulate(graph: ModelGraph, inputs: Sequence[FxTensor], cfg: SimConfig | None = None,
             check: bool = True) -> SimResult:
    cfg = cfg or SimConfig()
    if check:
        diags = validate(graph)
        if diags:
            raise ValueError("invalid graph: " + "; ".join(map(str, diags)))
    in_fmt = graph.formats()[graph.input_node.id]
    for img in inputs:
        if img.fmt != in_fmt or img.shape != graph.input_shape:
            raise ValueError(f"input {img} does not match model input {graph.input_shape} {in_fmt}")
    if not inputs:
        raise ValueError("simulate needs at least one input image")

    procs, fifos, sink = _build(graph, inputs, cfg)
    budget = cfg.cycle_budget or _default_budget(graph, len(inputs), cfg.reuse_factor)
    status = BUDGET_EXHAUSTED
    t = 0
    while t < budget:
        progress = False
        for p in procs:
            if p.tick(t):
                progress = True
        t += 1
        if sink.finished:
            status = COMPLETED
            break
        if not progress:
            status = DEADLOCK
            break

    cycles = t
    trace = OccupancyTrace([
        EdgeTrace(f.id, f.src, f.dst, f.capacity, f.max_occupancy, f.mean_occupancy(cycles))
        for f in fifos.values()
    ])
    outputs = []
    dump = ""
    if status == COMPLETED:
        c = sink.shape[0]
        h, w = sink.shape[1:]
        out_fmt = graph.formats()[sink.id]
        for pixels in sink.received:
            arr = np.array(pixels, dtype=np.int64).T.reshape(c, h, w)
            outputs.append(FxTensor(arr, out_fmt))
        makespan = sink.last_cycle + 1
    else:
        makespan = cycles
        lines = [f"{status} after {cycles} cycles", "FIFOs (occupancy/capacity):"]
        lines += [f"  {f.id}: {len(f.queue)}/{f.capacity}" for f in fifos.values()]
        lines.append("processes:")
        lines += ["  " + p.status() for p in procs if not p.finished or p.out_buf]
        dump = "\n".join(lines)
    return SimResult(status, outputs, makespan, trace, len(inputs), dump)


def makespan(graph: ModelGraph, inputs: Sequence[FxTensor], cfg: SimConfig | None = None) -> int:
    """Cycles until the last output pixel of the last image has been delivered."""
    res = simulate(graph, inputs, cfg)
    if not res.completed:
        raise SimulationError(f"simulation ended with status {res.status}", res)
    return res.makespan_cycles


def optimize_fifo_depths(graph: ModelGraph, calibration: Sequence[FxTensor],
                         cfg: SimConfig | None = None, margin: float = 1.0,
                         baseline: SimResult | None = None) -> dict[str, int]:
    """Resize every FIFO to the peak occupancy seen on the calibration images.

    The calibration set is streamed back-to-back under tensor-sized depths (or
    under ``cfg``'s depths when given); ``margin`` scales the observed peaks.
    """
    if margin < 1.0:
        raise ValueError("margin below 1.0 would undersize FIFOs")
    cfg = cfg or SimConfig()
    if baseline is None:
        baseline = simulate(graph, calibration, cfg)
    if not baseline.completed:
        raise SimulationError(
            f"baseline simulation ended with status {baseline.status}; cannot optimize", baseline)
    return {e.edge_id: max(1, math.ceil(e.max_occupancy * margin)) for e in baseline.trace.edges}
