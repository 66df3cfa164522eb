"""
Whole-tensor evaluators (fixed-point and float) plus a data-dependent bound on
how far the two may drift apart.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fixed_point import (
    ROUND_NEAREST_EVEN,
    WRAP,
    FxFormat,
    FxTensor,
    requantize_array,
    to_real,
)
from .model_ir import Kind, ModelGraph


def _same_pad(x: np.ndarray, k: int) -> np.ndarray:
    before = (k - 1) // 2
    after = k - 1 - before
    return np.pad(x, ((0, 0), (before, after), (before, after)))


def _conv_dense(x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    # x (C, H, W) -> (F, H, W); same padding, stride 1
    win = sliding_window_view(_same_pad(x, k), (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return np.einsum("fckl,chwkl->fhw", w, win)


def _maxpool(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = h // k, w // k
    return x[:, :ho * k, :wo * k].reshape(c, ho, k, wo, k).max(axis=(2, 4))


def _upsample(x: np.ndarray, k: int) -> np.ndarray:
    return x.repeat(k, axis=1).repeat(k, axis=2)


def _spatial_pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, p), (0, p)))


def _channel_pad(x: np.ndarray, channels: int) -> np.ndarray:
    return np.pad(x, ((0, channels - x.shape[0]), (0, 0), (0, 0)))


def run_fixed(graph: ModelGraph, x: FxTensor) -> dict[str, FxTensor]:
    """Evaluate every node on whole tensors with the same integer arithmetic as the kernels."""
    fmts = graph.formats()
    if x.fmt != fmts[graph.input_node.id]:
        raise ValueError(f"input is {x.fmt}, model expects {fmts[graph.input_node.id]}")
    if x.shape != graph.input_shape:
        raise ValueError(f"input shape {x.shape} != model input {graph.input_shape}")
    acts: dict[str, FxTensor] = {}
    for nid in graph.topo_order():
        node = graph.node(nid)
        ins = [acts[p] for p in graph.predecessors(nid)]
        k = node.kind
        if k == Kind.INPUT:
            out = x.mantissas
        elif k == Kind.CONV:
            p = graph.conv_params(nid)
            acc = _conv_dense(ins[0].mantissas, p.weights, p.kernel) + p.bias[:, None, None]
            p.acc.check_array(acc)
            out = requantize_array(acc, p.acc.frac_bits, p.out_fmt)
        elif k == Kind.MAXPOOL:
            out = _maxpool(ins[0].mantissas, node.kernel)
        elif k == Kind.UPSAMPLE:
            out = _upsample(ins[0].mantissas, node.kernel)
        elif k == Kind.SPATIAL_PAD:
            out = _spatial_pad(ins[0].mantissas, node.pad)
        elif k == Kind.CHANNEL_PAD:
            out = _channel_pad(ins[0].mantissas, node.channels)
        elif k == Kind.RELU:
            out = requantize_array(np.maximum(ins[0].mantissas, 0), ins[0].fmt.frac_bits, fmts[nid])
        elif k == Kind.ADD:
            a, b = ins
            frac = max(a.fmt.frac_bits, b.fmt.frac_bits)
            total = (a.mantissas << (frac - a.fmt.frac_bits)) + (b.mantissas << (frac - b.fmt.frac_bits))
            out = requantize_array(total, frac, fmts[nid])
        else:  # Output
            out = ins[0].mantissas
        acts[nid] = FxTensor(out, fmts[nid])
    return acts


def run_float(graph: ModelGraph, x: np.ndarray) -> dict[str, np.ndarray]:
    """Float64 evaluation with unquantized weights and no activation casts."""
    x = np.asarray(x, dtype=np.float64)
    acts: dict[str, np.ndarray] = {}
    for nid in graph.topo_order():
        node = graph.node(nid)
        ins = [acts[p] for p in graph.predecessors(nid)]
        k = node.kind
        if k == Kind.INPUT:
            out = x
        elif k == Kind.CONV:
            out = _conv_dense(ins[0], node.weights, node.kernel) + node.bias[:, None, None]
        elif k == Kind.MAXPOOL:
            out = _maxpool(ins[0], node.kernel)
        elif k == Kind.UPSAMPLE:
            out = _upsample(ins[0], node.kernel)
        elif k == Kind.SPATIAL_PAD:
            out = _spatial_pad(ins[0], node.pad)
        elif k == Kind.CHANNEL_PAD:
            out = _channel_pad(ins[0], node.channels)
        elif k == Kind.RELU:
            out = np.maximum(ins[0], 0.0)
        elif k == Kind.ADD:
            out = ins[0] + ins[1]
        else:
            out = ins[0]
        acts[nid] = out
    return acts


def _rounding_error(src_frac: int, dst: FxFormat) -> float:
    if src_frac <= dst.frac_bits:
        return 0.0
    step = math.ldexp(1.0, -dst.frac_bits)
    return step / 2 if dst.rounding == ROUND_NEAREST_EVEN else step


def _cast_error(x: np.ndarray, pre_error: float, src_frac: int, dst: FxFormat) -> float:
    """Bound on |cast(fixed) - x| given |fixed - x| <= pre_error before the cast."""
    lo, hi = float(dst.min_value), float(dst.max_value)
    if x.size == 0:
        return pre_error
    if dst.overflow == WRAP:
        if x.min() - pre_error < lo or x.max() + pre_error > hi:
            return math.inf
        return pre_error + _rounding_error(src_frac, dst)
    # clamp is 1-Lipschitz: |clamp(q) - x| <= |q - x| + dist(x, range);
    # the result also lies in [lo, hi], which caps the error at the farther end
    dist = float(np.maximum(np.maximum(lo - x, x - hi), 0.0).max())
    span = float(np.maximum(x - lo, hi - x).max())
    return min(pre_error + _rounding_error(src_frac, dst) + dist, span)


def error_bounds(graph: ModelGraph, float_acts: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-node bound on max |float - fixed| for the input that produced ``float_acts``.

    Valid when the fixed-point input equals the float input exactly (true for the
    8-bit preprocessing). Weight quantization, bias quantization, rounding and
    saturation are all accounted for; wrap-around overflow yields ``inf``.
    """
    fmts = graph.formats()
    bound: dict[str, float] = {}
    for nid in graph.topo_order():
        node = graph.node(nid)
        preds = graph.predecessors(nid)
        k = node.kind
        if k == Kind.INPUT:
            bound[nid] = 0.0
        elif k == Kind.CONV:
            (src,) = preds
            p = graph.conv_params(nid)
            wq = to_real(p.weights, node.weight_fmt)
            bq = np.ldexp(p.bias.astype(np.float64), -p.acc.frac_bits)
            a_max = float(np.abs(float_acts[src]).max()) if float_acts[src].size else 0.0
            per_filter = (bound[src] * np.abs(wq).sum(axis=(1, 2, 3))
                          + a_max * np.abs(node.weights - wq).sum(axis=(1, 2, 3))
                          + np.abs(node.bias - bq))
            bound[nid] = _cast_error(float_acts[nid], float(per_filter.max()), p.acc.frac_bits, fmts[nid])
        elif k == Kind.RELU:
            (src,) = preds
            bound[nid] = _cast_error(float_acts[nid], bound[src], fmts[src].frac_bits, fmts[nid])
        elif k == Kind.ADD:
            a, b = preds
            frac = max(fmts[a].frac_bits, fmts[b].frac_bits)
            bound[nid] = _cast_error(float_acts[nid], bound[a] + bound[b], frac, fmts[nid])
        else:
            (src,) = preds
            bound[nid] = bound[src]
    return bound
