"""Independent reference implementations used only by the tests.

Everything here works on Python ints and Fractions with straight loops, so it
shares no arithmetic code with the package under test.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from streamseg.fixed_point import FxFormat
from streamseg.model_ir import INPUT_FMT, Kind, ModelGraph, Node


def round_to_int(q: Fraction, rounding: str) -> int:
    if rounding == "truncate":
        return math.floor(q)
    return round(q)  # Fraction.__round__ is round-half-even


def fit(m: int, fmt: FxFormat) -> int:
    if fmt.signed:
        lo, hi = -(2 ** (fmt.total_bits - 1)), 2 ** (fmt.total_bits - 1) - 1
    else:
        lo, hi = 0, 2 ** fmt.total_bits - 1
    if lo <= m <= hi:
        return m
    if fmt.overflow == "saturate":
        return min(max(m, lo), hi)
    span = 2 ** fmt.total_bits
    return (m - lo) % span + lo


def quantize_exact(x, fmt: FxFormat) -> int:
    frac = fmt.total_bits - fmt.integer_bits - (1 if fmt.signed else 0)
    return fit(round_to_int(Fraction(x) * 2 ** frac, fmt.rounding), fmt)


def conv_dense(x: list, weights, bias, w_fmt: FxFormat, b_fmt: FxFormat, in_fmt: FxFormat,
               out_fmt: FxFormat, padding: str = "same") -> list:
    """Fixed-point convolution from first principles.

    ``x`` is a nested [C][H][W] list of input mantissas; ``weights`` and ``bias``
    are float arrays that get quantized here. Returns nested [F][Ho][Wo] mantissas.
    """
    f_n, c_n, k, _ = np.shape(weights)
    h, w = len(x[0]), len(x[0][0])
    wq = [[[[quantize_exact(float(weights[f][c][i][j]), w_fmt) for j in range(k)]
            for i in range(k)] for c in range(c_n)] for f in range(f_n)]
    bq = [quantize_exact(float(bias[f]), b_fmt) for f in range(f_n)]
    w_frac = w_fmt.total_bits - w_fmt.integer_bits - int(w_fmt.signed)
    a_frac = in_fmt.total_bits - in_fmt.integer_bits - int(in_fmt.signed)
    b_frac = b_fmt.total_bits - b_fmt.integer_bits - int(b_fmt.signed)
    if padding == "same":
        top = (k - 1) // 2
        ho, wo = h, w
    else:
        top = 0
        ho, wo = h - k + 1, w - k + 1

    def pixel(c, r, col):
        if 0 <= r < h and 0 <= col < w:
            return x[c][r][col]
        return 0

    out = []
    for f in range(f_n):
        plane = []
        for r in range(ho):
            row = []
            for col in range(wo):
                total = Fraction(bq[f], 2 ** b_frac)
                for c in range(c_n):
                    for i in range(k):
                        for j in range(k):
                            a = pixel(c, r + i - top, col + j - top)
                            total += Fraction(wq[f][c][i][j] * a, 2 ** (w_frac + a_frac))
                row.append(quantize_exact(total, out_fmt))
            plane.append(row)
        out.append(plane)
    return out


def windows_valid(x: np.ndarray, k: int) -> list[tuple[int, int, np.ndarray]]:
    """Every k x k window of a (C, H, W) array in raster order, as (row, col, (k, k, C))."""
    c, h, w = x.shape
    return [(r, col, x[:, r:r + k, col:col + k].transpose(1, 2, 0))
            for r in range(h - k + 1) for col in range(w - k + 1)]


def confusion_brute(truth, pred, n: int) -> list[list[int]]:
    cm = [[0] * n for _ in range(n)]
    for t, p in zip(np.ravel(truth).tolist(), np.ravel(pred).tolist()):
        cm[t][p] += 1
    return cm


def metrics_brute(cm) -> tuple[float, float]:
    n = len(cm)
    total = sum(sum(r) for r in cm)
    acc = sum(cm[i][i] for i in range(n)) / total
    ious = []
    for c in range(n):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(n)) - tp
        fn = sum(cm[c]) - tp
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return acc, sum(ious) / len(ious)


def single_conv_graph(weights, bias, w_fmt, b_fmt, in_fmt, out_fmt, shape) -> ModelGraph:
    f, _, k, _ = np.shape(weights)
    nodes = [
        Node("in", Kind.INPUT, out_fmt=in_fmt),
        Node("conv", Kind.CONV, kernel=k, filters=f, weight_fmt=w_fmt, bias_fmt=b_fmt,
             out_fmt=out_fmt, weights=np.asarray(weights, float), bias=np.asarray(bias, float)),
        Node("out", Kind.OUTPUT),
    ]
    return ModelGraph(nodes, [("in", "conv"), ("conv", "out")], shape, "single")


def chain_graph(kinds: list[Node], shape, in_fmt=INPUT_FMT) -> ModelGraph:
    nodes = [Node("in", Kind.INPUT, out_fmt=in_fmt), *kinds, Node("out", Kind.OUTPUT)]
    ids = [n.id for n in nodes]
    return ModelGraph(nodes, list(zip(ids, ids[1:])), shape, "chain")


POLICIES = [(r, o) for r in ("round_nearest_even", "truncate") for o in ("saturate", "wrap")]


def random_format(rng, signed=None, max_bits=10, policy=None) -> FxFormat:
    signed = bool(rng.integers(2)) if signed is None else signed
    total = int(rng.integers(2 if signed else 1, max_bits + 1))
    integer = int(rng.integers(0, total - int(signed) + 1))
    rounding, overflow = policy or POLICIES[int(rng.integers(len(POLICIES)))]
    return FxFormat(total, integer, signed, rounding, overflow)


def random_conv_case(rng, kernels=(1, 2, 3, 5), channels=(1, 3)):
    """(weights, bias, w_fmt, b_fmt, in_fmt, out_fmt, input mantissas) for one layer."""
    k = int(rng.choice(kernels))
    c = int(rng.choice(channels))
    f = int(rng.integers(1, 4))
    h = int(rng.integers(max(4, k), 17))
    w = int(rng.integers(max(4, k), 17))
    w_fmt = random_format(rng, signed=True)
    in_fmt = random_format(rng)
    acc_frac = w_fmt.frac_bits + in_fmt.frac_bits
    b_frac = int(rng.integers(0, acc_frac + 1))
    b_int = int(rng.integers(0, 6))
    b_fmt = FxFormat(b_frac + b_int + 1, b_int, True, *POLICIES[int(rng.integers(4))])
    out_fmt = random_format(rng, max_bits=12)
    span = 2.0 ** w_fmt.integer_bits * 1.2
    weights = rng.uniform(-span, span, size=(f, c, k, k))
    # some weights land exactly on the grid, including ties for the rounding mode
    grid = rng.random(weights.shape) < 0.3
    weights[grid] = np.round(weights[grid] * 2 ** (w_fmt.frac_bits + 1)) / 2 ** (w_fmt.frac_bits + 1)
    bias = rng.uniform(-(2.0 ** b_int), 2.0 ** b_int, size=f)
    x = rng.integers(in_fmt.min_mantissa, in_fmt.max_mantissa + 1, size=(c, h, w))
    return weights, bias, w_fmt, b_fmt, in_fmt, out_fmt, x
