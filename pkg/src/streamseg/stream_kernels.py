"""
Streaming compute engines.

Every engine consumes one pixel-vector (all channels of one spatial position,
raster order) per ``step`` and either emits nothing, one result, or - for the
shape-changing kernels - a short list of results. Pixel-vectors are int64
mantissa arrays of shape ``(C,)``.

Two window generators are provided and must produce identical window
sequences: :class:`LineBufferState` (K-1 shift registers of depth W feeding a
K x K window) and :class:`EncodedWindowState` (the older scheme that copies
each pixel into up to K^2 buffers of depth K * (W - K + 1)).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .fixed_point import FxFormat, FxTensor, requantize_array
from .model_ir import ConvParams


class StreamError(RuntimeError):
    """A kernel was driven outside its contract (e.g. fed past the end of an image)."""


@dataclass
class WindowEvent:
    window: np.ndarray  # (K, K, C) mantissas
    out_row: int
    out_col: int


class LineBufferState:
    """Sliding-window generator built from a chain of K-1 row shift registers.

    Each step pushes the new pixel into the first register; a full register
    pops its oldest entry into the next one. The popped pixels stacked above
    the new pixel form the new rightmost window column.
    """

    def __init__(self, kernel: int, height: int, width: int, stride: int = 1):
        if kernel < 1 or height < kernel or width < kernel:
            raise StreamError(f"{kernel}x{kernel} window does not fit a {height}x{width} image")
        self.kernel = kernel
        self.height = height
        self.width = width
        self.stride = stride
        self.registers = [deque() for _ in range(kernel - 1)]
        self.window: deque = deque(maxlen=kernel)  # columns, each top-to-bottom
        self.pixels_seen = 0
        self.row = 0
        self.col = 0
        self.peak_stored = 0

    @property
    def capacity(self) -> int:
        return (self.kernel - 1) * self.width + self.kernel * self.kernel

    def stored(self) -> int:
        in_window = sum(1 for column in self.window for p in column if p is not None)
        return sum(len(r) for r in self.registers) + in_window

    def step(self, pixel: np.ndarray) -> WindowEvent | None:
        if self.pixels_seen >= self.height * self.width:
            raise StreamError("line buffer fed past the end of the image")
        k = self.kernel
        column = [None] * k
        column[k - 1] = pixel
        carry = pixel
        for i, reg in enumerate(self.registers):
            popped = reg.popleft() if len(reg) == self.width else None
            reg.append(carry)
            if popped is None:
                break
            column[k - 2 - i] = popped
            carry = popped
        self.window.append(column)

        stored = self.stored()
        assert stored <= self.capacity, "line buffer exceeded its storage bound"
        self.peak_stored = max(self.peak_stored, stored)

        event = None
        r, c = self.row, self.col
        top, left = r - k + 1, c - k + 1
        if top >= 0 and left >= 0 and top % self.stride == 0 and left % self.stride == 0:
            win = np.array([[col[i] for col in self.window] for i in range(k)], dtype=np.int64)
            event = WindowEvent(win, top // self.stride, left // self.stride)

        self.pixels_seen += 1
        self.col += 1
        if self.col == self.width:
            self.col = 0
            self.row += 1
        return event


class EncodedWindowState:
    """Window generator that replicates each pixel into every window it belongs to.

    Buffer ``(ki, kj)`` holds the pixel at kernel offset ``(ki, kj)`` for each
    in-flight output position; K output rows can be in flight, hence a depth
    of K * (W - K + 1) per buffer.
    """

    def __init__(self, kernel: int, height: int, width: int, stride: int = 1):
        if kernel < 1 or height < kernel or width < kernel:
            raise StreamError(f"{kernel}x{kernel} window does not fit a {height}x{width} image")
        self.kernel = kernel
        self.height = height
        self.width = width
        self.stride = stride
        self.out_width = width - kernel + 1
        self.depth = kernel * self.out_width if kernel > 1 else 0
        self.buffers = [[None] * self.depth for _ in range(kernel * kernel if kernel > 1 else 0)]
        self.pixels_seen = 0
        self.row = 0
        self.col = 0
        self._stored = 0
        self.peak_stored = 0

    @property
    def capacity(self) -> int:
        return len(self.buffers) * self.depth

    def stored(self) -> int:
        return self._stored

    def _slot(self, orow: int, ocol: int) -> int:
        return (orow % self.kernel) * self.out_width + ocol

    def step(self, pixel: np.ndarray) -> WindowEvent | None:
        if self.pixels_seen >= self.height * self.width:
            raise StreamError("encoded window fed past the end of the image")
        k, s = self.kernel, self.stride
        r, c = self.row, self.col
        self.pixels_seen += 1
        self.col += 1
        if self.col == self.width:
            self.col = 0
            self.row += 1

        if k == 1:
            if r % s == 0 and c % s == 0:
                return WindowEvent(pixel.reshape(1, 1, -1).astype(np.int64), r // s, c // s)
            return None

        for ki in range(k):
            orow = r - ki
            if orow < 0 or orow > self.height - k or orow % s:
                continue
            for kj in range(k):
                ocol = c - kj
                if ocol < 0 or ocol > self.width - k or ocol % s:
                    continue
                buf, slot = self.buffers[ki * k + kj], self._slot(orow, ocol)
                assert buf[slot] is None, "encoded buffer slot overwritten before use"
                buf[slot] = pixel
                self._stored += 1

        stored = self._stored
        assert stored <= self.capacity, "encoded buffers exceeded their storage bound"
        self.peak_stored = max(self.peak_stored, stored)

        top, left = r - k + 1, c - k + 1
        if top < 0 or left < 0 or top % s or left % s:
            return None
        slot = self._slot(top, left)
        win = np.empty((k, k, len(pixel)), dtype=np.int64)
        for ki in range(k):
            for kj in range(k):
                buf = self.buffers[ki * k + kj]
                win[ki, kj] = buf[slot]
                buf[slot] = None
        self._stored -= k * k
        return WindowEvent(win, top // s, left // s)


WINDOW_IMPLS = {"line": LineBufferState, "encoded": EncodedWindowState}


def make_window(impl: str, kernel: int, height: int, width: int, stride: int = 1):
    try:
        cls = WINDOW_IMPLS[impl]
    except KeyError:
        raise ValueError(f"unknown window implementation {impl!r}; use 'line' or 'encoded'") from None
    return cls(kernel, height, width, stride)


def line_buffer_step(state: LineBufferState, pixel: np.ndarray) -> WindowEvent | None:
    return state.step(pixel)


def encoded_window_step(state: EncodedWindowState, pixel: np.ndarray) -> WindowEvent | None:
    return state.step(pixel)


def same_padding(kernel: int) -> tuple[int, int]:
    """(before, after) zero rows/cols; the extra one goes bottom/right for even K."""
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


def conv_window(window: np.ndarray, params: ConvParams) -> np.ndarray:
    """One output pixel-vector (one value per filter) from a populated window."""
    acc = np.tensordot(params.weights, window.transpose(2, 0, 1), axes=3) + params.bias
    params.acc.check_array(acc)
    return requantize_array(acc, params.acc.frac_bits, params.out_fmt)


def pool_window(window: np.ndarray) -> np.ndarray:
    return window.max(axis=(0, 1))


class PoolState:
    """k x k max pooling, stride k, driven through the same window generator."""

    def __init__(self, kernel: int, height: int, width: int, impl: str = "line"):
        self.window = make_window(impl, kernel, height, width, stride=kernel)

    def step(self, pixel: np.ndarray) -> np.ndarray | None:
        event = self.window.step(pixel)
        return None if event is None else pool_window(event.window)


def pool_step(state: PoolState, pixel: np.ndarray) -> np.ndarray | None:
    return state.step(pixel)


class UpsampleState:
    """Nearest-neighbour upsampling with a one-row replay buffer."""

    def __init__(self, factor: int, width: int):
        self.factor = factor
        self.width = width
        self.row_buffer: list[np.ndarray] = []

    def step(self, pixel: np.ndarray) -> list[np.ndarray]:
        f = self.factor
        out = [pixel] * f
        self.row_buffer.append(pixel)
        if len(self.row_buffer) == self.width:
            replay = [p for p in self.row_buffer for _ in range(f)]
            out.extend(replay * (f - 1))
            self.row_buffer = []
        return out


def upsample_step(state: UpsampleState, pixel: np.ndarray) -> list[np.ndarray]:
    return state.step(pixel)


class SpatialPadState:
    """Append ``pad`` zero columns to each row and ``pad`` zero rows at the bottom."""

    def __init__(self, pad: int, height: int, width: int):
        self.pad = pad
        self.height = height
        self.width = width
        self.seen = 0

    def step(self, pixel: np.ndarray) -> list[np.ndarray]:
        self.seen += 1
        out = [pixel]
        if self.pad and self.seen % self.width == 0:
            zero = np.zeros_like(pixel)
            out.extend([zero] * self.pad)
            if self.seen == self.height * self.width:
                out.extend([zero] * (self.pad * (self.width + self.pad)))
        return out


def spatial_pad_step(state: SpatialPadState, pixel: np.ndarray) -> list[np.ndarray]:
    return state.step(pixel)


def channel_pad_step(pixel: np.ndarray, channels: int) -> np.ndarray:
    return np.concatenate([pixel, np.zeros(channels - len(pixel), dtype=np.int64)])


def relu_step(pixel: np.ndarray, in_fmt: FxFormat, out_fmt: FxFormat) -> np.ndarray:
    return requantize_array(np.maximum(pixel, 0), in_fmt.frac_bits, out_fmt)


def add_step(a: np.ndarray, b: np.ndarray, fmt_a: FxFormat, fmt_b: FxFormat,
             out_fmt: FxFormat) -> np.ndarray:
    """Exact sum at the finer of the two fractions, then cast (saturating by default)."""
    frac = max(fmt_a.frac_bits, fmt_b.frac_bits)
    total = (a << (frac - fmt_a.frac_bits)) + (b << (frac - fmt_b.frac_bits))
    return requantize_array(total, frac, out_fmt)


# -- whole-tensor drivers -------------------------------------------------------

def stream_pixels(tensor: FxTensor) -> Iterator[np.ndarray]:
    m = tensor.mantissas
    for r in range(m.shape[1]):
        for c in range(m.shape[2]):
            yield m[:, r, c].copy()


def collect(pixels: Iterable[np.ndarray], shape, fmt: FxFormat) -> FxTensor:
    c, h, w = shape
    arr = np.array(list(pixels), dtype=np.int64)
    if arr.shape != (h * w, c):
        raise StreamError(f"collected {arr.shape[0]} pixels, expected {h * w} of {c} channels")
    return FxTensor(arr.T.reshape(c, h, w), fmt)


def padded_stream(pixels: Iterable[np.ndarray], height: int, width: int, channels: int,
                  kernel: int) -> Iterator[np.ndarray]:
    """Raster stream with a same-padding zero border injected."""
    before, after = same_padding(kernel)
    zero = np.zeros(channels, dtype=np.int64)
    it = iter(pixels)
    for r in range(-before, height + after):
        for c in range(-before, width + after):
            if 0 <= r < height and 0 <= c < width:
                yield next(it)
            else:
                yield zero


def window_sequence(tensor: FxTensor, kernel: int, impl: str = "line",
                    padding: str = "same", stride: int = 1) -> list[WindowEvent]:
    c, h, w = tensor.shape
    pixels = stream_pixels(tensor)
    if padding == "same":
        pixels = padded_stream(pixels, h, w, c, kernel)
        before, after = same_padding(kernel)
        h, w = h + before + after, w + before + after
    elif padding != "valid":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    state = make_window(impl, kernel, h, w, stride)
    events = []
    for p in pixels:
        ev = state.step(p)
        if ev is not None:
            events.append(ev)
    return events


def conv_stream(tensor: FxTensor, params: ConvParams, impl: str = "line",
                padding: str = "same") -> FxTensor:
    """Run one ConvBN layer over a whole tensor through the streaming engine."""
    c, h, w = tensor.shape
    k = params.kernel
    out_h, out_w = (h, w) if padding == "same" else (h - k + 1, w - k + 1)
    events = window_sequence(tensor, k, impl, padding)
    outs = [conv_window(ev.window, params) for ev in events]
    return collect(outs, (params.weights.shape[0], out_h, out_w), params.out_fmt)


def pool_stream(tensor: FxTensor, kernel: int, impl: str = "line") -> FxTensor:
    c, h, w = tensor.shape
    state = PoolState(kernel, h, w, impl)
    outs = [o for o in map(state.step, stream_pixels(tensor)) if o is not None]
    return collect(outs, (c, h // kernel, w // kernel), tensor.fmt)


def upsample_stream(tensor: FxTensor, factor: int) -> FxTensor:
    c, h, w = tensor.shape
    state = UpsampleState(factor, w)
    outs = [o for p in stream_pixels(tensor) for o in state.step(p)]
    return collect(outs, (c, h * factor, w * factor), tensor.fmt)


def spatial_pad_stream(tensor: FxTensor, pad: int) -> FxTensor:
    c, h, w = tensor.shape
    state = SpatialPadState(pad, h, w)
    outs = [o for p in stream_pixels(tensor) for o in state.step(p)]
    return collect(outs, (c, h + pad, w + pad), tensor.fmt)
