import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_dense, random_conv_case, single_conv_graph, windows_valid
from streamseg.fixed_point import FxTensor, parse_format
from streamseg.stream_kernels import (
    EncodedWindowState,
    LineBufferState,
    PoolState,
    SpatialPadState,
    StreamError,
    UpsampleState,
    add_step,
    channel_pad_step,
    conv_stream,
    conv_window,
    encoded_window_step,
    line_buffer_step,
    make_window,
    pool_stream,
    relu_step,
    spatial_pad_stream,
    upsample_stream,
    window_sequence,
)

U8, S8, S16 = parse_format("u8.0"), parse_format("s8.0"), parse_format("s16.6")


def _pixels(h, w, c=1):
    return [np.array([r * w + col] * c, dtype=np.int64) for r in range(h) for col in range(w)]


@pytest.mark.parametrize("cls", [LineBufferState, EncodedWindowState])
class TestWindowGenerators:
    def test_first_window_at_index_10(self, cls):
        state = cls(3, 4, 4)
        emitted = [i for i, p in enumerate(_pixels(4, 4)) if state.step(p) is not None]
        assert emitted[0] == 2 * 4 + 2
        assert len(emitted) == 4

    def test_kernel_1_is_pass_through(self, cls):
        state = cls(1, 3, 5)
        for p in _pixels(3, 5, 2):
            ev = state.step(p)
            assert ev is not None and ev.window.shape == (1, 1, 2)
            assert np.array_equal(ev.window[0, 0], p)

    @pytest.mark.parametrize("k,h,w", [(2, 4, 7), (3, 5, 5), (5, 9, 6), (3, 16, 16)])
    def test_valid_mode_windows(self, cls, k, h, w):
        x = np.random.default_rng(k * h * w).integers(0, 256, size=(2, h, w))
        events = window_sequence(FxTensor(x, U8), k, "line" if cls is LineBufferState else "encoded", "valid")
        assert len(events) == (h - k + 1) * (w - k + 1)
        for ev, (r, c, win) in zip(events, windows_valid(x, k)):
            assert (ev.out_row, ev.out_col) == (r, c)
            assert np.array_equal(ev.window, win)

    def test_fed_past_end(self, cls):
        state = cls(2, 2, 2)
        for p in _pixels(2, 2):
            state.step(p)
        with pytest.raises(StreamError):
            state.step(np.zeros(1, dtype=np.int64))

    def test_window_must_fit(self, cls):
        with pytest.raises(StreamError):
            cls(5, 4, 8)

    def test_storage_stays_within_capacity(self, cls):
        state = cls(3, 8, 8)
        for p in _pixels(8, 8):
            state.step(p)
            assert state.stored() <= state.capacity
        assert state.peak_stored <= state.capacity


def test_capacities():
    assert LineBufferState(3, 240, 240).capacity == 2 * 240 + 9
    assert EncodedWindowState(3, 240, 240).capacity == 6426
    assert EncodedWindowState(1, 4, 4).capacity == 0


def test_line_buffer_registers_hold_at_most_w():
    state = LineBufferState(3, 6, 5)
    for p in _pixels(6, 5):
        state.step(p)
        assert all(len(r) <= 5 for r in state.registers)
    assert state.peak_stored <= 2 * 5 + 9


def test_step_function_aliases():
    a, b = LineBufferState(2, 3, 3), EncodedWindowState(2, 3, 3)
    for p in _pixels(3, 3):
        ea, eb = line_buffer_step(a, p), encoded_window_step(b, p)
        assert (ea is None) == (eb is None)
    with pytest.raises(ValueError):
        make_window("fifo", 3, 4, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_line_and_encoded_agree(k, seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
    x = FxTensor(rng.integers(-128, 128, size=(int(rng.integers(1, 4)), h, w)), S8)
    for padding in ("same", "valid"):
        a = window_sequence(x, k, "line", padding)
        b = window_sequence(x, k, "encoded", padding)
        assert [(e.out_row, e.out_col) for e in a] == [(e.out_row, e.out_col) for e in b]
        assert all(np.array_equal(e.window, f.window) for e, f in zip(a, b))
    assert len(window_sequence(x, k, "line", "same")) == h * w


class TestConv:
    def test_identity_1x1(self):
        x = FxTensor(np.arange(12).reshape(1, 3, 4), U8)
        g = single_conv_graph(np.full((1, 1, 1, 1), 1.0), np.zeros(1), parse_format("s8.6"), S8, U8, U8, x.shape)
        assert conv_stream(x, g.conv_params("conv")) == x

    def test_zero_kernel(self):
        x = FxTensor(np.random.default_rng(0).integers(0, 256, (3, 5, 5)), U8)
        g = single_conv_graph(np.zeros((2, 3, 3, 3)), np.zeros(2), S8, S8, U8, S16, x.shape)
        assert not conv_stream(x, g.conv_params("conv")).mantissas.any()

    def test_window_oracle(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        g = single_conv_graph(w, rng.uniform(-1, 1, 3), S8, S8, U8, S16, (2, 3, 3))
        win = rng.integers(0, 256, (3, 3, 2))
        got = conv_window(win, g.conv_params("conv"))
        want = conv_dense(win.transpose(2, 0, 1).tolist(), w, g.node("conv").bias, S8, S8, U8, S16, "valid")
        assert got.tolist() == [plane[0][0] for plane in want]

    @pytest.mark.parametrize("seed", range(25))
    @pytest.mark.parametrize("impl", ["line", "encoded"])
    def test_dense_oracle(self, seed, impl):
        weights, bias, w_fmt, b_fmt, in_fmt, out_fmt, x = random_conv_case(np.random.default_rng(seed))
        g = single_conv_graph(weights, bias, w_fmt, b_fmt, in_fmt, out_fmt, x.shape)
        for padding in ("same", "valid"):
            got = conv_stream(FxTensor(x, in_fmt), g.conv_params("conv"), impl, padding)
            assert got.mantissas.tolist() == conv_dense(x.tolist(), weights, bias, w_fmt, b_fmt,
                                                        in_fmt, out_fmt, padding)


class TestPool:
    def test_constant_image(self):
        x = FxTensor(np.full((2, 6, 8), 9), U8)
        out = pool_stream(x, 2)
        assert out.shape == (2, 3, 4) and (out.mantissas == 9).all()

    def test_tile_max(self):
        state = PoolState(2, 2, 2)
        outs = [state.step(np.array([v])) for v in (1, 2, 3, 4)]
        assert outs[:3] == [None, None, None] and outs[3].tolist() == [4]

    def test_checkerboard(self):
        r, c = np.indices((8, 8))
        x = FxTensor(((r + c) % 2)[None], U8)
        assert (pool_stream(x, 2).mantissas == 1).all()

    @pytest.mark.parametrize("impl", ["line", "encoded"])
    def test_random_against_reshape(self, impl):
        x = np.random.default_rng(1).integers(-128, 128, (3, 8, 12))
        want = x.reshape(3, 4, 2, 6, 2).max(axis=(2, 4))
        assert pool_stream(FxTensor(x, S8), 2, impl).mantissas.tolist() == want.tolist()


class TestElementwise:
    def test_upsample_single_pixel(self):
        x = FxTensor(np.array([[[7]], [[3]]]), U8)
        out = upsample_stream(x, 2)
        assert out.shape == (2, 2, 2) and out.mantissas[:, :, :].tolist() == [[[7, 7], [7, 7]], [[3, 3], [3, 3]]]

    def test_upsample_matches_repeat(self):
        x = np.random.default_rng(2).integers(0, 256, (2, 3, 5))
        want = x.repeat(2, axis=1).repeat(2, axis=2)
        assert upsample_stream(FxTensor(x, U8), 2).mantissas.tolist() == want.tolist()
        state = UpsampleState(2, 5)
        assert len(state.step(x[:, 0, 0])) == 2

    def test_spatial_pad(self):
        x = np.arange(6).reshape(1, 2, 3) + 1
        out = spatial_pad_stream(FxTensor(x, U8), 1).mantissas
        assert out.tolist() == [[[1, 2, 3, 0], [4, 5, 6, 0], [0, 0, 0, 0]]]
        assert len(SpatialPadState(0, 2, 2).step(np.zeros(1))) == 1

    def test_channel_pad(self):
        assert channel_pad_step(np.array([4, 5]), 4).tolist() == [4, 5, 0, 0]

    def test_relu(self):
        out = relu_step(np.array([-300, -1, 0, 200]), S16, U8)
        # s16.6 has 9 fraction bits; u8.0 keeps 8 of them
        assert out.tolist() == [0, 0, 0, 100]

    def test_add_saturates(self):
        a = np.array([192])  # 0.75 in u8.0
        assert add_step(a, a, U8, U8, U8).tolist() == [255]

    def test_add_aligns_fractions(self):
        # 0.5 (u8.0) + 1.0 (s16.6) in s16.6
        assert add_step(np.array([128]), np.array([512]), U8, S16, S16).tolist() == [768]
