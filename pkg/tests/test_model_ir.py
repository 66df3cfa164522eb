import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chain_graph, single_conv_graph
from streamseg.fixed_point import parse_format
from streamseg.model_ir import (
    FILTER_PRESETS,
    INPUT_FMT,
    BnParams,
    GraphError,
    Kind,
    ModelGraph,
    Node,
    QuantConfig,
    block_table,
    build_enet,
    fold_batchnorm,
    parameter_count,
    resolve_quant,
    validate,
)

S8, U8 = parse_format("s8.0"), parse_format("u8.0")


def _conv(nid, c_in, f, k=3, w_fmt=S8):
    return Node(nid, Kind.CONV, kernel=k, filters=f, weight_fmt=w_fmt, bias_fmt=S8,
                out_fmt=parse_format("s16.6"), weights=np.zeros((f, c_in, k, k)), bias=np.zeros(f))


class TestEnetBuilder:
    def test_enet_block_resolutions(self):
        rows = block_table(build_enet(FILTER_PRESETS["enet"]))
        assert [r[2] for r in rows] == [(32, 120, 76), (64, 60, 38), (64, 30, 19), (64, 30, 19),
                                        (128, 60, 38), (48, 120, 76), (4, 240, 152)]
        assert [r[1] for r in rows] == ["downsample", "downsample", "downsample", "",
                                        "upsample", "upsample", "upsample"]

    def test_enet8_shapes(self):
        rows = block_table(build_enet(FILTER_PRESETS["enet8"]))
        assert [r[2][1:] for r in rows] == [(120, 76), (60, 38), (30, 19), (30, 19),
                                            (60, 38), (120, 76), (240, 152)]
        assert [r[2][0] for r in rows] == [32, 8, 8, 8, 8, 8, 4]

    def test_parameter_counts_shrink_with_filters(self):
        counts = [parameter_count(build_enet(FILTER_PRESETS[n]))
                  for n in ("enet", "enet16", "enet12", "enet8", "enet6", "enet4")]
        assert counts == sorted(counts, reverse=True)

    def test_deterministic_for_a_seed(self):
        a = build_enet([2] * 6, (3, 16, 16), seed=3)
        b = build_enet([2] * 6, (3, 16, 16), seed=3)
        c = build_enet([2] * 6, (3, 16, 16), seed=4)
        assert all(np.array_equal(x.weights, y.weights) for x, y in zip(a.find(Kind.CONV), b.find(Kind.CONV)))
        assert not np.array_equal(a.node("initial.conv").weights, c.node("initial.conv").weights)

    def test_valid_and_ordered(self, tiny_model):
        assert validate(tiny_model) == []
        order = tiny_model.topo_order()
        assert order[0] == "input" and order[-1] == "output"
        pos = {n: i for i, n in enumerate(order)}
        assert all(pos[s] < pos[d] for s, d in tiny_model.edges)

    def test_skip_projection_when_shrinking(self):
        g = build_enet(FILTER_PRESETS["enet8"])
        assert g.node("b1.0.skip_proj").kind == Kind.CONV
        g = build_enet(FILTER_PRESETS["enethq"])
        assert g.node("b1.0.skip_proj").kind == Kind.CONV  # 8 -> 2
        assert g.node("b2.0.skip_pad").kind == Kind.CHANNEL_PAD  # 2 -> 4

    def test_quant_presets(self):
        g = build_enet([2] * 6, (3, 16, 16), quant="q4")
        fmts = g.formats()
        assert fmts["input"] == INPUT_FMT
        assert fmts["b1.0.relu1"] == parse_format("u4.0")
        assert g.node("b1.0.conv1").weight_fmt == parse_format("s4.0")
        hq = build_enet([2] * 6, (3, 16, 16), quant="hq").formats()
        assert hq["b1.0.relu1"].total_bits == 4 and hq["b3.0.relu1"].total_bits == 8
        with pytest.raises(ValueError):
            resolve_quant("q3")

    def test_hls_compat_mode(self):
        g = build_enet([2] * 6, (3, 16, 16), hls_compat_mode=True)
        f = g.node("initial.conv").weight_fmt
        assert (f.rounding, f.overflow) == ("truncate", "wrap")
        assert g.formats()["input"] == INPUT_FMT

    @pytest.mark.parametrize("shape", [(3, 20, 16), (3, 16, 12)])
    def test_input_must_divide_by_8(self, shape):
        with pytest.raises(ValueError):
            build_enet([2] * 6, shape)

    def test_weights_inside_weight_format(self, tiny_model):
        for n in tiny_model.find(Kind.CONV):
            assert np.abs(n.weights).max() < 1 and np.abs(n.bias).max() < 1


class TestValidate:
    def test_add_shape_mismatch(self):
        nodes = [Node("in", Kind.INPUT, out_fmt=U8), Node("p", Kind.MAXPOOL, kernel=2),
                 Node("add", Kind.ADD), Node("out", Kind.OUTPUT)]
        edges = [("in", "p"), ("p", "add"), ("in", "add"), ("add", "out")]
        diags = validate(ModelGraph(nodes, edges, (1, 4, 4)))
        assert any(d.node == "add" and "shapes differ" in d.message for d in diags)

    def test_cycle(self):
        nodes = [Node("in", Kind.INPUT, out_fmt=U8), Node("a", Kind.ADD), Node("r", Kind.RELU),
                 Node("out", Kind.OUTPUT)]
        edges = [("in", "a"), ("r", "a"), ("a", "r"), ("r", "out")]
        g = ModelGraph(nodes, edges, (1, 4, 4))
        assert any("cycle" in d.message for d in validate(g))
        with pytest.raises(GraphError):
            g.topo_order()

    def test_conv_weight_shape(self):
        g = chain_graph([_conv("c", 2, 4)], (3, 8, 8))
        assert any("weights shape" in d.message for d in validate(g))

    def test_structure_errors(self):
        g = ModelGraph([Node("in", Kind.INPUT, out_fmt=U8), Node("in", Kind.RELU)], [("in", "x")], (1, 4, 4))
        msgs = [str(d) for d in validate(g)]
        assert any("duplicate" in m for m in msgs)
        assert any("Output" in m for m in msgs)
        assert any("unknown node" in m for m in msgs)

    def test_dangling_and_arity(self):
        nodes = [Node("in", Kind.INPUT, out_fmt=U8), Node("r", Kind.RELU), Node("dead", Kind.RELU),
                 Node("out", Kind.OUTPUT)]
        edges = [("in", "r"), ("in", "dead"), ("r", "out"), ("in", "out")]
        msgs = [str(d) for d in validate(ModelGraph(nodes, edges, (1, 4, 4)))]
        assert any("dead" in m and "never consumed" in m for m in msgs)
        assert any(m.startswith("out") and "expects 1" in m for m in msgs)

    def test_accumulator_too_wide(self):
        wide = parse_format("s40.2")
        g = chain_graph([_conv("c", 3, 1, w_fmt=wide)], (3, 8, 8), in_fmt=parse_format("s30.2"))
        assert any("accumulator" in d.message for d in validate(g))

    def test_channel_pad_cannot_shrink(self):
        g = chain_graph([Node("p", Kind.CHANNEL_PAD, channels=2)], (3, 4, 4))
        assert any("cannot shrink" in d.message for d in validate(g))

    def test_shapes_raise_on_invalid(self):
        g = chain_graph([Node("p", Kind.MAXPOOL, kernel=8)], (3, 4, 4))
        with pytest.raises(GraphError):
            g.shapes()

    def test_pad_and_upsample_shapes(self):
        g = chain_graph([Node("u", Kind.UPSAMPLE, kernel=2), Node("p", Kind.SPATIAL_PAD, pad=1),
                         Node("c", Kind.CHANNEL_PAD, channels=5)], (3, 3, 4))
        s = g.shapes()
        assert s["u"] == (3, 6, 8) and s["p"] == (3, 7, 9) and s["c"] == (5, 7, 9)


class TestConvParams:
    def test_quantized_and_aligned(self):
        w = np.full((1, 1, 1, 1), 0.5)
        g = single_conv_graph(w, np.array([0.25]), S8, S8, U8, U8, (1, 2, 2))
        p = g.conv_params("conv")
        assert p.weights.ravel().tolist() == [64]
        assert p.acc.frac_bits == 15
        assert p.bias.tolist() == [32 << 8]  # 0.25 in s8.0 is 32, shifted from 7 to 15 frac bits
        assert g.conv_params("conv") is p


class TestFoldBatchnorm:
    def test_identity_bn(self):
        w, b = np.ones((2, 1, 1, 1)), np.array([1.0, 2.0])
        bn = BnParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), epsilon=0.0)
        wf, bf = fold_batchnorm(w, b, bn)
        assert np.array_equal(wf, w) and np.array_equal(bf, b)

    def test_hand_example(self):
        bn = BnParams(np.array([2.0]), np.array([1.0]), np.array([0.5]), np.array([4.0]), epsilon=0.0)
        wf, bf = fold_batchnorm(np.array([[[[3.0]]]]), np.array([1.5]), bn)
        # y = 2 * (3x + 1.5 - 0.5) / 2 + 1 = 3x + 2
        assert wf.ravel().tolist() == [3.0] and bf.tolist() == [2.0]

    @settings(max_examples=60)
    @given(st.integers(1, 4), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 2 ** 31))
    def test_matches_conv_then_bn(self, f, c, k, seed):
        rng = np.random.default_rng(seed)
        w, b = rng.normal(size=(f, c, k, k)), rng.normal(size=f)
        bn = BnParams(rng.uniform(0.2, 2, f), rng.normal(size=f), rng.normal(size=f), rng.uniform(0.1, 2, f))
        x = rng.normal(size=(c, k, k))
        y = np.tensordot(w, x, axes=3) + b
        y = (y - bn.moving_mean) / np.sqrt(bn.moving_variance + bn.epsilon) * bn.gamma + bn.beta
        wf, bf = fold_batchnorm(w, b, bn)
        assert np.allclose(np.tensordot(wf, x, axes=3) + bf, y, rtol=1e-9, atol=1e-12)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            BnParams(np.ones(1), np.zeros(1), np.zeros(1), np.array([-1.0]))
        with pytest.raises(ValueError):
            fold_batchnorm(np.ones((2, 1, 1, 1)), np.zeros(2),
                           BnParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3)))


def test_quant_config_uniform():
    q = QuantConfig.uniform(4)
    assert (str(q.weight), str(q.bias), str(q.conv_out), str(q.act)) == ("s4.0", "s4.0", "s16.6", "u4.0")
