import math

import numpy as np
import pytest

from oracles import single_conv_graph
from streamseg.fixed_point import FxTensor, parse_format
from streamseg.files import preprocess
from streamseg.model_ir import build_enet
from streamseg.reference import error_bounds, run_fixed, run_float


@pytest.mark.parametrize("quant", ["q8", "q4", "hq"])
def test_float_vs_fixed_within_bound(quant):
    g = build_enet([2] * 6, (3, 16, 16), quant, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = preprocess(rng.integers(0, 256, (3, 16, 16)))
        fixed = run_fixed(g, x)
        flt = run_float(g, x.values())
        bounds = error_bounds(g, flt)
        for nid in g.topo_order():
            err = np.abs(fixed[nid].values() - flt[nid]).max()
            assert err <= bounds[nid] + 1e-9, (nid, err, bounds[nid])


def test_exact_layer_has_no_error():
    # weights, bias and outputs all exactly representable; the bound is only the cast's half step
    w = np.full((1, 1, 1, 1), 0.5)
    s8, u8 = parse_format("s8.0"), parse_format("u8.0")
    g = single_conv_graph(w, np.zeros(1), s8, s8, u8, parse_format("s16.6"), (1, 2, 2))
    x = FxTensor(np.array([[[2, 4], [6, 8]]]), u8)
    flt = run_float(g, x.values())
    assert error_bounds(g, flt)["conv"] == 2.0 ** -10
    assert run_fixed(g, x)["conv"].values().tolist() == flt["conv"].tolist()


def test_wrap_overflow_gives_infinite_bound():
    w = np.full((1, 1, 1, 1), 0.9)
    s8 = parse_format("s8.0")
    g = single_conv_graph(w, np.full(1, 0.9), s8, s8, parse_format("u8.0"), s8.with_policy(overflow="wrap"),
                          (1, 2, 2))
    x = FxTensor(np.full((1, 2, 2), 255), parse_format("u8.0"))
    assert math.isinf(error_bounds(g, run_float(g, x.values()))["conv"])


def test_input_checks(tiny_model):
    with pytest.raises(ValueError):
        run_fixed(tiny_model, FxTensor(np.zeros((3, 16, 16), dtype=np.int64), parse_format("s8.0")))
    with pytest.raises(ValueError):
        run_fixed(tiny_model, preprocess(np.zeros((3, 8, 8))))
