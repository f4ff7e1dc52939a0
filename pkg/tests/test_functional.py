from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lupulus.config import HwConfig, LayerSpec
from lupulus.functional import (FunctionalError, Tensor, quantize, random_operands,
                                reference_conv, reference_conv_fast, simulate_functional)
from lupulus.mapper import MappingError, OutputTile, map_layer
from lupulus.scheduler import build_schedule

from conftest import small_hw


def run(layer, x, w, b=None, config=None):
    plan = map_layer(layer, config or HwConfig())
    return simulate_functional(build_schedule(plan), x, w, b)


def t8(a):
    return Tensor(np.asarray(a), 8)


def test_identity_1x1():
    layer = LayerSpec("conv", 1, 4, 4, 1)
    x = t8(np.arange(16).reshape(1, 4, 4) - 8)
    w = t8([[[[1]]]])
    assert reference_conv(layer, x, w).data.tolist() == x.data.tolist()
    assert run(layer, x, w).data.tolist() == x.data.tolist()


def test_hand_example():
    layer = LayerSpec("conv", 1, 2, 2, 1, 2, 2)
    x, w = t8([[[1, 2], [3, 4]]]), t8([[[[1, 0], [0, 1]]]])
    assert reference_conv(layer, x, w).data.tolist() == [[[5]]]
    assert run(layer, x, w).data.tolist() == [[[5]]]


def test_zero_weights_and_zero_inputs(rng):
    layer = LayerSpec("conv", 3, 7, 7, 5, 3, 3, padding=1)
    x, w, _ = random_operands(layer, rng)
    zero_w = t8(np.zeros_like(w.data))
    assert not run(layer, x, zero_w).data.any()
    assert not run(layer, t8(np.zeros_like(x.data)), w).data.any()


def test_saturation_at_psum_max():
    layer = LayerSpec("conv", 1, 5, 5, 1, 3, 3)
    x, w = t8(np.full((1, 5, 5), 127)), t8(np.full((1, 1, 3, 3), 127))
    out = run(layer, x, w)
    assert 9 * 127 * 127 > 32767
    assert (out.data == 32767).all() and out == reference_conv(layer, x, w)
    neg = run(layer, t8(np.full((1, 5, 5), -128)), w)
    assert (neg.data == -32768).all()


def test_bias_and_relu():
    layer = LayerSpec("conv", 1, 3, 3, 2, 1, 1, has_bias=True, apply_relu=True)
    x = t8(np.array([[[1, -2, 3], [0, 5, -6], [7, 8, -9]]]))
    w = t8(np.array([[[[2]]], [[[-1]]]]))
    b = Tensor(np.array([1, 0]), 16)
    out = run(layer, x, w, b)
    assert out.data[0].tolist() == [[3, 0, 7], [1, 11, 0], [15, 17, 0]]
    assert out.data[1].tolist() == [[0, 2, 0], [0, 0, 6], [0, 0, 9]]


def test_fc_layer_with_vector_input(rng):
    layer = LayerSpec.fc(7, 20, has_bias=True)
    w = t8(rng.integers(-128, 128, size=(7, 20)))
    x = t8(rng.integers(-128, 128, size=20))
    b = Tensor(rng.integers(-100, 100, size=7), 16)
    out = run(layer, x, w, b)
    want = np.clip(w.data @ x.data + b.data, -32768, 32767)
    assert out.shape == (7,) and out.data.tolist() == want.tolist()


def test_quantize():
    assert quantize(0.0, 8).data == 0
    assert quantize([-200, 200], 8).data.tolist() == [-128, 127]
    assert quantize([0.5, -0.5, 2.5, 1.49], 8).data.tolist() == [1, -1, 3, 1]
    assert quantize([40000], 16).data.tolist() == [32767]
    with pytest.raises(ValueError):
        quantize([1.0], 4)


def test_tensor_range_checked():
    with pytest.raises(ValueError):
        Tensor(np.array([128]), 8)


@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=60), st.sampled_from([1, 2, 3]))
def test_tensor_roundtrip(values, ndim):
    arr = np.array(values)
    shape = {1: (len(values),), 2: (1, len(values)), 3: (1, 1, len(values))}[ndim]
    t = Tensor(arr.reshape(shape), 16)
    assert Tensor.from_bytes(t.to_bytes()) == t
    assert Tensor.from_text(t.to_text()) == t


def test_tensor_files(tmp_path):
    t = t8(np.arange(-4, 4).reshape(2, 2, 2))
    t.save(tmp_path / "a.bin")
    t.save(tmp_path / "a.json")
    assert Tensor.load(tmp_path / "a.bin") == t == Tensor.load(tmp_path / "a.json")
    with pytest.raises(ValueError):
        Tensor.from_bytes(b"nope")


def test_shape_mismatch_rejected(rng):
    layer = LayerSpec("conv", 2, 5, 5, 3, 3, 3)
    x, w, _ = random_operands(layer, rng)
    with pytest.raises(ValueError):
        reference_conv(layer, t8(x.data[:1]), w)
    with pytest.raises(ValueError):
        run(layer, x, t8(w.data[:2]))


def test_accumulator_overflow_is_reported(rng):
    layer = LayerSpec("conv", 1, 40, 40, 1, 3, 3)
    plan = map_layer(layer, HwConfig())
    whole = OutputTile(range(layer.out_height), range(layer.out_width))
    bad = replace(plan, tiles=(whole,))
    x, w, _ = random_operands(layer, rng)
    with pytest.raises(FunctionalError, match="accumulator"):
        simulate_functional(build_schedule(bad), x, w)


@st.composite
def cases(draw):
    k = draw(st.sampled_from([1, 2, 3, 5, 7]))
    h, w = draw(st.integers(k, 12)), draw(st.integers(k, 12))
    layer = LayerSpec("conv", draw(st.integers(1, 5)), h, w, draw(st.integers(1, 9)), k, k,
                      draw(st.integers(1, 4)), draw(st.integers(0, 2)),
                      has_bias=draw(st.booleans()), apply_relu=draw(st.booleans()))
    config = draw(st.sampled_from([HwConfig(), small_hw(),
                                   HwConfig(accumulator_bytes=64, pe_spm_bytes=2),
                                   HwConfig(double_buffer_spm=False, input_buffer_bytes=16)]))
    seed = draw(st.integers(0, 2**32 - 1))
    return layer, config, seed


@given(cases())
def test_matches_both_oracles(case):
    layer, config, seed = case
    try:
        map_layer(layer, config)
    except MappingError:
        return
    x, w, b = random_operands(layer, np.random.default_rng(seed), config)
    got = run(layer, x, w, b, config)
    assert got == reference_conv(layer, x, w, b) == reference_conv_fast(layer, x, w, b)


@given(cases())
def test_filter_permutation_permutes_outputs(case):
    layer, config, seed = case
    rng = np.random.default_rng(seed)
    x, w, b = random_operands(layer, rng, config)
    perm = rng.permutation(layer.out_channels)
    try:
        base = run(layer, x, w, b, config)
    except MappingError:
        return
    bp = None if b is None else Tensor(b.data[perm], 16)
    moved = run(layer, x, t8(w.data[perm]), bp, config)
    assert np.array_equal(moved.data, base.data[perm])


@given(cases())
def test_linear_without_saturation(case):
    layer, config, seed = case
    layer = replace(layer, has_bias=False, apply_relu=False)
    rng = np.random.default_rng(seed)
    shape_x = (layer.in_channels, layer.in_height, layer.in_width)
    shape_w = (layer.out_channels, layer.in_channels, layer.kernel_height, layer.kernel_width)
    a, c = rng.integers(-3, 4, size=shape_x), rng.integers(-3, 4, size=shape_x)
    w = t8(rng.integers(-3, 4, size=shape_w))
    try:
        sa = run(layer, t8(a), w, config=config)
    except MappingError:
        return
    sc = run(layer, t8(c), w, config=config)
    both = run(layer, t8(a + c), w, config=config)
    assert np.array_equal(both.data, sa.data + sc.data)
