import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flora.adapters import (FrozenLayer, TuckerAdapter, init_lora, init_tucker, merge,
                            reconstruct, adapter_delta)
from flora.layers import conv2d_adapted, conv2d_forward, linear_forward

from oracles import conv_loop


def randomize(adapter, rng):
    for p in adapter.parameters():
        p[...] = rng.standard_normal(p.shape)
    return adapter


def test_linear_zero_init_exact():
    rng = np.random.default_rng(0)
    layer = FrozenLayer(rng.standard_normal((5, 4)), "linear")
    x = rng.standard_normal(4)
    out = linear_forward(x, layer, init_tucker((5, 4), (2, 2), 0.4, seed=1))
    assert out.tobytes() == (layer.weight @ x).tobytes()
    assert linear_forward(x, layer).tobytes() == (layer.weight @ x).tobytes()


def test_linear_rank_one_example():
    layer = FrozenLayer(np.zeros((2, 2)), "linear")
    ad = TuckerAdapter(core=[[2.0]], factors=[[[1.0], [3.0]], [[2.0], [1.0]]], scale=1.0)
    np.testing.assert_array_equal(linear_forward(np.array([1.0, 0.0]), layer, ad), [4, 12])


def test_linear_shape_mismatch():
    layer = FrozenLayer(np.zeros((2, 3)), "linear")
    with pytest.raises(ValueError):
        linear_forward(np.ones(2), layer)
    with pytest.raises(ValueError):
        linear_forward(np.ones(3), layer, init_tucker((3, 3), (1, 1), seed=0))


@settings(max_examples=200, deadline=None)
@given(d1=st.integers(1, 64), d2=st.integers(1, 64), seed=st.integers(0, 2**32 - 1),
       lora=st.booleans(), data=st.data())
def test_linear_merge_equivalence(d1, d2, seed, lora, data):
    rng = np.random.default_rng(seed)
    layer = FrozenLayer(rng.standard_normal((d1, d2)), "linear")
    s = data.draw(st.floats(-5, 5))
    if lora:
        r = data.draw(st.integers(1, min(8, d1, d2)))
        ad = randomize(init_lora((d1, d2), r, s, seed=0), rng)
    else:
        ranks = (data.draw(st.integers(1, min(8, d1))), data.draw(st.integers(1, min(8, d2))))
        ad = randomize(init_tucker((d1, d2), ranks, s, seed=0), rng)
    x = rng.standard_normal(d2)
    merged = merge(layer, adapter_delta(ad, layer), s) @ x
    fast = linear_forward(x, layer, ad)
    assert np.max(np.abs(fast - merged)) <= 1e-10 * (1 + np.max(np.abs(merged)))


def test_conv_identity_and_zero():
    x = np.random.default_rng(0).standard_normal((1, 4, 5))
    w = np.ones((1, 1, 1, 1))
    np.testing.assert_array_equal(conv2d_forward(x, w), x)
    x = np.random.default_rng(1).standard_normal((2, 5, 5))
    np.testing.assert_array_equal(conv2d_forward(x, np.zeros((2, 3, 3, 3))), np.zeros((3, 3, 3)))


@pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (2, "same")])
def test_conv_matches_naive_loop(stride, padding):
    rng = np.random.default_rng(stride)
    w = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((3, 5, 5))
    np.testing.assert_allclose(conv2d_forward(x, w, stride, padding), conv_loop(x, w, stride, padding),
                               atol=1e-12, rtol=0)


def test_conv_even_kernel_same_padding():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((2, 2, 2, 2))
    x = rng.standard_normal((2, 4, 5))
    out = conv2d_forward(x, w, 1, "same")
    assert out.shape == (2, 4, 5)
    np.testing.assert_allclose(out, conv_loop(x, w, 1, "same"), atol=1e-12)


def test_conv_geometry_errors():
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((3, 5, 5)), np.ones((2, 2, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((2, 2, 2)), np.ones((2, 2, 3, 3)))


def test_conv_adapted_reduces_to_frozen():
    rng = np.random.default_rng(3)
    layer = FrozenLayer(rng.standard_normal((3, 4, 3, 3)), "conv")
    x = rng.standard_normal((3, 6, 6))
    frozen = conv2d_forward(x, layer.weight)
    ad = init_tucker(layer.shape, (2, 2, 1, 1), 4.0, seed=0)
    np.testing.assert_array_equal(conv2d_adapted(x, layer, ad), frozen)
    ad = randomize(ad, rng)
    np.testing.assert_array_equal(conv2d_adapted(x, layer, ad, scale=0.0), frozen)


def test_conv_adapted_random_flora():
    rng = np.random.default_rng(4)
    layer = FrozenLayer(rng.standard_normal((3, 3, 3, 3)), "conv")
    ad = randomize(init_tucker(layer.shape, (2, 2, 2, 1), 1.5, seed=0), rng)
    x = rng.standard_normal((3, 7, 6))
    merged = conv2d_forward(x, merge(layer, reconstruct(ad), 1.5))
    fast = conv2d_adapted(x, layer, ad)
    assert np.linalg.norm(fast - merged) <= 1e-10 * np.linalg.norm(merged)


@settings(max_examples=50, deadline=None)
@given(d_in=st.integers(1, 8), d_out=st.integers(1, 8), k=st.sampled_from([1, 3]),
       h=st.integers(3, 8), w=st.integers(3, 8), stride=st.integers(1, 2),
       padding=st.sampled_from(["valid", "same"]), lora=st.booleans(),
       seed=st.integers(0, 2**32 - 1), data=st.data())
def test_conv_merge_equivalence(d_in, d_out, k, h, w, stride, padding, lora, seed, data):
    rng = np.random.default_rng(seed)
    shape = (d_in, d_out, k, k)
    layer = FrozenLayer(rng.standard_normal(shape), "conv")
    if lora:
        ad = randomize(init_lora(shape, data.draw(st.integers(1, min(4, k * d_in, k * d_out))), 2.0, 0), rng)
    else:
        ranks = (data.draw(st.integers(1, min(4, d_in))), data.draw(st.integers(1, min(4, d_out))),
                 data.draw(st.integers(1, k)), data.draw(st.integers(1, k)))
        ad = randomize(init_tucker(shape, ranks, 2.0, 0), rng)
    x = rng.standard_normal((d_in, h, w))
    merged = conv2d_forward(x, merge(layer, adapter_delta(ad, layer), 2.0), stride, padding)
    fast = conv2d_adapted(x, layer, ad, stride, padding)
    assert np.max(np.abs(fast - merged)) <= 1e-10 * (1 + np.max(np.abs(merged)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s1=st.floats(-3, 3), s2=st.floats(-3, 3))
def test_additivity_in_scale(seed, s1, s2):
    rng = np.random.default_rng(seed)
    layer = FrozenLayer(rng.standard_normal((6, 5)), "linear")
    ad = randomize(init_tucker((6, 5), (2, 3), 1.0, 0), rng)
    x = rng.standard_normal(5)
    out = lambda s: linear_forward(x, layer, ad, scale=s)  # noqa: E731
    lhs = out(s1 + s2) - out(0.0)
    rhs = (out(s1) - out(0.0)) + (out(s2) - out(0.0))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    conv = FrozenLayer(rng.standard_normal((2, 3, 3, 3)), "conv")
    cad = randomize(init_tucker(conv.shape, (2, 2, 1, 1), 1.0, 0), rng)
    xi = rng.standard_normal((2, 5, 5))
    cout = lambda s: conv2d_adapted(xi, conv, cad, scale=s)  # noqa: E731
    np.testing.assert_allclose(cout(s1 + s2) - cout(0.0),
                               (cout(s1) - cout(0.0)) + (cout(s2) - cout(0.0)), atol=1e-10)
