import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr
from scipy.signal import correlate2d

from stripdet.ops import (
    ConvParams,
    ConvSpec,
    concat_channels,
    conv2d,
    gelu,
    layernorm,
    linear,
    sigmoid,
    upsample_nearest,
)
from stripdet.tensor import Tensor, tensor_new


def _params(rng, spec, bias=True):
    w = Tensor(rng.normal(size=spec.weight_shape))
    b = Tensor(rng.normal(size=spec.out_channels)) if bias else None
    return ConvParams(w, b)


# --------------------------------------------------------------------------
# ConvSpec


def test_spec_forms():
    assert ConvSpec.depthwise(8, 3, 3).is_depthwise
    assert ConvSpec.pointwise(8, 4).is_pointwise
    assert ConvSpec.depthwise(8, 1, 7).is_strip
    assert ConvSpec.depthwise(8, 7, 1).is_strip
    assert not ConvSpec.depthwise(8, 3, 3).is_strip
    assert not ConvSpec.standard(8, 8, 3).is_depthwise


def test_spec_strip_pads_long_axis_only():
    s = ConvSpec.depthwise(4, 1, 7)
    assert (s.pad_h, s.pad_w) == (0, 3)
    s = ConvSpec.depthwise(4, 7, 1)
    assert (s.pad_h, s.pad_w) == (3, 0)


def test_spec_group_divisibility():
    with pytest.raises(ValueError):
        ConvSpec(6, 4, 3, 3, groups=4)


def test_params_shape_check(rng):
    spec = ConvSpec.standard(2, 3, 3)
    bad = ConvParams(Tensor(rng.normal(size=(3, 2, 3, 1))))
    with pytest.raises(ValueError):
        conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), spec, bad)


# --------------------------------------------------------------------------
# conv2d


def test_conv_pointwise_scalar():
    spec = ConvSpec.pointwise(1, 1)
    y = conv2d(tensor_new((1, 1, 1, 1), 3.0), spec, ConvParams(tensor_new((1, 1, 1, 1), 2.0), Tensor([1.0])))
    assert y.item() == 7.0


def test_conv_depthwise_identity_kernel(rng):
    spec = ConvSpec.depthwise(3, 3, 3)
    w = np.zeros(spec.weight_shape)
    w[:, 0, 1, 1] = 1.0
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    y = conv2d(x, spec, ConvParams(Tensor(w), Tensor(np.zeros(3))))
    assert np.array_equal(y.data, x.data)


def test_conv_strip_hand_example():
    spec = ConvSpec(1, 1, 1, 3, 1, 0, 1, 1)
    y = conv2d(tensor_new((1, 1, 1, 3), [1, 2, 3]), spec, ConvParams(tensor_new((1, 1, 1, 3), 1.0), Tensor([0.0])))
    assert y.data.ravel().tolist() == [3.0, 6.0, 5.0]


def test_conv_matches_scipy_oracle(rng):
    spec = ConvSpec.standard(3, 2, 3)
    p = _params(rng, spec)
    x = rng.normal(size=(1, 3, 6, 7))
    y = conv2d(Tensor(x), spec, p).data
    for o in range(2):
        ref = sum(correlate2d(x[0, c], p.weight.data[o, c], mode="same") for c in range(3)) + p.bias.data[o]
        assert np.allclose(y[0, o], ref, atol=1e-12)


def test_conv_channel_mismatch(rng):
    spec = ConvSpec.standard(3, 2, 3)
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), spec, _params(rng, spec))


def test_conv_kernel_larger_than_input(rng):
    spec = ConvSpec(1, 1, 5, 5)
    with pytest.raises(ValueError, match="larger than padded input"):
        conv2d(Tensor(rng.normal(size=(1, 1, 3, 3))), spec, _params(rng, spec))


def test_conv_without_bias(rng):
    spec = ConvSpec.standard(2, 2, 3)
    p = _params(rng, spec, bias=False)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    y = conv2d(x, spec, p)
    yb = conv2d(x, spec, ConvParams(p.weight, Tensor(np.ones(2))))
    assert np.allclose(yb.data - y.data, 1.0)


@pytest.mark.parametrize("k", [1, 3, 7])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("pad", [0, 1, 3])
def test_conv_output_shape_law(rng, k, stride, pad):
    h, w = 9, 8
    spec = ConvSpec(2, 3, k, k, stride, pad, pad, 1)
    y = conv2d(Tensor(rng.normal(size=(1, 2, h, w))), spec, _params(rng, spec))
    expect = ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    assert y.shape[2:] == expect == spec.output_hw(h, w)


@pytest.mark.parametrize("groups", [2, 4])
def test_grouped_equals_split_convs(rng, groups):
    cin, cout = 8, 4
    spec = ConvSpec(cin, cout, 3, 3, 1, 1, 1, groups)
    p = _params(rng, spec)
    x = Tensor(rng.normal(size=(2, cin, 5, 5)))
    y = conv2d(x, spec, p).data
    gi, go = cin // groups, cout // groups
    parts = []
    for g in range(groups):
        sub = ConvSpec(gi, go, 3, 3, 1, 1, 1, 1)
        sp = ConvParams(Tensor(p.weight.data[g * go:(g + 1) * go]), Tensor(p.bias.data[g * go:(g + 1) * go]))
        parts.append(conv2d(Tensor(x.data[:, g * gi:(g + 1) * gi]), sub, sp).data)
    assert np.array_equal(y, np.concatenate(parts, axis=1))


def test_depthwise_equals_split_convs(rng):
    spec = ConvSpec.depthwise(5, 3, 3, stride=2)
    p = _params(rng, spec)
    x = Tensor(rng.normal(size=(1, 5, 7, 6)))
    y = conv2d(x, spec, p).data
    for c in range(5):
        sub = ConvSpec(1, 1, 3, 3, 2, 1, 1, 1)
        yc = conv2d(Tensor(x.data[:, c:c + 1]), sub, ConvParams(Tensor(p.weight.data[c:c + 1]), Tensor(p.bias.data[c:c + 1])))
        assert np.allclose(y[:, c:c + 1], yc.data, rtol=0, atol=1e-13)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_strip_pair_equals_outer_product_kernel(rng, k):
    c = 4
    h_spec, v_spec = ConvSpec.depthwise(c, 1, k), ConvSpec.depthwise(c, k, 1)
    kh = rng.integers(-3, 4, size=(c, k)).astype(float)
    kv = rng.integers(-3, 4, size=(c, k)).astype(float)
    x = Tensor(rng.integers(-5, 6, size=(1, c, 9, 11)).astype(float))
    pair = conv2d(
        conv2d(x, h_spec, ConvParams(Tensor(kh[:, None, None, :]))),
        v_spec,
        ConvParams(Tensor(kv[:, None, :, None])),
    )
    full_kernel = kv[:, :, None] * kh[:, None, :]
    full = conv2d(x, ConvSpec.depthwise(c, k, k), ConvParams(Tensor(full_kernel[:, None])))
    # integer inputs make both sides exact
    assert np.array_equal(pair.data, full.data)


def test_strip_pair_differs_from_non_outer_kernel(rng):
    c, k = 2, 3
    x = Tensor(rng.normal(size=(1, c, 6, 6)))
    kh, kv = rng.normal(size=(c, k)), rng.normal(size=(c, k))
    pair = conv2d(
        conv2d(x, ConvSpec.depthwise(c, 1, k), ConvParams(Tensor(kh[:, None, None, :]))),
        ConvSpec.depthwise(c, k, 1),
        ConvParams(Tensor(kv[:, None, :, None])),
    )
    other = kv[:, :, None] * kh[:, None, :]
    other[:, 0, 0] += 1.0
    full = conv2d(x, ConvSpec.depthwise(c, k, k), ConvParams(Tensor(other[:, None])))
    assert not np.allclose(pair.data, full.data)


# --------------------------------------------------------------------------
# linear


def test_linear_identity(rng):
    x = Tensor(rng.normal(size=(1, 4, 3, 3)))
    y = linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.array_equal(y.data, x.data)


def test_linear_dot_product():
    x = tensor_new((1, 2, 1, 1), [3, 4])
    assert linear(x, Tensor([[1.0, 1.0]]), Tensor([0.0])).item() == 7.0


def test_linear_equals_pointwise_conv(rng):
    x = Tensor(rng.normal(size=(2, 5, 4, 3)))
    w, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    y = linear(x, Tensor(w), Tensor(b))
    yc = conv2d(x, ConvSpec.pointwise(5, 3), ConvParams(Tensor(w[:, :, None, None]), Tensor(b)))
    assert np.allclose(y.data, yc.data, rtol=0, atol=1e-13)


def test_linear_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channel mismatch"):
        linear(Tensor(rng.normal(size=(1, 3, 2, 2))), Tensor(np.eye(4)))


# --------------------------------------------------------------------------
# activations and norms


def test_gelu_values():
    assert gelu(Tensor([0.0])).item() == 0.0
    assert gelu(Tensor([1.0])).item() == pytest.approx(0.841345, abs=1e-6)
    assert abs(gelu(Tensor([-10.0])).item()) <= 1e-9


def test_gelu_matches_normal_cdf_oracle(rng):
    x = rng.uniform(-5, 5, size=200)
    assert np.allclose(gelu(Tensor(x)).data, x * ndtr(x), rtol=0, atol=1e-14)


def test_sigmoid_values(rng):
    assert sigmoid(Tensor([0.0])).item() == 0.5
    assert sigmoid(Tensor([math.log(3)])).item() == pytest.approx(0.75, abs=1e-15)
    x = rng.normal(scale=5, size=100)
    assert np.allclose(sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data, 1.0, atol=1e-15)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise", invalid="raise"):
        y = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert y.tolist() == [0.0, 1.0]


def test_layernorm_constant_vector_maps_to_zero():
    x = tensor_new((1, 4, 1, 1), 2.5)
    y = layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(y.data, np.zeros(x.shape))


def test_layernorm_two_channels():
    x = tensor_new((1, 2, 1, 1), [1, 3])
    y = layernorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(y.data.ravel(), [-1, 1], atol=1e-10)


def test_layernorm_statistics(rng):
    x = Tensor(rng.normal(loc=3, scale=4, size=(2, 16, 5, 5)))
    y = layernorm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(axis=1)).max() <= 1e-6
    assert np.abs(y.var(axis=1) - 1).max() <= 1e-4


def test_layernorm_affine(rng):
    x = Tensor(rng.normal(size=(1, 3, 2, 2)))
    g, b = rng.normal(size=3), rng.normal(size=3)
    plain = layernorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    y = layernorm(x, Tensor(g), Tensor(b)).data
    assert np.allclose(y, plain * g[None, :, None, None] + b[None, :, None, None])


def test_layernorm_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        layernorm(Tensor(rng.normal(size=(1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0)


# --------------------------------------------------------------------------
# upsample and concat


def test_upsample_factor_one_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert upsample_nearest(x, 1) is x


def test_upsample_blocks():
    x = tensor_new((1, 1, 2, 2), [1, 2, 3, 4])
    y = upsample_nearest(x, 2).data[0, 0]
    assert y.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
def test_upsample_conservation(factor, h, w):
    x = np.random.default_rng(h * 31 + w).integers(-9, 10, size=(1, 2, h, w)).astype(float)
    y = upsample_nearest(Tensor(x), factor).data
    assert y.shape == (1, 2, h * factor, w * factor)
    assert y.sum() == factor * factor * x.sum()


def test_upsample_rejects_zero():
    with pytest.raises(ValueError):
        upsample_nearest(tensor_new((1, 1, 1, 1), 0), 0)


def test_concat_single_and_order(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 3, 3, 3)))
    assert concat_channels([a]) is a
    y = concat_channels([a, b]).data
    assert y.shape == (1, 5, 3, 3)
    assert np.array_equal(y[:, :2], a.data) and np.array_equal(y[:, 2:], b.data)


def test_concat_mismatch_names_part(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 2, 4, 3)))
    with pytest.raises(ValueError, match="part 2"):
        concat_channels([a, a, b])
