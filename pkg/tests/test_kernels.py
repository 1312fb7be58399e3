"""Kernel-level checks against naive reference implementations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_avgpool, naive_conv2d

from distree.kernels import (
    AddShortcut,
    AvgPool,
    BatchNorm,
    Conv2d,
    DegenerateFeatureError,
    Fc,
    GlobalAvgPool,
    InvalidParameterError,
    Relu,
    ShapeError,
    avgpool_forward,
    batchnorm_forward,
    conv2d_forward,
    cosine_similarity,
    entropy,
    fc_forward,
    flops_of_layer,
    global_avgpool_forward,
    output_shape_of,
    relu_forward,
    softmax,
    tensor,
)


class TestConv2d:
    def test_scalar_multiply(self):
        x = tensor([2.0], (1, 1, 1))
        w = tensor([3.0], (1, 1, 1, 1))
        spec = Conv2d("c", 1, 1, 1, bias=False)
        out = conv2d_forward(x, spec, w)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(6.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.normal(size=(1, 5, 5)))
        w = tensor([1.0], (1, 1, 1, 1))
        out = conv2d_forward(x, Conv2d("c", 1, 1, 1, bias=False), w)
        np.testing.assert_allclose(out, x)

    def test_sum_kernel(self):
        x = tensor([1, 2, 3, 4], (1, 2, 2))
        w = tensor(np.ones((1, 1, 2, 2)))
        out = conv2d_forward(x, Conv2d("c", 1, 1, 2, bias=False), w)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(10.0)

    def test_channel_mismatch(self):
        x = tensor(np.ones((2, 4, 4)))
        w = tensor(np.ones((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="c:"):
            conv2d_forward(x, Conv2d("c", 3, 1, 3), w, tensor(np.zeros(1)))

    def test_against_naive_500_cases(self):
        rng = np.random.default_rng(42)
        for _ in range(500):
            in_ch = int(rng.integers(1, 5))
            out_ch = int(rng.integers(1, 5))
            k = int(rng.integers(1, 4))
            size = int(rng.integers(k, 9))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            use_bias = bool(rng.integers(0, 2))
            x = tensor(rng.normal(size=(in_ch, size, size)))
            w = tensor(rng.normal(size=(out_ch, in_ch, k, k)))
            b = tensor(rng.normal(size=out_ch)) if use_bias else None
            spec = Conv2d("c", in_ch, out_ch, k, stride, pad, bias=use_bias)
            got = conv2d_forward(x, spec, w, b)
            want = naive_conv2d(x, w, b, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-5)


class TestBatchNorm:
    def test_identity_params(self):
        x = tensor(np.random.default_rng(1).normal(size=(3, 4, 4)))
        ones = tensor(np.ones(3))
        zeros = tensor(np.zeros(3))
        out = batchnorm_forward(x, ones, zeros, zeros, ones, eps=0.0)
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_affine(self):
        x = tensor([1.0], (1, 1, 1))
        out = batchnorm_forward(x, tensor([2.0]), tensor([1.0]), tensor([0.0]),
                                tensor([1.0]), eps=0.0)
        assert out[0, 0, 0] == pytest.approx(3.0)

    def test_standardize(self):
        x = tensor([4.0], (1, 1, 1))
        out = batchnorm_forward(x, tensor([1.0]), tensor([0.0]), tensor([2.0]),
                                tensor([4.0]), eps=0.0)
        assert out[0, 0, 0] == pytest.approx(1.0)

    def test_corrupt_variance(self):
        x = tensor(np.ones((1, 2, 2)))
        with pytest.raises(InvalidParameterError):
            batchnorm_forward(x, tensor([1.0]), tensor([0.0]), tensor([0.0]),
                              tensor([-1.0]), eps=0.0)


class TestElementwise:
    def test_relu(self):
        out = relu_forward(tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_global_avgpool(self):
        out = global_avgpool_forward(tensor([1, 2, 3, 4], (1, 2, 2)))
        assert out.shape == (1,)
        assert out[0] == pytest.approx(2.5)

    def test_avgpool_against_naive(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            size = int(rng.integers(2, 9))
            k = int(rng.integers(1, size + 1))
            s = int(rng.integers(1, 3))
            x = tensor(rng.normal(size=(int(rng.integers(1, 4)), size, size)))
            got = avgpool_forward(x, k, s)
            np.testing.assert_allclose(got, naive_avgpool(x, k, s), atol=1e-5)

    def test_fc_matches_matmul(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n_in = int(rng.integers(1, 16))
            n_out = int(rng.integers(1, 16))
            x = tensor(rng.normal(size=n_in))
            w = tensor(rng.normal(size=(n_out, n_in)))
            b = tensor(rng.normal(size=n_out))
            np.testing.assert_allclose(fc_forward(x, w, b),
                                       np.asarray(w, np.float64) @ x + b, atol=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(tensor([0.0, 0.0])), [0.5, 0.5], atol=1e-7)

    def test_sums_to_one_and_open_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = softmax(tensor(rng.normal(scale=5.0, size=int(rng.integers(2, 20)))))
            assert abs(float(p.sum()) - 1.0) < 1e-6
            assert np.all(p > 0) and np.all(p < 1)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            z = tensor(rng.normal(size=8))
            shifted = tensor(np.asarray(z) + 7.5)
            np.testing.assert_allclose(softmax(z), softmax(shifted), atol=1e-6)

    def test_large_logits_stable(self):
        p = softmax(tensor([1000.0, 1000.0, 990.0]))
        assert np.all(np.isfinite(p))
        assert abs(float(p.sum()) - 1.0) < 1e-6


class TestCosineSimilarity:
    def test_self_similarity(self):
        f = tensor([1.0, 2.0, 3.0])
        assert cosine_similarity(f, f) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine_similarity(tensor([1.0, 0.0]), tensor([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        got = cosine_similarity(tensor([1.0, 0.0]), tensor([1.0, 1.0]))
        assert got == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateFeatureError):
            cosine_similarity(tensor([0.0, 0.0]), tensor([1.0, 1.0]))

    @given(st.integers(0, 2**31), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_scale_invariant(self, seed, s, t):
        rng = np.random.default_rng(seed)
        a = tensor(rng.normal(size=6) + 0.1)
        b = tensor(rng.normal(size=6) + 0.1)
        base = cosine_similarity(a, b)
        assert cosine_similarity(b, a) == pytest.approx(base, abs=1e-6)
        scaled = cosine_similarity(tensor(np.asarray(a) * s), tensor(np.asarray(b) * t))
        assert scaled == pytest.approx(base, abs=1e-6)


class TestEntropy:
    def test_one_hot(self):
        assert entropy(tensor([1.0] + [0.0] * 9)) == 0.0

    def test_uniform_ten(self):
        assert entropy(tensor([0.1] * 10)) == pytest.approx(math.log(10), abs=1e-6)

    def test_half_half(self):
        assert entropy(tensor([0.5, 0.5, 0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-6)

    def test_negative_entry(self):
        with pytest.raises(ValueError):
            entropy(tensor([1.1, -0.1]))

    def test_bad_sum(self):
        with pytest.raises(ValueError):
            entropy(tensor([0.4, 0.4]))


# ---------------------------------------------------------------------------
# FLOPs cost model


class TestFlops:
    def test_conv_closed_form(self):
        spec = Conv2d("c", 3, 16, 3, 1, 1, bias=False)
        assert flops_of_layer(spec, (3, 32, 32)) == 32 * 32 * 16 * (3 * 3 * 3)

    def test_conv_plus_batchnorm_first_branch_cost(self):
        conv = flops_of_layer(Conv2d("c", 3, 16, 3, 1, 1, bias=False), (3, 32, 32))
        bn = flops_of_layer(BatchNorm("b", 16), (16, 32, 32))
        assert conv + bn == 458_752
        assert (conv + bn) / 1e6 == pytest.approx(0.459, abs=5e-4)

    def test_relu_per_element(self):
        assert flops_of_layer(Relu("r"), (16, 32, 32)) == 16 * 32 * 32

    def test_fc(self):
        assert flops_of_layer(Fc("f", 64, 10), (64,)) == 64 * 10 + 10
        assert flops_of_layer(Fc("f", 64, 10, bias=False), (64,)) == 640

    def test_pool_per_output(self):
        assert flops_of_layer(AvgPool("p", 4, 4), (16, 32, 32)) == 16 * 8 * 8
        assert flops_of_layer(GlobalAvgPool("g"), (64, 8, 8)) == 64

    def test_add_with_projection(self):
        add = AddShortcut("a", projection=Conv2d("proj", 16, 32, 1, 2, 0))
        # projection cost derives from the output side: 32x16x16 elems x 16 in_ch
        assert flops_of_layer(add, (32, 16, 16)) == 32 * 16 * 16 + 32 * 16 * 16 * 16 + 32 * 16 * 16

    def test_additive_over_sequences_and_value_independent(self):
        layers = [Conv2d("c1", 3, 8, 3, 1, 1), BatchNorm("b", 8), Relu("r"),
                  AvgPool("p", 2, 2), GlobalAvgPool("g"), Fc("f", 8, 4)]
        shape = (3, 16, 16)
        total = 0
        for layer in layers:
            total += flops_of_layer(layer, shape)
            shape = output_shape_of(layer, shape)
        assert total == sum(
            flops_of_layer(l, s) for l, s in zip(layers, _chain_shapes(layers, (3, 16, 16))))


def _chain_shapes(layers, shape):
    shapes = []
    for layer in layers:
        shapes.append(shape)
        shape = output_shape_of(layer, shape)
    return shapes


# ---------------------------------------------------------------------------
# Shape oracle property


@st.composite
def random_layer_and_shape(draw):
    c = draw(st.integers(1, 4))
    h = draw(st.integers(4, 12))
    shape = (c, h, h)
    kind = draw(st.sampled_from(["conv", "bn", "relu", "pool", "gap"]))
    if kind == "conv":
        k = draw(st.integers(1, 3))
        layer = Conv2d("c", c, draw(st.integers(1, 4)), k,
                       draw(st.integers(1, 2)), draw(st.integers(0, 1)))
    elif kind == "bn":
        layer = BatchNorm("b", c)
    elif kind == "relu":
        layer = Relu("r")
    elif kind == "pool":
        k = draw(st.integers(1, min(3, h)))
        layer = AvgPool("p", k, draw(st.integers(1, 2)))
    else:
        layer = GlobalAvgPool("g")
    return layer, shape


@given(random_layer_and_shape(), st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_output_shape_matches_execution(layer_shape, seed):
    """The shape oracle agrees with what the kernel actually produces."""
    layer, shape = layer_shape
    rng = np.random.default_rng(seed)
    x = tensor(rng.normal(size=shape))
    expected = output_shape_of(layer, shape)
    if isinstance(layer, Conv2d):
        w = tensor(rng.normal(size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)))
        b = tensor(rng.normal(size=layer.out_ch)) if layer.bias else None
        out = conv2d_forward(x, layer, w, b)
    elif isinstance(layer, BatchNorm):
        ones = tensor(np.ones(layer.ch))
        zeros = tensor(np.zeros(layer.ch))
        out = batchnorm_forward(x, ones, zeros, zeros, ones)
    elif isinstance(layer, Relu):
        out = relu_forward(x)
    elif isinstance(layer, AvgPool):
        out = avgpool_forward(x, layer.kernel, layer.stride)
    else:
        out = global_avgpool_forward(x)
    assert out.shape == expected
