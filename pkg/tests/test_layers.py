import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import assert_grad_close, numerical_grad
from oracles import conv2d_ref, conv3d_ref, maxpool2d_ref, maxpool3d_ref
from voxelseg.layers import (
    ConvLayer,
    FullLayer,
    GradientTape,
    concat,
    concat_backward,
    conv2d_backward,
    conv2d_forward,
    conv3d_backward,
    conv3d_forward,
    crop_trailing,
    crop_trailing_backward,
    full_backward,
    full_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    relu_backward,
    relu_forward,
    softmax,
)


def rand_conv(rng, cout, cin, t, nd):
    w = rng.normal(size=(cout, cin) + (t,) * nd)
    return ConvLayer(w, rng.normal(size=cout))


# ---------------------------------------------------------------------------
# convolution forward
# ---------------------------------------------------------------------------


def test_conv2d_one_by_one_identity():
    layer = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))
    x = np.arange(12.0).reshape(1, 3, 4)
    assert np.array_equal(conv2d_forward(x, layer), x)


def test_conv2d_all_ones():
    layer = ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1))
    out = conv2d_forward(np.ones((1, 3, 3)), layer)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 6))
    layer = rand_conv(rng, 2, 1, 5, 2)
    got = conv2d_forward(x, layer)
    assert np.allclose(got, conv2d_ref(x, layer.weights, layer.bias), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_conv2d_random_shapes_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    t = int(rng.integers(1, 4))
    h, w = (int(rng.integers(t, t + 4)) for _ in range(2))
    x = rng.normal(size=(cin, h, w))
    layer = rand_conv(rng, cout, cin, t, 2)
    got = conv2d_forward(x, layer)
    assert np.allclose(got, conv2d_ref(x, layer.weights, layer.bias), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_conv3d_random_shapes_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    t = int(rng.integers(1, 3))
    d, h, w = (int(rng.integers(t, t + 3)) for _ in range(3))
    x = rng.normal(size=(cin, d, h, w))
    layer = rand_conv(rng, cout, cin, t, 3)
    got = conv3d_forward(x, layer)
    assert np.allclose(got, conv3d_ref(x, layer.weights, layer.bias), atol=1e-6)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2, 6, 5))
    layer = rand_conv(rng, 3, 2, 3, 2)
    out = conv2d_forward(x, layer)
    for i in range(4):
        assert np.array_equal(out[i], conv2d_forward(x[i], layer))


def test_conv_linearity_without_bias():
    rng = np.random.default_rng(9)
    layer = ConvLayer(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
    x, y = rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 5, 5))
    a, b = 0.7, -1.3
    lhs = conv2d_forward(a * x + b * y, layer)
    rhs = a * conv2d_forward(x, layer) + b * conv2d_forward(y, layer)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_conv_shape_mismatch():
    layer = ConvLayer(np.ones((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="maps"):
        conv2d_forward(np.ones((1, 5, 5)), layer)
    with pytest.raises(ValueError, match="smaller"):
        conv2d_forward(np.ones((2, 2, 5)), layer)


# ---------------------------------------------------------------------------
# convolution backward
# ---------------------------------------------------------------------------


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5))
    layer = rand_conv(rng, 2, 2, 3, 2)
    up = np.zeros((2, 3, 3))
    dx, dw, db = conv2d_backward(x, layer, up)
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_grad_bias_is_upstream_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 6, 6))
    layer = rand_conv(rng, 3, 2, 3, 2)
    up = rng.normal(size=(4, 3, 4, 4))
    _, _, db = conv2d_backward(x, layer, up)
    assert np.allclose(db, up.sum(axis=(0, 2, 3)), atol=1e-12)


@pytest.mark.parametrize("nd", [2, 3])
def test_conv_finite_differences(nd):
    fwd = conv2d_forward if nd == 2 else conv3d_forward
    bwd = conv2d_backward if nd == 2 else conv3d_backward
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        cin, cout, t = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        spatial = tuple(int(rng.integers(t, t + 3)) for _ in range(nd))
        x = rng.normal(size=(cin,) + spatial)
        layer = rand_conv(rng, cout, cin, t, nd)
        up = rng.normal(size=fwd(x, layer).shape)

        def loss():
            return float((up * fwd(x, layer)).sum())

        dx, dw, db = bwd(x, layer, up)
        assert_grad_close(dx, numerical_grad(loss, x))
        assert_grad_close(dw, numerical_grad(loss, layer.weights))
        assert_grad_close(db, numerical_grad(loss, layer.bias))


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def test_maxpool_p1_identity():
    x = np.arange(8.0).reshape(2, 2, 2)
    y, arg = maxpool2d_forward(x, 1)
    assert np.array_equal(y, x)
    assert np.array_equal(maxpool2d_backward(arg, y, 1), x)


def test_maxpool_single_window():
    y, arg = maxpool2d_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 4.0
    dx = maxpool2d_backward(arg, np.ones((1, 1, 1)), 2)
    assert np.array_equal(dx, [[[0, 0], [0, 1.0]]])


def test_maxpool_tie_breaks_to_lowest_index():
    x = np.full((1, 2, 2), 7.0)
    y, arg = maxpool2d_forward(x, 2)
    assert arg[0, 0, 0] == 0
    dx = maxpool2d_backward(arg, np.array([[[2.0]]]), 2)
    assert np.array_equal(dx, [[[2.0, 0], [0, 0]]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_maxpool2d_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    h, w = (int(rng.integers(1, 4)) * p for _ in range(2))
    x = rng.normal(size=(c, h, w))
    y, _ = maxpool2d_forward(x, p)
    assert np.array_equal(y, maxpool2d_ref(x, p))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_maxpool3d_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 3))
    c = int(rng.integers(1, 3))
    d, h, w = (int(rng.integers(1, 3)) * p for _ in range(3))
    x = rng.normal(size=(c, d, h, w))
    y, _ = maxpool3d_forward(x, p)
    assert np.array_equal(y, maxpool3d_ref(x, p))


def test_maxpool_indivisible_side_rejected():
    with pytest.raises(ValueError, match="divisible"):
        maxpool2d_forward(np.ones((1, 3, 4)), 2)


def test_maxpool_finite_differences_away_from_ties():
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        c, p = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = (int(rng.integers(1, 3)) * p for _ in range(2))
        # distinct values with gaps >> 2*eps keep the argmax stable
        x = (rng.permutation(c * h * w).astype(np.float64) * 0.1).reshape(c, h, w)
        up = rng.normal(size=maxpool2d_forward(x, p)[0].shape)

        def loss():
            return float((up * maxpool2d_forward(x, p)[0]).sum())

        _, arg = maxpool2d_forward(x, p)
        dx = maxpool2d_backward(arg, up, p)
        assert_grad_close(dx, numerical_grad(loss, x))


def test_crop_trailing_roundtrip():
    x = np.arange(2 * 5 * 5, dtype=np.float64).reshape(1, 2, 5, 5)
    y = crop_trailing(x, (4, 4))
    assert y.shape == (1, 2, 4, 4)
    back = crop_trailing_backward(np.ones_like(y), (5, 5))
    assert back.shape == x.shape
    assert back[..., :4, :4].sum() == 2 * 16
    assert back[..., 4, :].sum() == 0 and back[..., :, 4].sum() == 0


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


def test_full_identity():
    layer = FullLayer(np.eye(3), np.zeros(3))
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(full_forward(x, layer), x)


def test_full_small_example():
    layer = FullLayer(np.array([[1.0, 1.0]]), np.zeros(1))
    assert np.array_equal(full_forward(np.array([2.0, 3.0]), layer), [5.0])


def test_full_width_mismatch():
    layer = FullLayer(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="width"):
        full_forward(np.ones(4), layer)


def test_full_finite_differences():
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        n_in, n_out, batch = (int(rng.integers(1, 5)) for _ in range(3))
        x = rng.normal(size=(batch, n_in))
        layer = FullLayer(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))
        up = rng.normal(size=(batch, n_out))

        def loss():
            return float((up * full_forward(x, layer)).sum())

        dx, dw, db = full_backward(x, layer, up)
        assert_grad_close(dx, numerical_grad(loss, x))
        assert_grad_close(dw, numerical_grad(loss, layer.weights))
        assert_grad_close(db, numerical_grad(loss, layer.bias))


# ---------------------------------------------------------------------------
# relu / softmax / concat
# ---------------------------------------------------------------------------


def test_relu_values():
    assert np.array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_relu_zero_grad_when_negative():
    x = -np.ones((3, 3))
    assert not relu_backward(x, np.ones((3, 3))).any()


def test_relu_subgradient_at_zero_is_zero():
    assert relu_backward(np.array([0.0]), np.array([5.0]))[0] == 0.0


def test_relu_finite_differences_away_from_kink():
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        x = rng.uniform(0.05, 1.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
        up = rng.normal(size=(4, 4))

        def loss():
            return float((up * relu_forward(x)).sum())

        assert_grad_close(relu_backward(x, up), numerical_grad(loss, x))


def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(4)), 0.25, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    z = rng.normal(size=10)
    assert np.allclose(softmax(z), softmax(z + 123.456), atol=1e-7)


def test_softmax_closed_form():
    out = softmax(np.array([0.0, math.log(3.0)]))
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_huge_logits_stable():
    rng = np.random.default_rng(2)
    z = rng.uniform(-1e4, 1e4, size=(8, 6))
    out = softmax(z)
    assert np.isfinite(out).all()
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out >= 0).all() and (out <= 1).all()


def test_concat_single_part_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(concat([x]), x.ravel())


def test_concat_lengths():
    out = concat([np.zeros(2), np.zeros(3)])
    assert out.shape == (5,)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_concat_split_roundtrip(seed):
    rng = np.random.default_rng(seed)
    shapes = [tuple(int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4))))
              for _ in range(int(rng.integers(1, 5)))]
    parts = [rng.normal(size=s) for s in shapes]
    flat = concat(parts)
    back = concat_backward(flat, shapes)
    for orig, rec in zip(parts, back):
        assert np.array_equal(orig, rec)


def test_concat_batched_roundtrip():
    rng = np.random.default_rng(3)
    parts = [rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 5))]
    flat = concat(parts, batched=True)
    assert flat.shape == (4, 11)
    back = concat_backward(flat, [(2, 3), (5,)], batched=True)
    assert np.array_equal(back[0], parts[0])
    assert np.array_equal(back[1], parts[1])


def test_gradient_tape_zero_and_accumulate():
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    tape = GradientTape.for_params(params)
    tape.accumulate("w", np.full((2, 2), 2.0))
    tape.accumulate("w", np.full((2, 2), 3.0))
    assert np.array_equal(tape["w"], np.full((2, 2), 5.0))
    tape.zero()
    assert not tape["w"].any()


def test_kernel_determinism():
    rng = np.random.default_rng(77)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    layer = ConvLayer(
        rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        rng.normal(size=4).astype(np.float32),
    )
    a = conv2d_forward(x, layer)
    b = conv2d_forward(x.copy(), layer)
    assert np.array_equal(a, b)
