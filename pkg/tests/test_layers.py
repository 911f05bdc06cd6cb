import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frameinterp import layers as L
from frameinterp import tensor as T
from frameinterp.gradcheck import gradcheck, run_suite
from frameinterp.tensor import Tape, Tensor


def delta_kernel(k=3, out_ch=1, in_ch=1):
    w = np.zeros((out_ch, in_ch, k, k))
    for c in range(min(out_ch, in_ch)):
        w[c, c, k // 2, k // 2] = 1.0
    return w


def params(w, b=None, stride=1, padding=0):
    b = np.zeros(w.shape[0]) if b is None else b
    return L.ConvParams(Tensor(w), Tensor(b), stride, padding)


def naive_conv(x, w, b, stride, padding):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


# --- conv2d ------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = L.conv2d_forward(x, delta_kernel(), None, 1, 1)
    assert np.array_equal(out, x)


def test_conv_delta_image_all_ones_kernel():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    out = L.conv2d_forward(x, np.ones((1, 1, 3, 3)), None, 1, 1)
    assert np.array_equal(out, np.ones((1, 3, 3)))


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5), (2, 0, 2)])
def test_conv_matches_naive_loops(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.normal(size=(3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    assert np.allclose(L.conv2d_forward(x, w, b, stride, padding), naive_conv(x, w, b, stride, padding), atol=1e-12)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(5, 2, 3, 3))
    batched = L.conv2d_forward(x, w, None, 2, 1)
    for n in range(3):
        assert np.allclose(batched[n], L.conv2d_forward(x[n], w, None, 2, 1), atol=1e-13)


def test_conv_output_extent():
    assert L.out_extent(32, 3, 2, 1) == 16
    assert L.out_extent(7, 3, 1, 0) == 5


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        L.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), None)


def test_conv_backward_bias_and_delta():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 5, 5))
    up = rng.normal(size=(1, 5, 5))
    gx, gw, gb = L.conv2d_backward(up, x, delta_kernel(), 1, 1)
    assert np.allclose(gb, up.sum(axis=(1, 2)))
    assert np.allclose(gx, up)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
    err = gradcheck(lambda x, w, b: L.conv2d(x, L.ConvParams(w, b, 1, 1)), [x, w, b])
    assert max(err) < 1e-5


# --- transposed conv ---------------------------------------------------------


def test_tconv_shape_stride2_k2():
    out = L.conv_transpose2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)), None, stride=2)
    assert out.shape == (1, 4, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 1, 3), (2, 1, 3), (2, 0, 2), (2, 2, 5), (3, 1, 3)]))
def test_tconv_is_adjoint_of_conv(seed, geometry):
    stride, padding, k = geometry
    rng = np.random.default_rng(seed)
    h, wd = rng.integers(k, 10, size=2)
    x = rng.normal(size=(2, 3, h, wd))
    w = rng.normal(size=(4, 3, k, k))
    y_shape = L.conv2d_forward(x, w, None, stride, padding).shape
    y = rng.normal(size=y_shape)
    op_h = (h + 2 * padding - k) % stride
    op_w = (wd + 2 * padding - k) % stride
    if op_h != op_w:
        return
    xt = L.conv_transpose2d_forward(y, w, None, stride, padding, op_h)
    assert xt.shape == x.shape
    lhs = np.sum(L.conv2d_forward(x, w, None, stride, padding) * y)
    rhs = np.sum(x * xt)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_tconv_delta_stamps_kernel():
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    y = np.zeros((1, 3, 3))
    y[0, 1, 1] = 1.0
    out = L.conv_transpose2d_forward(y, w, None, stride=2)
    expected = np.zeros((1, 7, 7))
    expected[0, 2:5, 2:5] = w[0, 0]
    assert np.array_equal(out, expected)


def test_tconv_gradients():
    rng = np.random.default_rng(4)
    y, w, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=3)
    err = gradcheck(lambda y, w, b: L.conv_transpose2d(y, L.ConvParams(w, b, 2, 1), 1), [y, w, b])
    assert max(err) < 1e-5


# --- DCL ---------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]))
def test_dcl_zero_flow_is_conv(seed, k):
    rng = np.random.default_rng(seed)
    c, h, wd = rng.integers(1, 4), rng.integers(k, 9), rng.integers(k, 9)
    x = rng.normal(size=(c, h, wd))
    w = rng.normal(size=(2, c, k, k))
    b = rng.normal(size=2)
    ref = L.conv2d_forward(x, w, b, 1, k // 2)
    out = L.dcl_forward(x, w, b, np.zeros((2, h, wd)))
    assert np.max(np.abs(out - ref)) < 1e-12


def test_dcl_integer_shift_with_clamped_border():
    x = np.arange(20.0).reshape(1, 4, 5)
    flow = np.zeros((2, 4, 5))
    flow[0] = 1.0
    out = L.dcl_forward(x, delta_kernel(), None, flow)
    expected = np.concatenate([x[:, :, 1:], x[:, :, -1:]], axis=2)
    assert np.array_equal(out, expected)


def test_dcl_half_pixel_shift_averages_right_neighbour():
    x = np.tile(np.arange(6.0), (1, 3, 1))
    flow = np.zeros((2, 3, 6))
    flow[0] = 0.5
    out = L.dcl_forward(x, delta_kernel(), None, flow)
    right = np.concatenate([x[:, :, 1:], x[:, :, -1:]], axis=2)
    assert np.allclose(out, 0.5 * (x + right), atol=1e-14)


def test_dcl_window_is_displaced_as_a_whole():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 9, 9))
    w = rng.normal(size=(1, 2, 3, 3))
    flow = np.zeros((2, 9, 9))
    flow[0], flow[1] = 2.0, -1.0
    out = L.dcl_forward(x, w, None, flow)
    conv = L.conv2d_forward(x, w, None, 1, 1)
    # interior: window centred at (i - 1, j + 2)
    assert np.allclose(out[0, 2:7, 2:6], conv[0, 1:6, 4:8], atol=1e-12)


def test_dcl_extent_mismatch():
    with pytest.raises(ValueError):
        L.dcl_forward(np.zeros((1, 4, 4)), delta_kernel(), None, np.zeros((2, 4, 5)))


def test_dcl_requires_odd_kernel_and_stride_one():
    with pytest.raises(ValueError):
        L.DclParams(params(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ValueError):
        L.DclParams(params(np.zeros((1, 1, 3, 3)), stride=2))


def test_dcl_zero_flow_weight_gradient_matches_conv():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    up = rng.normal(size=(3, 6, 6))
    _, gw_dcl, gb_dcl, _ = L.dcl_backward(up, x, w, np.zeros((2, 6, 6)))
    _, gw_conv, gb_conv = L.conv2d_backward(up, x, w, 1, 1)
    assert np.allclose(gw_dcl, gw_conv, atol=1e-12)
    assert np.allclose(gb_dcl, gb_conv, atol=1e-12)


def test_dcl_flow_gradient_vanishes_on_constant_image():
    rng = np.random.default_rng(7)
    x = np.full((2, 7, 7), 0.3)
    flow = rng.uniform(-1.4, 1.4, size=(2, 7, 7))
    up = rng.normal(size=(1, 7, 7))
    # a 1x1 window reads only the constant image
    _, _, _, g1 = L.dcl_backward(up, x, rng.normal(size=(1, 2, 1, 1)), flow)
    assert np.max(np.abs(g1)) < 1e-12
    # wider windows also read zero padding once they reach the border
    _, _, _, g3 = L.dcl_backward(up, x, rng.normal(size=(1, 2, 3, 3)), np.clip(flow, -0.9, 0.9))
    assert np.max(np.abs(g3[:, 2:-2, 2:-2])) < 1e-12


def test_dcl_flow_gradient_zero_along_clamped_axis():
    x = np.random.default_rng(8).normal(size=(1, 5, 5))
    flow = np.zeros((2, 5, 5))
    flow[0] = 10.3  # every centre clamps to the last column
    flow[1] = 0.25
    up = np.ones((1, 5, 5))
    _, _, _, gflow = L.dcl_backward(up, x, delta_kernel(), flow)
    assert np.all(gflow[0] == 0)
    assert np.any(gflow[1] != 0)


def test_dcl_all_four_gradients():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 5, 5))
    w, b = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
    flow = rng.uniform(-1.4, 1.4, size=(2, 5, 5))
    flow = np.where(np.abs(flow - np.round(flow)) < 1e-2, flow + 0.05, flow)

    def fn(x, w, b, f):
        return L.dcl(x, L.DclParams(L.ConvParams(w, b)), f)

    assert max(gradcheck(fn, [x, w, b, flow])) < 1e-4


# --- pooling and dense -------------------------------------------------------


def test_maxpool_example():
    out = L.maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_gradient_routes_to_argmax():
    x = Tensor(np.array([[[1.0, 5.0], [3.0, 4.0]]]), requires_grad=True)
    with Tape():
        T.backward(T.reduce_sum(L.maxpool2d(x)))
    assert x.grad.tolist() == [[[0.0, 1.0], [0.0, 0.0]]]


def test_dense_identity():
    x = np.array([1.0, -2.0, 3.0])
    out = L.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        L.dense(Tensor(np.zeros(3)), Tensor(np.eye(2)), Tensor(np.zeros(2)))


def test_gradcheck_suite_under_tolerance():
    errors = run_suite()
    assert set(errors) >= {"conv2d", "conv_transpose2d", "dcl", "dense", "maxpool2d"}
    assert max(errors.values()) < 1e-5
