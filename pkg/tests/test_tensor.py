import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonarsam import tensor as T
from sonarsam.errors import ConfigurationError, ShapeError, UsageError
from sonarsam.tensor import ComputationTape, Tensor, backward, finite_difference_grad, relative_error


def rand(shape, seed, lo=-1.0, hi=1.0, grad=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad)


def check_grad(fn, *inputs, tol=1e-3):
    """Compare tape gradients against central differences.

    The scalar is a fixed random zero-mean projection of ``fn``'s output, which
    keeps float32 round-off in the differences well below the tolerance.
    """
    proj = None

    def f(_=None):
        nonlocal proj
        y = fn(*inputs)
        if proj is None:
            proj = Tensor(np.random.default_rng(99).uniform(-1, 1, y.shape))
        return T.total(T.mul(y, proj))

    with ComputationTape() as tape:
        loss = f()
    grads = backward(loss, tape)
    for x in inputs:
        if x.requires_grad:
            assert relative_error(grads[x], finite_difference_grad(f, x)) <= tol


# -- matmul ------------------------------------------------------------------


def test_matmul_identity_leaves_b_unchanged():
    b = rand((2, 5), 1)
    out = T.matmul(Tensor(np.eye(2)), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 2)).astype(np.float32)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += float(a[i, k]) * float(b[k, j])
    out = T.matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - expected)) <= 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(rand((2, 3), 0), rand((2, 3), 1))


def test_matmul_gradients():
    check_grad(T.matmul, rand((3, 4), 0, grad=True), rand((4, 2), 1, grad=True))
    check_grad(T.matmul, rand((2, 3, 4), 2, grad=True), rand((4, 5), 3, grad=True))
    check_grad(T.matmul, rand((2, 3, 4), 4, grad=True), rand((2, 4, 2), 5, grad=True))


# -- softmax -----------------------------------------------------------------


def test_softmax_constant_row_is_uniform():
    out = T.softmax(Tensor(np.full((1, 11), 3.0)), axis=-1)
    np.testing.assert_allclose(out.data, 1 / 11, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax(Tensor(np.array([row])), axis=-1).data
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.all(out >= 0) and np.all(out <= 1)


def test_softmax_large_logits_match_high_precision_reference():
    import mpmath

    row = [1e4, 0.0, -3.0]
    out = T.softmax(Tensor(np.array([row])), axis=-1).data[0]
    assert np.all(np.isfinite(out))
    den = sum(mpmath.e ** mpmath.mpf(v) for v in row)
    ref = [float(mpmath.e ** mpmath.mpf(v) / den) for v in row]
    np.testing.assert_allclose(out, ref, atol=1e-7)


def test_softmax_gradient_both_axes():
    check_grad(lambda x: T.softmax(x, -1), rand((3, 4), 3, grad=True))
    check_grad(lambda x: T.softmax(x, 0), rand((3, 4), 4, grad=True))


# -- layer norm ----------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    d = 8
    out = T.layer_norm(Tensor(np.full((2, d), 5.0)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_statistics():
    d = 64
    out = T.layer_norm(rand((4, d), 11), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-4)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) <= 1e-4)


def test_layer_norm_gradient():
    w = Tensor(np.linspace(-1, 1, 30).reshape(5, 6))
    check_grad(
        lambda x, g, b: T.mul(T.layer_norm(x, g, b), w),
        rand((5, 6), 12, grad=True),
        rand((6,), 13, grad=True),
        rand((6,), 14, grad=True),
    )


# -- gelu ----------------------------------------------------------------------


def test_gelu_points():
    out = T.gelu(Tensor(np.array([0.0, 10.0, 1.0]))).data
    assert out[0] == 0.0
    assert abs(out[1] - 10.0) <= 1e-3
    erf_ref = 0.5 * 1.0 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(out[2] - erf_ref) <= 1e-3


def test_gelu_gradient():
    check_grad(T.gelu, rand((4, 5), 15, lo=-3, hi=3, grad=True))


def test_sigmoid_gradient_and_extremes():
    check_grad(T.sigmoid, rand((4, 5), 16, lo=-4, hi=4, grad=True))
    out = T.sigmoid(Tensor(np.array([-1e4, 1e4]))).data
    assert np.all(np.isfinite(out))


# -- conv2d --------------------------------------------------------------------


def naive_conv(x, w, stride=1, padding=0, groups=1):
    C, H, W = x.shape
    O, Cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))).astype(np.float64)
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    og = O // groups
    for o in range(O):
        g = o // og
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(Cg):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[g * Cg + c, i * stride + a, j * stride + b] * float(w[o, c, a, b])
                out[o, i, j] = acc
    return out


def test_conv2d_identity_kernel():
    x = rand((1, 5, 5), 20)
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_known_kernel_hand_computed():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    k = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float32).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k)).data
    # x[r, c] = 4r + c, so every window gives sum(kernel * (4r + c)) = -8 (a horizontal ramp)
    np.testing.assert_array_equal(out, np.full((1, 2, 2), -8.0))
    np.testing.assert_allclose(out, naive_conv(x, k), atol=1e-5)


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 0, 2), (2, 1, 4)])
def test_conv2d_matches_sliding_window(stride, padding, groups):
    x = rand((4, 7, 6), 21)
    w = rand((8, 4 // groups, 3, 3), 22)
    out = T.conv2d(x, w, stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(out.data, naive_conv(x.data, w.data, stride, padding, groups), atol=1e-5)


def test_conv2d_groups_isolate_channels():
    x = rand((4, 6, 6), 23)
    w = rand((4, 1, 3, 3), 24)
    base = T.conv2d(x, w, groups=4).data
    x.data[2] += 1.0
    changed = T.conv2d(x, w, groups=4).data
    for c in range(4):
        assert np.array_equal(base[c], changed[c]) == (c != 2)


def test_conv2d_group_zeroing_changes_only_that_group():
    x = rand((6, 5, 5), 25)
    w = rand((4, 3, 3, 3), 26)
    base = T.conv2d(x, w, groups=2).data
    x.data[3:6] = 0.0
    changed = T.conv2d(x, w, groups=2).data
    np.testing.assert_array_equal(base[:2], changed[:2])
    assert not np.array_equal(base[2:], changed[2:])


def test_conv2d_indivisible_groups():
    with pytest.raises(ConfigurationError):
        T.conv2d(rand((3, 4, 4), 0), rand((3, 1, 3, 3), 1), groups=2)


def test_conv2d_gradients():
    check_grad(
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1, groups=2),
        rand((2, 4, 5, 5), 27, grad=True),
        rand((4, 2, 3, 3), 28, grad=True),
        rand((4,), 29, grad=True),
    )


# -- transpose conv --------------------------------------------------------------


def test_transpose_conv_output_shape():
    out = T.transpose_conv2d(rand((3, 8, 8), 30), rand((3, 2, 2, 2), 31), stride=2)
    assert out.shape == (2, 16, 16)


def test_transpose_conv_zero_input_gives_bias():
    b = Tensor(np.array([0.5, -2.0]))
    out = T.transpose_conv2d(Tensor(np.zeros((3, 4, 4))), rand((3, 2, 3, 3), 32), b, stride=2)
    np.testing.assert_array_equal(out.data[0], 0.5)
    np.testing.assert_array_equal(out.data[1], -2.0)


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 2), (3, 1), (4, 3)])
def test_transpose_conv_is_conv_input_gradient(k, stride):
    # conv2d maps (Cx, H, W) -> (Cy, h, w); its input gradient given dy is the
    # transpose conv of dy with the same (Cy, Cx, k, k) kernel.
    cy, cx = 3, 2
    w = rand((cy, cx, k, k), 33)
    h = 4
    H = (h - 1) * stride + k
    x = rand((cx, H, H), 34, grad=True)
    dy = rand((cy, h, h), 35)
    with ComputationTape() as tape:
        y = T.conv2d(x, w, stride=stride)
        assert y.shape == dy.shape
        loss = T.total(T.mul(y, dy))
    grads = backward(loss, tape)
    out = T.transpose_conv2d(dy, w, stride=stride)
    np.testing.assert_allclose(out.data, grads[x], atol=1e-5)


def test_transpose_conv_gradients():
    for k, s in [(2, 2), (3, 2)]:
        check_grad(
            lambda x, w, b: T.transpose_conv2d(x, w, b, stride=s),
            rand((2, 3, 3, 3), 36, grad=True),
            rand((3, 2, k, k), 37, grad=True),
            rand((2,), 38, grad=True),
        )


# -- resampling, reductions, misc ---------------------------------------------


def test_bilinear_resize_constant_and_gradient():
    out = T.resize_bilinear(Tensor(np.full((2, 4, 4), 3.0)), (9, 7))
    np.testing.assert_allclose(out.data, 3.0, atol=1e-6)
    check_grad(lambda x: T.mul(T.resize_bilinear(x, (8, 6)), rand((2, 8, 6), 40)), rand((2, 4, 3), 39, grad=True))


def test_shape_op_gradients():
    w = rand((3, 4), 41)
    check_grad(lambda x: T.mul(T.transpose(T.reshape(x, (4, 3)), (1, 0)), w), rand((2, 6), 42, grad=True))
    check_grad(lambda x: T.mul(T.slice_axis(x, 1, 1, 3), rand((3, 2), 43)), rand((3, 5), 44, grad=True))
    check_grad(lambda a, b: T.mul(T.concat([a, b], 0), rand((5, 2), 45)), rand((2, 2), 46, grad=True), rand((3, 2), 47, grad=True))
    check_grad(lambda x: T.mul(T.repeat_batch(x, 3), rand((3, 2, 2), 48)), rand((2, 2), 49, grad=True))
    check_grad(lambda a, b: T.mul(T.add(a, b), rand((3, 4), 50)), rand((3, 4), 51, grad=True), rand((4,), 52, grad=True))
    check_grad(lambda a, b: T.mul(a, b), rand((3, 4), 53, grad=True), rand((1, 4), 54, grad=True))
    check_grad(lambda x, w, b: T.gelu(T.linear(x, w, b)), rand((2, 3, 4), 55, grad=True), rand((5, 4), 56, grad=True), rand((5,), 57, grad=True))


# -- backward / finite differences --------------------------------------------


def test_backward_of_sum_is_ones():
    x = rand((3, 4), 60, grad=True)
    with ComputationTape() as tape:
        loss = T.total(x)
    np.testing.assert_array_equal(backward(loss, tape)[x], np.ones((3, 4)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_two_layer_chain_matches_finite_differences():
    w1 = rand((4, 6), 61, grad=True)
    w2 = rand((6, 1), 62, grad=True)
    x = rand((5, 4), 63)

    def f(_=None):
        return T.total(T.matmul(T.gelu(T.matmul(x, w1)), w2))

    with ComputationTape() as tape:
        loss = f()
    grads = backward(loss, tape)
    for p in (w1, w2):
        assert relative_error(grads[p], finite_difference_grad(f, p)) <= 1e-3


def test_backward_skips_frozen_leaf():
    w = rand((3, 3), 64, grad=False)
    x = rand((2, 3), 65, grad=True)
    with ComputationTape() as tape:
        loss = T.total(T.matmul(x, w))
    grads = backward(loss, tape)
    assert w not in grads and w.grad is None
    assert x in grads


def test_ops_outside_tape_or_on_frozen_inputs_are_not_recorded():
    w = rand((3, 3), 66)
    with ComputationTape() as tape:
        T.matmul(w, w)
    assert len(tape) == 0


def test_backward_rejects_non_scalar():
    x = rand((2, 2), 67, grad=True)
    with ComputationTape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(UsageError):
        backward(y, tape)


def test_finite_difference_basics():
    # dyadic values and step keep every probe and partial sum exact in float32
    grid = Tensor(np.arange(-6, 6).reshape(3, 4) / 8.0)
    np.testing.assert_allclose(finite_difference_grad(T.total, grid, h=2**-10), 1.0, atol=1e-6)
    x = rand((3, 4), 68)
    half_sq = lambda t: T.scale(T.total(T.mul(t, t)), 0.5)
    np.testing.assert_allclose(finite_difference_grad(half_sq, x), x.data, atol=1e-3)


def test_finite_difference_matches_backward_on_mlp():
    x = rand((6, 5), 69)
    w1, b1 = rand((8, 5), 70, grad=True), rand((8,), 71, grad=True)
    w2, b2 = rand((3, 8), 72, grad=True), rand((3,), 73, grad=True)
    proj = rand((6, 3), 76)

    def f(_=None):
        h = T.gelu(T.linear(x, w1, b1))
        return T.total(T.softmax(T.linear(h, w2, b2), -1) * proj)

    with ComputationTape() as tape:
        loss = f()
    grads = backward(loss, tape)
    for p in (w1, b1, w2, b2):
        assert relative_error(grads[p], finite_difference_grad(f, p)) <= 1e-3


def test_ops_are_deterministic():
    x, w = rand((2, 4, 9, 9), 74), rand((6, 2, 3, 3), 75)
    a = T.gelu(T.conv2d(x, w, groups=2, padding=1)).data
    b = T.gelu(T.conv2d(x, w, groups=2, padding=1)).data
    assert a.tobytes() == b.tobytes()
