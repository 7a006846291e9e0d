import numpy as np
import pytest

from echostyle import tensor


def loop_conv(x, k, b, stride=1, pad=0):
    """Direct quadruple-loop evaluation of the convolution sum."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                s = 0.0 if b is None else b[oc]
                for ic in range(c):
                    for a in range(kh):
                        for d in range(kw):
                            s += xp[ic, i * stride + a, j * stride + d] * k[oc, ic, a, d]
                out[oc, i, j] = s
    return out


class TestConv2d:
    def test_identity_kernel_is_identity(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = tensor.conv2d(x, k, np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        k = rng.normal(size=(3, 2, 3, 3))
        b = np.array([0.5, -1.0, 2.0])
        out = tensor.conv2d(np.zeros((2, 6, 6)), k, b, padding=1)
        for oc in range(3):
            np.testing.assert_array_equal(out[oc], np.full((6, 6), b[oc]))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = tensor.conv2d(x, k, b, stride, pad)
        np.testing.assert_allclose(out, loop_conv(x, k, b, stride, pad), atol=1e-12)

    def test_linearity_in_input(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 6))
        y = rng.normal(size=(2, 6, 6))
        k = rng.normal(size=(4, 2, 3, 3))
        lhs = tensor.conv2d(2.5 * x - 1.5 * y, k)
        rhs = 2.5 * tensor.conv2d(x, k) - 1.5 * tensor.conv2d(y, k)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError) as err:
            tensor.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))
        assert "3" in str(err.value) and "(2, 5, 5)" in str(err.value)

    def test_input_left_unmodified(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 5, 5))
        before = x.copy()
        tensor.conv2d(x, rng.normal(size=(2, 1, 3, 3)), padding=1)
        np.testing.assert_array_equal(x, before)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        b = np.zeros(3)
        g = rng.normal(size=(3, 4, 4))
        gx, gk, gb = tensor.conv2d_backward(x, k, g, 1, 1)
        h = 1e-6

        def loss(xx, kk, bb):
            return float(np.sum(tensor.conv2d(xx, kk, bb, 1, 1) * g))

        for which, arr, grad in (("x", x, gx), ("k", k, gk), ("b", b, gb)):
            for _ in range(5):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                e = np.zeros_like(arr)
                e[idx] = h
                if which == "x":
                    fd = (loss(x + e, k, b) - loss(x - e, k, b)) / (2 * h)
                elif which == "k":
                    fd = (loss(x, k + e, b) - loss(x, k - e, b)) / (2 * h)
                else:
                    fd = (loss(x, k, b + e) - loss(x, k, b - e)) / (2 * h)
                np.testing.assert_allclose(grad[idx], fd, rtol=1e-5, atol=1e-7)


class TestElementwise:
    def test_relu_definition(self):
        np.testing.assert_array_equal(
            tensor.elementwise("relu", np.array([-1.0, 0.0, 2.0])),
            np.array([0.0, 0.0, 2.0]))

    def test_max_definition(self):
        np.testing.assert_array_equal(
            tensor.elementwise("max", np.array([1.0, 4.0]), np.array([3.0, 2.0])),
            np.array([3.0, 4.0]))

    def test_random_pair_matches_scalar_loop(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        for op, fn in (("add", lambda p, q: p + q), ("sub", lambda p, q: p - q),
                       ("mul", lambda p, q: p * q), ("max", max)):
            out = tensor.elementwise(op, a, b)
            for i in range(3):
                for j in range(4):
                    assert out[i, j] == fn(a[i, j], b[i, j])

    def test_scalar_operand(self):
        np.testing.assert_array_equal(
            tensor.elementwise("mul", np.array([1.0, 2.0]), 3.0),
            np.array([3.0, 6.0]))

    def test_leaky_relu_slope(self):
        out = tensor.elementwise("leaky-relu", np.array([-2.0, 5.0]), slope=0.1)
        np.testing.assert_allclose(out, [-0.2, 5.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            tensor.elementwise("add", np.zeros(3), np.zeros(4))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown op"):
            tensor.elementwise("pow", np.zeros(3), np.zeros(3))


class TestPooling:
    def test_constant_image_stays_constant(self):
        x = np.full((2, 4, 4), 0.7)
        for mode in ("max", "avg"):
            np.testing.assert_array_equal(tensor.pool2d(x, 2, mode), np.full((2, 2, 2), 0.7))

    def test_max_definition(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(tensor.pool2d(x, 2, "max"), [[[4.0]]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 6))
        got_max = tensor.pool2d(x, 3, "max")
        got_avg = tensor.pool2d(x, 3, "avg")
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    block = x[c, 3 * i:3 * i + 3, 3 * j:3 * j + 3]
                    assert got_max[c, i, j] == block.max()
                    np.testing.assert_allclose(got_avg[c, i, j], block.mean())

    def test_window_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            tensor.pool2d(np.zeros((1, 6, 6)), 4, "avg")

    def test_window_larger_than_input(self):
        with pytest.raises(ValueError, match="larger"):
            tensor.pool2d(np.zeros((1, 2, 2)), 3, "max")

    def test_global_avg_pool(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4, 5))
        np.testing.assert_allclose(tensor.global_avg_pool(x), x.mean(axis=(1, 2)))

    def test_avg_backward_is_adjoint(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4, 4))
        g = rng.normal(size=(2, 2, 2))
        lhs = float(np.sum(tensor.pool2d(x, 2, "avg") * g))
        gx = tensor.pool2d_backward(x, 2, "avg", g)
        rng2 = np.random.default_rng(10)
        y = rng2.normal(size=x.shape)
        rhs_gx = float(np.sum(gx * y))
        lhs_y = float(np.sum(tensor.pool2d(y, 2, "avg") * g))
        np.testing.assert_allclose(rhs_gx, lhs_y, rtol=1e-12)
        assert np.isfinite(lhs)
