import math

import numpy as np
import pytest

from rkr.tensor import (
    DimensionError,
    GeometryError,
    Param,
    affine_backward,
    affine_forward,
    checksum,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    make_rng,
    matmul,
    maxpool_forward,
    softmax,
    softmax_cross_entropy,
)


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def naive_conv(x, kernel, stride, padding):
    """Direct sliding-window sum over an (H, W, C_in) image."""
    h, w, cin = x.shape
    wf, hf, _, cout = kernel.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - hf) // stride + 1
    wo = (w + 2 * padding - wf) // stride + 1
    y = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                s = 0.0
                for a in range(hf):
                    for b in range(wf):
                        for ci in range(cin):
                            s += xp[i * stride + a, j * stride + b, ci] * kernel[b, a, ci, co]
                y[i, j, co] = s
    return y


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), b), b)

    def test_hand_product(self):
        a, b = [[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]]
        assert naive_matmul(a, b) == [[17.0], [39.0]]
        np.testing.assert_array_equal(matmul(np.array(a), np.array(b)), [[17.0], [39.0]])

    def test_zero_annihilates(self, rng):
        np.testing.assert_array_equal(matmul(np.zeros((2, 2)), rng.standard_normal((2, 3))), np.zeros((2, 3)))

    def test_matches_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestConv2d:
    def test_scalar_multiply(self):
        y, _ = conv2d_forward(np.array([[[2.0]]]), np.array([[[[3.0]]]]))
        np.testing.assert_array_equal(y, [[[6.0]]])

    def test_diagonal_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        k = np.array([[1.0, 0.0], [0.0, 1.0]])[..., None, None]
        y, _ = conv2d_forward(x, k)
        assert y.shape == (1, 1, 1)
        assert y[0, 0, 0] == 5.0

    def test_zero_kernel(self, rng):
        y, _ = conv2d_forward(rng.standard_normal((5, 5, 2)), np.zeros((3, 3, 2, 4)), 1, 1)
        np.testing.assert_array_equal(y, 0.0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_sliding_window_oracle(self, rng, stride, padding):
        x = rng.standard_normal((6, 7, 3))
        k = rng.standard_normal((3, 2, 3, 4))  # W_f=3, H_f=2: exercises the non-square axis order
        y, _ = conv2d_forward(x, k, stride, padding)
        np.testing.assert_allclose(y, naive_conv(x, k, stride, padding), rtol=1e-12, atol=1e-12)

    def test_output_extent_formula(self, rng):
        y, _ = conv2d_forward(rng.standard_normal((2, 9, 7, 1)), rng.standard_normal((3, 5, 1, 2)), 2, 1)
        # H' = (9 + 2 - 5)//2 + 1 = 4, W' = (7 + 2 - 3)//2 + 1 = 4
        assert y.shape == (2, 4, 4, 2)

    def test_kernel_too_large(self):
        with pytest.raises(GeometryError):
            conv2d_forward(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((4, 4, 2)), np.zeros((3, 3, 1, 1)))

    def test_kernel_gradient_finite_differences(self):
        rng = make_rng(0)
        x = rng.standard_normal((4, 4, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        y, cache = conv2d_forward(x, k)
        g = rng.standard_normal(y.shape)
        _, dk = conv2d_backward(g, cache)
        report = grad_check(lambda: float(np.sum(conv2d_forward(x, k)[0] * g)), {"k": k}, {"k": dk}, 1e-4, 1e-5)
        assert report.passed, report


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(affine_forward(np.array([1.0, 0.0]), np.eye(2), np.zeros(2)), [1.0, 0.0])

    def test_hand_arithmetic(self):
        y = affine_forward(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(y, [2.0, 2.0])

    def test_zero_input_gives_bias(self, rng):
        b = rng.standard_normal(3)
        np.testing.assert_array_equal(affine_forward(np.zeros(4), rng.standard_normal((4, 3)), b), b)

    def test_batched(self, rng):
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        y = affine_forward(x, w, b)
        for i in range(5):
            np.testing.assert_allclose(y[i], affine_forward(x[i], w, b), rtol=1e-14)

    def test_backward_shapes(self, rng):
        x, w = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        dx, dw, db = affine_backward(np.ones((5, 3)), x, w)
        assert dx.shape == x.shape and dw.shape == w.shape and db.shape == (3,)
        np.testing.assert_allclose(db, [5.0, 5.0, 5.0])

    def test_bias_mismatch(self):
        with pytest.raises(DimensionError):
            affine_forward(np.zeros(2), np.zeros((2, 3)), np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(4), 2)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_direct_evaluation(self):
        loss, _ = softmax_cross_entropy(np.array([0.0, math.log(3)]), 0)
        # softmax = [1/4, 3/4]
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_no_overflow(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
        assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_gradient_is_softmax_minus_one_hot(self, rng):
        logits = rng.standard_normal(5)
        _, g = softmax_cross_entropy(logits, 3)
        expected = softmax(logits)
        expected[3] -= 1
        np.testing.assert_allclose(g, expected, atol=1e-15)

    @pytest.mark.parametrize("label", [-1, 4])
    def test_label_out_of_range(self, label):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(4), label)


class TestGradCheck:
    def test_linear_map(self):
        x = np.array([0.7, -1.3])
        report = grad_check(lambda: float(np.sum(3 * x)), {"x": x}, {"x": np.full(2, 3.0)}, tolerance=1e-6)
        assert report.passed and report.max_rel_error < 1e-9

    def test_constant_function(self):
        x = np.array([1.0, 2.0])
        report = grad_check(lambda: 5.0, {"x": x}, {"x": np.zeros(2)}, tolerance=1e-12)
        assert report.passed and report.max_rel_error == 0.0

    def test_detects_wrong_gradient(self):
        x = np.array([1.0])
        report = grad_check(lambda: float(x[0] ** 2), {"x": x}, {"x": np.array([0.0])})
        assert not report.passed
        assert report.worst == ("x", (0,))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_is_reported_with_element(self):
        x = np.array([0.0, 1.0])
        report = grad_check(lambda: float(np.log(x).sum()), {"x": x}, {"x": 1 / x})
        assert not report.passed
        assert report.nonfinite[:2] == ("x", (0,))

    def test_requires_float64(self):
        x = np.zeros(2, np.float32)
        with pytest.raises(TypeError):
            grad_check(lambda: 0.0, {"x": x}, {"x": x})


class TestPoolingAndParams:
    def test_maxpool_picks_block_maxima(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        y, _ = maxpool_forward(x)
        np.testing.assert_array_equal(y[..., 0], [[5, 7], [13, 15]])

    def test_frozen_param_ignores_gradient(self):
        p = Param(np.ones(3), frozen=True)
        p.accumulate(np.ones(3))
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_param_gradient_shape_checked(self):
        with pytest.raises(DimensionError):
            Param(np.ones(3)).accumulate(np.ones(2))


class TestDeterminism:
    def test_same_seed_same_stream(self):
        assert checksum(make_rng(7, 1).standard_normal(100)) == checksum(make_rng(7, 1).standard_normal(100))

    def test_keys_give_distinct_streams(self):
        assert not np.array_equal(make_rng(7, 1).standard_normal(10), make_rng(7, 2).standard_normal(10))

    def test_op_sequence_bit_identical(self):
        def run():
            r = make_rng(3)
            x, k = r.standard_normal((2, 6, 6, 2)), r.standard_normal((3, 3, 2, 4))
            y, _ = conv2d_forward(x, k, 1, 1)
            return checksum(maxpool_forward(np.maximum(y, 0))[0])

        assert run() == run()

    def test_checksum_sees_dtype_and_shape(self):
        a = np.zeros(4)
        assert checksum(a) != checksum(a.reshape(2, 2))
        assert checksum(a) != checksum(a.astype(np.float32))
