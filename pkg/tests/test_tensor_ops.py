"""Value-level oracles and tape semantics for the autodiff primitives."""

import math

import numpy as np
import pytest

from sskd import ops
from sskd.errors import ConfigError, DimensionError, TapeError, UsageError, ValidationError
from sskd.tensor import Parameter, Tape, Tensor, backward

from gradcheck import check_gradients


def conv_oracle(x, w, b, stride, padding):
    """Direct nested-loop convolution, the independent reference."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for ni in range(n):
        for co in range(c_out):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[ni, ci, oy * stride + ky, ox * stride + kx]
                                    * w[co, ci, ky, kx]
                                )
                    out[ni, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_sums_all_entries_with_ones_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = ops.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(10.0)

    def test_1x1_unit_kernel_is_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 1, 4, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = ops.conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        got = ops.conv2d(
            Tensor(x, dtype=np.float64),
            Tensor(w, dtype=np.float64),
            Tensor(b, dtype=np.float64),
            stride=2,
            padding=1,
        ).data
        want = conv_oracle(x, w, b, stride=2, padding=1)
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(DimensionError, match=r"\(1, 3, 4, 4\).*\(2, 4, 3, 3\)"):
            ops.conv2d(x, w)

    def test_fractional_output_extent_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ConfigError, match="non-integer"):
            ops.conv2d(x, w, stride=2, padding=0)


class TestLossValues:
    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((3, 4)))
        loss = ops.softmax_cross_entropy(logits, [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4.0), rel=1e-6)

    def test_cross_entropy_saturated_correct(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = 1000.0
        logits[1, 4] = 1000.0
        loss = ops.softmax_cross_entropy(Tensor(logits), [2, 4])
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_cross_entropy_two_class_closed_form(self):
        loss = ops.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [0])
        want = -math.log(math.e / (1.0 + math.e))
        assert loss.item() == pytest.approx(want, rel=1e-6)
        assert loss.item() == pytest.approx(0.313262, abs=1e-6)

    def test_cross_entropy_rejects_out_of_range_label(self):
        with pytest.raises(ValidationError, match="label"):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_l2_identical_is_zero(self):
        a = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
        assert ops.l2_distance(a, Tensor(a.data.copy())).item() == 0.0

    def test_l2_single_vector_counts_as_one_sample(self):
        assert ops.l2_distance(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == pytest.approx(5.0)

    def test_l2_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=(3, 2, 4))
        acc = 0.0
        for i in np.ndindex(a.shape):
            acc += (a[i] - b[i]) ** 2
        want = acc / a.shape[0]
        got = ops.l2_distance(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
        assert got == pytest.approx(want, rel=1e-6)

    def test_l2_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.l2_distance(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestResizeBilinear:
    def test_identity_target_returns_input_unchanged(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 2)))
        out = ops.resize_bilinear(x, (2, 2))
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_map_stays_constant(self):
        x = Tensor(np.full((2, 3, 2, 2), 0.7))
        out = ops.resize_bilinear(x, (5, 3))
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)

    def test_corner_aligned_2x2_to_3x3(self):
        x = Tensor(np.array([[[[0.0, 2.0], [4.0, 6.0]]]]))
        out = ops.resize_bilinear(x, (3, 3))
        want = np.array([[0.0, 1.0, 2.0], [2.0, 3.0, 4.0], [4.0, 5.0, 6.0]])
        np.testing.assert_allclose(out.data[0, 0], want, atol=1e-6)


class TestBackwardSemantics:
    def test_linear_function_gradients(self):
        w = Tensor([2.0, 3.0], requires_grad=True)
        x = Tensor([1.0, 1.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(ops.mul(w, x))
        backward(tape, loss)
        np.testing.assert_array_equal(w.grad, [1.0, 1.0])
        np.testing.assert_array_equal(x.grad, [2.0, 3.0])

    def test_l2_gradient_zero_at_minimum(self):
        a = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ops.l2_distance(a, a.detach())
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))

    def test_second_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(x)
        backward(tape, loss)
        with pytest.raises(TapeError, match="consumed"):
            backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(UsageError, match="scalar"):
            backward(tape, y)

    def test_off_tape_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as t1:
            loss = ops.tsum(x)
        with Tape() as t2:
            ops.relu(x)
            with pytest.raises(TapeError):
                Tape().__enter__()
        with pytest.raises(UsageError, match="tape"):
            backward(t2, loss)

    def test_mixed_dtypes_on_one_tape_rejected(self):
        a = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        b = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
        with Tape():
            with pytest.raises(UsageError, match="dtype"):
                ops.add(a, b)

    def test_frozen_parameter_gets_no_grad_but_passes_gradient_through(self):
        w = Parameter("w", Tensor(np.full((2, 2), 2.0)), trainable=False)
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(ops.linear(x, w.value))
        backward(tape, loss)
        assert w.grad is None
        np.testing.assert_array_equal(x.grad, np.full((1, 2), 4.0))

    def test_grad_accumulates_over_shared_input(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.tsum(ops.add(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_identical_sequence_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
            w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                out = ops.conv2d(x, w, stride=1, padding=1)
                loss = ops.l2_distance(out, Tensor(np.zeros_like(out.data)))
            backward(tape, loss)
            return out.data.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestSoftmaxFamily:
    def test_temperature_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = ops.softmax(Tensor(rng.normal(size=(4, 7))), temperature=4.0)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, rtol=1e-5)

    def test_high_temperature_approaches_uniform(self):
        p = ops.softmax(Tensor([[5.0, -3.0, 1.0]]), temperature=1e6)
        np.testing.assert_allclose(p.data, 1.0 / 3.0, atol=1e-5)

    def test_kl_matches_direct_oracle(self):
        rng = np.random.default_rng(9)
        t = rng.normal(size=(5, 6))
        s = rng.normal(size=(5, 6))
        temp = 4.0

        def soft(z):
            e = np.exp(z / temp - np.max(z / temp, axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        p, q = soft(t), soft(s)
        want = float(np.mean(np.sum(p * np.log(p / q), axis=1))) * temp * temp
        got = ops.kl_soft_targets(
            Tensor(t, dtype=np.float64), Tensor(s, dtype=np.float64), temperature=temp
        ).item()
        assert got == pytest.approx(want, rel=1e-6)


class TestPooling:
    def test_max_pool_picks_window_maxima(self):
        x = Tensor(np.array([[[[1.0, 2.0, 5.0, 3.0], [0.0, 4.0, 1.0, 2.0],
                               [7.0, 1.0, 0.0, 0.0], [2.0, 3.0, 1.0, 6.0]]]]))
        out = ops.max_pool2d(x, kernel=2, stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[4.0, 5.0], [7.0, 6.0]])

    def test_avg_pool_means(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = ops.avg_pool2d(x, kernel=2, stride=2)
        np.testing.assert_allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_global_avg_pool(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        out = ops.global_avg_pool(x)
        np.testing.assert_allclose(out.data, [[1.5, 5.5]])


class TestGradientSpotChecks:
    """Quick per-op sanity; the exhaustive 20-case sweep lives in acceptance."""

    def test_conv_gradcheck(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        check_gradients(
            lambda xx, ww, bb: ops.conv2d(xx, ww, bb, stride=2, padding=1), [x, w, b]
        )

    def test_batch_norm_train_gradcheck(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 2, 4, 4))
        sc = rng.normal(size=2) + 2.0
        sh = rng.normal(size=2)
        rm = np.zeros(2)
        rv = np.ones(2)
        check_gradients(
            lambda xx, s, h: ops.batch_norm2d(xx, s, h, rm, rv, training=True), [x, sc, sh]
        )

    def test_resize_gradcheck(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 2, 3, 4))
        check_gradients(lambda xx: ops.resize_bilinear(xx, (5, 6)), [x])
