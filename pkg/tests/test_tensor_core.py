import numpy as np
import pytest

from hedonic import tensor_core as tc
from hedonic.errors import DimensionError, StateError
from helpers import LAYER_KINDS, gradient_check_layer

F32 = np.float32


def arr(x):
    return np.asarray(x, dtype=F32)


class TestDenseForward:
    def test_identity_weights(self):
        out = tc.dense_forward(arr([[1, 2]]), np.eye(2, dtype=F32), arr([0, 0]))
        assert np.array_equal(out, arr([[1, 2]]))

    def test_bias_shift(self):
        out = tc.dense_forward(arr([[1, 2]]), np.eye(2, dtype=F32), arr([3, 4]))
        assert np.array_equal(out, arr([[4, 6]]))

    def test_hand_matmul(self):
        out = tc.dense_forward(arr([[1, 2], [3, 4]]), arr([[1, 1], [1, -1]]), arr([0, 0]))
        assert np.array_equal(out, arr([[3, -1], [7, -1]]))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            tc.dense_forward(arr([[1, 2, 3]]), np.eye(2, dtype=F32), arr([0, 0]))


class TestConvForward:
    def test_zero_input_gives_bias(self):
        x = np.zeros((2, 3, 4, 4), dtype=F32)
        k = np.ones((5, 3, 3, 3), dtype=F32)
        b = arr([1, 2, 3, 4, 5])
        out = tc.conv2d_forward(x, k, b)
        assert out.shape == (2, 5, 4, 4)
        assert np.array_equal(out, np.broadcast_to(b[None, :, None, None], out.shape))

    def test_ones_input_ones_kernel(self):
        x = np.ones((1, 1, 3, 3), dtype=F32)
        k = np.ones((1, 1, 3, 3), dtype=F32)
        out = tc.conv2d_forward(x, k, np.zeros(1, dtype=F32))[0, 0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    def test_impulse_response_is_flipped_kernel(self):
        rng = np.random.default_rng(0)
        k = rng.standard_normal((1, 1, 3, 3)).astype(F32)
        x = np.zeros((1, 1, 5, 5), dtype=F32)
        x[0, 0, 2, 2] = 1.0
        out = tc.conv2d_forward(x, k, np.zeros(1, dtype=F32))[0, 0]
        assert np.allclose(out[1:4, 1:4], k[0, 0, ::-1, ::-1])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channels"):
            tc.conv2d_forward(np.zeros((1, 2, 4, 4), dtype=F32),
                              np.zeros((1, 3, 3, 3), dtype=F32), np.zeros(1, dtype=F32))


class TestMaxPoolForward:
    def test_single_window(self):
        out, _ = tc.maxpool2d_forward(arr([[1, 2], [3, 4]]).reshape(1, 1, 2, 2))
        assert out.reshape(()) == 4

    def test_constant_input(self):
        out, _ = tc.maxpool2d_forward(np.full((1, 2, 4, 4), 7, dtype=F32))
        assert np.array_equal(out, np.full((1, 2, 2, 2), 7, dtype=F32))

    def test_ramp(self):
        x = np.arange(16, dtype=F32).reshape(1, 1, 4, 4)
        out, _ = tc.maxpool2d_forward(x)
        assert np.array_equal(out[0, 0], arr([[5, 7], [13, 15]]))

    def test_odd_dims_rejected(self):
        with pytest.raises(DimensionError, match="even"):
            tc.maxpool2d_forward(np.zeros((1, 1, 3, 4), dtype=F32))


class TestReluForward:
    def test_mixed(self):
        assert np.array_equal(tc.relu_forward(arr([-1, 0, 2])), arr([0, 0, 2]))

    def test_all_negative(self):
        assert np.array_equal(tc.relu_forward(arr([-5, -1])), arr([0, 0]))

    def test_all_positive_identity(self):
        x = arr([1, 2, 3])
        assert np.array_equal(tc.relu_forward(x), x)


class TestGlobalAvgPool:
    def test_constant(self):
        assert np.array_equal(tc.global_avg_pool(np.full((1, 2, 3, 3), 5, dtype=F32)),
                              np.full((1, 2), 5, dtype=F32))

    def test_hand_mean(self):
        x = arr([[0, 2], [4, 6]]).reshape(1, 1, 2, 2)
        assert tc.global_avg_pool(x)[0, 0] == 3

    def test_single_pixel_identity(self):
        x = arr([[[[2.5]]]])
        assert tc.global_avg_pool(x)[0, 0] == 2.5


class TestMseLoss:
    def test_perfect(self):
        loss, grad = tc.mse_loss(arr([[1], [2]]), arr([[1], [2]]))
        assert loss == 0
        assert np.array_equal(grad, np.zeros((2, 1), dtype=F32))

    def test_single(self):
        loss, grad = tc.mse_loss(arr([[2]]), arr([[0]]))
        assert loss == 4
        assert np.array_equal(grad, arr([[4]]))

    def test_pair(self):
        loss, grad = tc.mse_loss(arr([[1], [3]]), arr([[0], [0]]))
        assert loss == 5
        assert np.array_equal(grad, arr([[1], [3]]))

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            tc.mse_loss(np.zeros((0, 1), dtype=F32), np.zeros((0, 1), dtype=F32))

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.standard_normal((4, 1)).astype(F32)
            t = rng.standard_normal((4, 1)).astype(F32)
            loss, _ = tc.mse_loss(p, t)
            assert loss >= 0
            assert (loss == 0) == bool(np.array_equal(p, t))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [arr([1, 2, 3])]
        st = tc.AdamState.for_params(p)
        tc.adam_step(p, [np.zeros(3, dtype=F32)], st)
        assert np.array_equal(p[0], arr([1, 2, 3]))
        assert st.t == 1

    def test_first_step_is_about_lr(self):
        p = [arr([1.0])]
        st = tc.AdamState.for_params(p, lr=0.1)
        tc.adam_step(p, [arr([1.0])], st)
        assert p[0][0] == pytest.approx(0.9, abs=1e-6)

    def test_monotone_decrease_on_constant_positive_grad(self):
        p = [arr([5.0])]
        st = tc.AdamState.for_params(p, lr=0.01)
        seen = [float(p[0][0])]
        for _ in range(20):
            tc.adam_step(p, [arr([1.0])], st)
            seen.append(float(p[0][0]))
        assert all(b < a for a, b in zip(seen, seen[1:]))

    def test_shape_mismatch(self):
        p = [arr([1.0, 2.0])]
        st = tc.AdamState.for_params(p)
        with pytest.raises(DimensionError):
            tc.adam_step(p, [arr([1.0])], st)

    def test_step_counter_increments(self):
        p = [arr([1.0])]
        st = tc.AdamState.for_params(p)
        for expect in (1, 2, 3):
            tc.adam_step(p, [arr([0.5])], st)
            assert st.t == expect


class TestLayerBackward:
    def test_dense_zero_upstream_zero_grads(self):
        layer = tc.Dense(np.eye(2, dtype=F32), np.zeros(2, dtype=F32))
        layer.forward(arr([[1, 2]]))
        g = tc.layer_backward(layer, np.zeros((1, 2), dtype=F32))
        assert all(np.all(pg == 0) for pg in g.param_grads)
        assert np.all(g.input_grad == 0)

    def test_relu_gates_and_zero_at_zero(self):
        layer = tc.ReLU()
        layer.forward(arr([[-1, 0, 2]]))
        g = tc.layer_backward(layer, arr([[10, 10, 10]]))
        assert np.array_equal(g.input_grad, arr([[0, 0, 10]]))

    def test_backward_without_forward_is_state_error(self):
        for layer in (tc.Dense(np.eye(2, dtype=F32), np.zeros(2, dtype=F32)),
                      tc.Conv2d(np.zeros((1, 1, 3, 3), dtype=F32), np.zeros(1, dtype=F32)),
                      tc.MaxPool2d(), tc.ReLU(), tc.GlobalAvgPool()):
            with pytest.raises(StateError):
                tc.layer_backward(layer, np.zeros((1, 2), dtype=F32))

    @pytest.mark.parametrize("kind", LAYER_KINDS)
    def test_gradients_match_finite_differences(self, kind):
        assert gradient_check_layer(kind, trials=10) < 1e-3


class TestInvariants:
    def test_dense_linear_in_x_without_bias(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6)).astype(F32)
        w = rng.standard_normal((6, 3)).astype(F32)
        b = np.zeros(3, dtype=F32)
        for alpha in (0.5, 2.0, -1.3):
            lhs = tc.dense_forward(np.float32(alpha) * x, w, b)
            rhs = np.float32(alpha) * tc.dense_forward(x, w, b)
            assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-6)

    def test_conv_linear_in_x_without_bias(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 6, 6)).astype(F32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(F32)
        b = np.zeros(4, dtype=F32)
        for alpha in (0.5, 3.0):
            lhs = tc.conv2d_forward(np.float32(alpha) * x, k, b)
            rhs = np.float32(alpha) * tc.conv2d_forward(x, k, b)
            assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_maxpool_routes_each_gradient_to_one_position(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 6, 3))  # channels-last layer input
        pool = tc.MaxPool2d()
        pool.forward(x)
        up = rng.standard_normal((2, 2, 3, 3))
        g = tc.layer_backward(pool, up)
        assert g.input_grad.sum() == pytest.approx(up.sum(), rel=1e-12)
        # per 2x2 window, exactly one position receives gradient
        win = g.input_grad.reshape(2, 2, 2, 3, 2, 3).transpose(0, 1, 3, 5, 2, 4)
        counts = (win.reshape(2, 2, 3, 3, 4) != 0).sum(axis=-1)
        assert np.all(counts == 1)

    def test_forward_ops_produce_finite_outputs(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 8, 8)).astype(F32) * 100
        k = rng.standard_normal((4, 3, 3, 3)).astype(F32)
        out = tc.conv2d_forward(x, k, np.zeros(4, dtype=F32))
        assert np.all(np.isfinite(out))
        pooled, _ = tc.maxpool2d_forward(out)
        assert np.all(np.isfinite(pooled))
        assert np.all(np.isfinite(tc.global_avg_pool(pooled)))

    def test_deterministic_across_repeated_runs(self):
        def run():
            rng = np.random.default_rng(9)
            x = rng.standard_normal((3, 4, 4, 2)).astype(F32)
            conv = tc.Conv2d(tc.glorot_uniform(rng, (2, 2, 3, 3), 18, 18),
                             np.zeros(2, dtype=F32))
            out = conv.forward(x)
            g = conv.backward(np.ones_like(out))
            return out.tobytes(), g.param_grads[0].tobytes()

        assert run() == run()
