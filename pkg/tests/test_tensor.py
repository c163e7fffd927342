"""Core tensor engine: op oracles, gradient integrity, reproducibility."""

import math

import numpy as np
import pytest

from crossmodal_tsr import tensor as T
from crossmodal_tsr.errors import (ConfigError, ContractError, NonFiniteError,
                                   ShapeError, StateError)
from crossmodal_tsr.gradcheck import check_gradients
from crossmodal_tsr.optim import SgdMomentum, sgd_momentum_step
from crossmodal_tsr.tensor import BatchNormState, Tape, Tensor, backward


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2, dtype=np.float32))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)

    def test_direct_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data,
                                      [[19.0, 22.0], [43.0, 50.0]])

    def test_zero_matrix(self):
        z = Tensor(np.zeros((3, 4), np.float32))
        b = Tensor(np.arange(8, dtype=np.float32).reshape(4, 2))
        assert not T.matmul(z, b).data.any()

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmaxRows:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([[4.2, 4.2, 4.2]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-7)

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-7)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(scale=30, size=(20, 9)).astype(np.float32))
        np.testing.assert_allclose(T.softmax_rows(x).data.sum(axis=1), 1.0,
                                   atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 7)).astype(np.float32)
        a = T.softmax_rows(Tensor(x)).data
        b = T.softmax_rows(Tensor(x + 13.5)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_no_overflow_on_large_values(self):
        out = T.softmax_rows(Tensor([[1e4, 1e4 - 5.0]])).data
        assert np.all(np.isfinite(out))


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor([1.0] * 3),
                           Tensor([0.0] * 3))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_closed_form(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]),
                           Tensor([0.0, 0.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_output_row_mean_zero(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(6, 11)).astype(np.float32))
        out = T.layer_norm(x, Tensor(np.full(11, 2.0, np.float32)),
                           Tensor(np.zeros(11, np.float32)))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-5)

    def test_scale_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 8)).astype(np.float32)
        gain, bias = Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32))
        a = T.layer_norm(Tensor(x), gain, bias, eps=0.0).data
        b = T.layer_norm(Tensor(3.0 * x + 7.0), gain, bias, eps=0.0).data
        np.testing.assert_allclose(a, b, atol=1e-5)


class TestBatchNorm:
    def test_constant_channel_train(self):
        bn = BatchNormState(2)
        x = Tensor(np.full((3, 2, 4), 9.0, np.float32))
        out = T.batch_norm_1d(x, bn, train=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-2)

    def test_train_mode_standardizes(self):
        bn = BatchNormState(3)
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(2.0, 3.0, size=(8, 3, 10)).astype(np.float32))
        out = T.batch_norm_1d(x, bn, train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-3)

    def test_eval_matches_direct_formula(self):
        bn = BatchNormState(3)
        rng = np.random.default_rng(5)
        for _ in range(4):
            T.batch_norm_1d(Tensor(rng.normal(1.0, 2.0, (6, 3, 5)).astype(np.float32)),
                            bn, train=True)
        bn.gamma.data = rng.normal(size=3).astype(np.float32)
        bn.beta.data = rng.normal(size=3).astype(np.float32)
        x = rng.normal(size=(2, 3, 5)).astype(np.float32)
        out = T.batch_norm_1d(Tensor(x), bn, train=False).data
        mean = bn.running_mean.reshape(1, 3, 1)
        var = bn.running_var.reshape(1, 3, 1)
        gamma = bn.gamma.data.reshape(1, 3, 1)
        beta = bn.beta.data.reshape(1, 3, 1)
        expected = (x - mean) / np.sqrt(var + bn.eps) * gamma + beta
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_eval_without_stats_is_state_error(self):
        bn = BatchNormState(2)
        with pytest.raises(StateError):
            T.batch_norm_1d(Tensor(np.ones((1, 2, 3), np.float32)), bn, train=False)


class TestConv1d:
    def test_delta_kernel_identity(self):
        x = Tensor(np.random.default_rng(6).normal(size=(3, 7)).astype(np.float32))
        kernels = np.zeros((3, 3, 3), np.float32)
        for c in range(3):
            kernels[c, c, 1] = 1.0
        out = T.conv1d_tokens(x, Tensor(kernels), padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_direct_arithmetic(self):
        out = T.conv1d_tokens(Tensor([[1.0, 2.0, 3.0]]),
                              Tensor(np.ones((1, 1, 3), np.float32)), padding=1)
        np.testing.assert_array_equal(out.data, [[3.0, 6.0, 5.0]])

    def test_zero_kernels(self):
        x = Tensor(np.ones((2, 5), np.float32))
        out = T.conv1d_tokens(x, Tensor(np.zeros((4, 2, 3), np.float32)))
        assert not out.data.any()

    def test_empty_token_axis_rejected(self):
        with pytest.raises(ShapeError):
            T.conv1d_tokens(Tensor(np.ones((1, 2, 0), np.float32)),
                            Tensor(np.ones((1, 2, 3), np.float32)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.conv1d_tokens(Tensor(np.ones((2, 5), np.float32)),
                            Tensor(np.ones((2, 2, 4), np.float32)))


class TestElementwise:
    def test_relu_signs(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data,
                                      [0.0, 0.0, 2.0])

    def test_dropout_rate_zero_identity(self):
        x = Tensor(np.arange(6, dtype=np.float32))
        assert T.dropout(x, 0.0, train=True) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6, dtype=np.float32))
        assert T.dropout(x, 0.5, train=False) is x

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones((2000,), np.float32))
        out = T.dropout(x, 0.25, rng=rng, train=True).data
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75, atol=1e-6)
        assert abs(out.mean() - 1.0) < 0.05

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            T.dropout(Tensor([1.0]), 1.0, train=True)

    def test_concat_last_axis(self):
        out = T.concat_last_axis([Tensor([[1.0], [3.0]]), Tensor([[2.0], [4.0]])])
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_mean_pool_tokens(self):
        out = T.mean_pool_tokens(Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), np.float32))

    def test_quadratic_gives_two_x(self):
        x = Tensor(np.arange(1, 5, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_accumulation_over_multiple_uses(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(T.mul(x, x), x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_untaped_loss_rejected(self):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        loss = T.sum_all(x)
        with pytest.raises(ContractError):
            backward(loss)

    def test_composite_graph_matches_finite_differences(self):
        """Random composite graph vs the central-difference oracle (f64)."""
        rng = np.random.default_rng(8)
        w1 = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        g = Tensor(np.ones(5), requires_grad=True)
        b = Tensor(np.zeros(5), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))

        def build():
            h = T.relu(T.matmul(x, w1))
            h = T.layer_norm(h, g, b)
            h = T.softmax_rows(T.matmul(h, w2))
            return T.mean_all(T.mul(h, h))

        report = check_gradients(build, {"w1": w1, "w2": w2, "g": g, "b": b},
                                 max_coords=10)
        assert all(ok for _rel, _n, ok in report.values()), report

    def test_forward_backward_bitwise_reproducible(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(4, 6)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.normal(size=(6, 3)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                loss = T.sum_all(T.softmax_rows(T.matmul(x, w)))
            backward(loss, tape)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestSgdMomentum:
    def test_plain_gradient_descent(self):
        p = Tensor([2.0])
        sgd_momentum_step([p], [np.array([0.5], np.float32)], lr=0.1)
        np.testing.assert_allclose(p.data, [1.95], atol=1e-7)

    def test_zero_grad_fixed_point(self):
        p = Tensor([2.0])
        sgd_momentum_step([p], [np.array([0.0], np.float32)], lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(p.data, [2.0])

    def test_two_step_hand_iteration(self):
        p = Tensor([1.0])
        vel = sgd_momentum_step([p], [np.array([1.0], np.float32)], lr=0.1,
                                momentum=0.9)
        np.testing.assert_allclose(p.data, [0.9], atol=1e-7)
        sgd_momentum_step([p], [np.array([1.0], np.float32)], lr=0.1, momentum=0.9,
                          velocities=vel)
        np.testing.assert_allclose(p.data, [0.71], atol=1e-6)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigError):
            sgd_momentum_step([Tensor([1.0])], [np.array([1.0])], lr=0.0)
        with pytest.raises(ConfigError):
            SgdMomentum(lr=-0.1)

    def test_weight_decay_term(self):
        p = Tensor([2.0])
        sgd_momentum_step([p], [np.array([0.0], np.float32)], lr=0.1,
                          weight_decay=0.5)
        np.testing.assert_allclose(p.data, [1.9], atol=1e-7)
