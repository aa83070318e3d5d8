import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_diff, loop_mlp
from umnn.errors import ConfigurationError, DimensionError, NumericError, UMNNError
from umnn.nn import (AdamState, Hidden, Output, ParamStore, adam_step, elu_plus_one, init_mlp,
                     log_elu_plus_one, mlp_backward, mlp_forward, squareplus, squareplus_grad_from_output)


class TestInit:
    def test_single_unit_bound(self):
        for seed in range(20):
            p = init_mlp([1, 1], seed)
            assert abs(p.weights[0][0, 0]) <= np.sqrt(3.0)
            assert p.biases[0][0] == 0.0

    def test_glorot_bounds(self):
        p = init_mlp([3, 50, 50, 50, 50, 1], seed=7)
        assert p.sizes == [3, 50, 50, 50, 50, 1]
        assert len(p.weights) == 5
        for w in p.weights:
            a = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            assert np.abs(w).max() <= a
        assert all(np.all(b == 0) for b in p.biases)

    def test_deterministic(self):
        a, b = init_mlp([4, 8, 2], 3), init_mlp([4, 8, 2], 3)
        for (wa, _, _), (wb, _, _) in zip(a.tensors(), b.tensors()):
            assert wa.tobytes() == wb.tobytes()

    @pytest.mark.parametrize("sizes", [[], [3], [3, 0, 1], [2, 1.5]])
    def test_degenerate_sizes(self, sizes):
        with pytest.raises(ConfigurationError):
            init_mlp(sizes, 0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            ParamStore([np.zeros((2, 3)), np.zeros((1, 4))], [np.zeros(2), np.zeros(1)])


class TestForward:
    def test_zero_net_elu_output_is_one(self):
        p = init_mlp([3, 4, 1], 0)
        for w, _, _ in p.tensors():
            w.fill(0.0)
        out, _ = mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3)), Output.ELU_PLUS_ONE)
        np.testing.assert_array_equal(out, 1.0)

    def test_negative_preactivation_stays_positive(self):
        assert elu_plus_one(np.array([-20.0]))[0] == pytest.approx(np.exp(-20.0), rel=1e-15)
        assert elu_plus_one(np.array([-800.0]))[0] >= 0.0
        assert log_elu_plus_one(np.array([-800.0]))[0] == -800.0

    @pytest.mark.parametrize("hidden", [Hidden.RELU, Hidden.SQUAREPLUS])
    @pytest.mark.parametrize("output", [Output.LINEAR, Output.ELU_PLUS_ONE])
    def test_matches_loop_oracle(self, hidden, output):
        rng = np.random.default_rng(1)
        p = init_mlp([4, 6, 3], 2)
        for b in p.biases:
            b[:] = rng.normal(size=b.shape)
        x = rng.normal(size=(5, 4))
        out, _ = mlp_forward(p, x, output, hidden)
        ref = loop_mlp(p.weights, p.biases, x, hidden.value,
                       "elu_plus_one" if output is Output.ELU_PLUS_ONE else None)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_pure(self):
        p = init_mlp([3, 8, 2], 0)
        x = np.random.default_rng(0).normal(size=(4, 3))
        a, _ = mlp_forward(p, x)
        b, _ = mlp_forward(p, x)
        assert a.tobytes() == b.tobytes()

    def test_bad_input_width(self):
        with pytest.raises(DimensionError):
            mlp_forward(init_mlp([3, 2], 0), np.zeros((2, 4)))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e300, 1e300, allow_nan=False))
    def test_elu_plus_one_positive(self, z):
        assert elu_plus_one(np.array([z]))[0] > 0 or z < -745

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_squareplus_positive_and_derivative(self, z):
        a = squareplus(np.array([z]))[0]
        assert a >= 0
        if abs(z) < 1e3:
            s = np.sqrt(z * z + 4.0)
            assert squareplus_grad_from_output(np.array([a]))[0] == pytest.approx(0.5 * (1 + z / s), rel=1e-9, abs=1e-15)


class TestBackward:
    def test_zero_grad_output(self):
        p = init_mlp([3, 5, 2], 0)
        x = np.random.default_rng(0).normal(size=(4, 3))
        _, tape = mlp_forward(p, x)
        gx = mlp_backward(p, tape, np.zeros((4, 2)))
        np.testing.assert_array_equal(gx, 0.0)
        for _, g, _ in p.tensors():
            np.testing.assert_array_equal(g, 0.0)

    def test_scalar_linear(self):
        p = ParamStore([np.array([[1.7]])], [np.array([0.0])])
        x = np.array([[0.3]])
        _, tape = mlp_forward(p, x)
        gx = mlp_backward(p, tape, np.ones((1, 1)))
        assert p.grad_weights[0][0, 0] == pytest.approx(0.3)
        assert gx[0, 0] == pytest.approx(1.7)

    def test_accumulates(self):
        p = init_mlp([2, 3, 1], 0)
        x = np.ones((2, 2))
        _, tape = mlp_forward(p, x)
        mlp_backward(p, tape, np.ones((2, 1)))
        once = [g.copy() for _, g, _ in p.tensors()]
        mlp_backward(p, tape, np.ones((2, 1)))
        for g1, (_, g2, _) in zip(once, p.tensors()):
            np.testing.assert_allclose(g2, 2 * g1)

    @pytest.mark.parametrize("hidden", [Hidden.RELU, Hidden.SQUAREPLUS])
    @pytest.mark.parametrize("output", [Output.LINEAR, Output.ELU_PLUS_ONE])
    def test_finite_differences(self, hidden, output):
        rng = np.random.default_rng(4)
        p = init_mlp([3, 32, 32, 32, 2], 5)
        for b in p.biases:
            b[:] = rng.normal(scale=0.5, size=b.shape)
        x = rng.normal(size=(6, 3))
        out, tape = mlp_forward(p, x, output, hidden)
        gx = mlp_backward(p, tape, np.ones_like(out))

        def loss():
            return mlp_forward(p, x, output, hidden)[0].sum()

        for value, grad, _ in p.tensors():
            idx = tuple(rng.integers(0, s) for s in value.shape)
            fd = central_diff(loss, value, idx, 1e-4)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        for idx in [(0, 0), (3, 2), (5, 1)]:
            fd = central_diff(loss, x, idx, 1e-4)
            assert gx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_masked_entries_get_no_gradient(self):
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = init_mlp([2, 2, 1], 0, masks=[mask, None])
        _, tape = mlp_forward(p, np.ones((3, 2)))
        mlp_backward(p, tape, np.ones((3, 1)))
        assert p.grad_weights[0][0, 1] == 0 and p.grad_weights[0][1, 0] == 0

    def test_foreign_tape(self):
        p = init_mlp([2, 3, 1], 0)
        _, tape = mlp_forward(init_mlp([2, 1], 0), np.ones((1, 2)))
        with pytest.raises(UMNNError):
            mlp_backward(p, tape, np.ones((1, 1)))


class TestAdam:
    def test_zero_grads_no_decay(self):
        p = init_mlp([3, 4, 1], 0)
        before = [v.copy() for v, _, _ in p.tensors()]
        state = AdamState.for_params(p)
        adam_step(p, state)
        for b, (v, _, _) in zip(before, p.tensors()):
            np.testing.assert_array_equal(v, b)
        assert state.step_count == 1

    def test_descends(self):
        p = ParamStore([np.array([[0.0]])], [np.array([0.0])])
        state = AdamState.for_params(p, lr=1e-2)
        for _ in range(10):
            p.grad_weights[0][0, 0] = 2.5
            adam_step(p, state)
        assert p.weights[0][0, 0] < 0

    @staticmethod
    def _scalar_adam_oracle(w, steps, lr=1e-3):
        m = v = 0.0
        for t in range(1, steps + 1):
            g = 2 * (w - 3.0)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        return w

    @pytest.mark.parametrize("w0", [0.0, 1.0])
    def test_quadratic_bowl(self, w0):
        p = ParamStore([np.array([[w0]])], [np.array([0.0])])
        state = AdamState.for_params(p, lr=1e-3)
        for _ in range(5000):
            w = p.weights[0][0, 0]
            p.grad_weights[0][0, 0] = 2 * (w - 3.0)
            adam_step(p, state)
        w = p.weights[0][0, 0]
        assert w == pytest.approx(self._scalar_adam_oracle(w0, 5000), abs=1e-12)
        # from 0 the normalized steps of size ~lr only cover about 2.94 in 5000 steps
        if w0 == 1.0:
            assert abs(w - 3.0) < 1e-2

    def test_rejects_non_finite(self):
        p = init_mlp([2, 2], 0)
        before = p.weights[0].copy()
        state = AdamState.for_params(p)
        p.grad_weights[0][0, 0] = np.nan
        with pytest.raises(NumericError):
            adam_step(p, state)
        np.testing.assert_array_equal(p.weights[0], before)
        assert state.step_count == 0

    def test_masks_survive_many_steps(self):
        rng = np.random.default_rng(0)
        mask = (rng.uniform(size=(6, 4)) > 0.5).astype(float)
        p = init_mlp([4, 6, 2], 0, masks=[mask, None])
        state = AdamState.for_params(p, lr=1e-2, weight_decay=1e-3)
        for _ in range(50):
            out, tape = mlp_forward(p, rng.normal(size=(8, 4)))
            mlp_backward(p, tape, rng.normal(size=out.shape))
            adam_step(p, state)
            assert np.all(p.weights[0][mask == 0] == 0)
            assert p.all_finite()
        for _, g, _ in p.tensors():
            np.testing.assert_array_equal(g, 0.0)

    def test_decoupled_decay(self):
        p = ParamStore([np.array([[2.0]])], [np.array([0.0])])
        state = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
        adam_step(p, state)
        assert p.weights[0][0, 0] == pytest.approx(2.0 * (1 - 0.05))

    def test_bad_hyperparameters(self):
        with pytest.raises(ConfigurationError):
            AdamState.for_params(init_mlp([1, 1], 0), lr=0.0)
