import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dglab import diffgraph as dg

from .gradcheck import max_op_error, op_cases, op_relative_error

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        A = np.array([[1.5, -2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(dg.matmul(np.eye(2), A).value, A)

    def test_hand_evaluated(self):
        out = dg.matmul([[1, 2], [3, 4]], [[5], [6]]).value
        # 1*5 + 2*6 and 3*5 + 4*6
        np.testing.assert_array_equal(out, [[17.0], [39.0]])

    def test_shape_error(self):
        with pytest.raises(dg.ShapeError):
            dg.matmul(np.ones((2, 3)), np.ones((2, 2)))


class TestElementwise:
    def test_relu_zero(self):
        np.testing.assert_array_equal(dg.relu(np.zeros((3, 2))).value, np.zeros((3, 2)))

    def test_affine_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(dg.affine(x, np.eye(3), np.zeros((1, 3))).value, x)

    def test_tanh_gradient_at_zero(self):
        x = dg.parameter(np.zeros((2, 3)))
        dg.backward(dg.sum(dg.tanh(x)))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_affine_shape_mismatch(self):
        with pytest.raises(dg.ShapeError):
            dg.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros((1, 2)))

    def test_concat_cols_row_mismatch(self):
        with pytest.raises(dg.ShapeError):
            dg.concat_cols(np.ones((2, 3)), np.ones((3, 1)))

    def test_rejects_three_dims(self):
        with pytest.raises(dg.ShapeError):
            dg.constant(np.ones((2, 2, 2)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        assert dg.softmax_cross_entropy(np.zeros((5, 4)), [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_margin(self):
        logits = np.array([[1000.0, 0.0, 0.0]])
        assert dg.softmax_cross_entropy(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_class_value(self):
        expected = -math.log(math.e**2 / (math.e**2 + 1))
        assert dg.softmax_cross_entropy([[2.0, 0.0]], [0]).item() == pytest.approx(expected, rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            dg.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])

    def test_weighted_mean_matches_recount(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((6, 3))
        y = rng.integers(0, 3, 6)
        w = rng.uniform(0.1, 2.0, 6)
        per = -dg.log_softmax_values(logits)[np.arange(6), y]
        assert dg.softmax_cross_entropy(logits, y, w).item() == pytest.approx((w * per).sum() / w.sum(), rel=1e-13)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            dg.softmax_cross_entropy(np.zeros((2, 2)), [0, 1], [1.0, -1.0])


class TestSoftmax:
    def test_zero_row(self):
        np.testing.assert_allclose(dg.softmax(np.zeros((1, 3))).value, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(dg.softmax([[math.log(2.0), 0.0]]).value, [[2 / 3, 1 / 3]], rtol=1e-14)

    @given(arrays(np.float64, (3, 4), elements=finite), finite)
    def test_shift_invariance_and_simplex(self, logits, c):
        p = dg.softmax(logits).value
        np.testing.assert_allclose(p, dg.softmax(logits + c).value, atol=1e-12)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestGradReverse:
    def test_forward_is_identity(self):
        x = np.random.default_rng(2).standard_normal((3, 2))
        np.testing.assert_array_equal(dg.grad_reverse(x, 0.7).value, x)

    def test_unit_lambda_negates(self):
        x = dg.parameter(np.ones((2, 3)))
        dg.backward(dg.sum(dg.grad_reverse(x, 1.0)))
        np.testing.assert_array_equal(x.grad, -np.ones((2, 3)))

    def test_zero_lambda_blocks(self):
        x = dg.parameter(np.ones((2, 3)))
        dg.backward(dg.sum(dg.grad_reverse(x, 0.0)))
        assert np.all(x.grad == 0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            dg.grad_reverse(np.ones((1, 1)), -1.0)


class TestBackward:
    def test_sum_gives_ones(self):
        W = dg.parameter(np.random.default_rng(3).standard_normal((3, 4)))
        dg.backward(dg.sum(W))
        np.testing.assert_array_equal(W.grad, np.ones((3, 4)))

    def test_detached_branch_gets_no_gradient(self):
        W = dg.parameter(np.ones((2, 2)))
        V = dg.parameter(np.ones((2, 2)))
        dg.backward(dg.add(dg.sum(dg.detach(dg.mul(W, 3.0))), dg.sum(V)))
        assert W.grad is None
        np.testing.assert_array_equal(V.grad, np.ones((2, 2)))

    def test_shared_node_visited_once(self):
        x = dg.parameter([[2.0]])
        y = dg.mul(x, x)
        loss = dg.add(y, y)  # d/dx 2x^2 = 4x
        dg.backward(loss)
        assert x.grad[0, 0] == pytest.approx(8.0)

    def test_repeated_backward_is_idempotent(self):
        x = dg.parameter([[1.5, -0.5]])
        loss = dg.sum(dg.square(x))
        dg.backward(loss)
        first = x.grad.copy()
        dg.backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(dg.ShapeError):
            dg.backward(dg.parameter(np.ones((2, 2))))

    @pytest.mark.parametrize("name", [c[0] for c in op_cases(np.random.default_rng(0))])
    def test_op_gradient_matches_finite_differences(self, name):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            case = {c[0]: c for c in op_cases(rng)}[name]
            assert op_relative_error(name, case[1], case[2], rng) <= 1e-4

    def test_random_compositions(self):
        for seed in range(10, 15):
            err, where = max_op_error(seed)
            assert err <= 1e-4, where


class TestOptimizers:
    def test_adam_zero_gradient_keeps_params(self):
        store = dg.ParamStore()
        p = store.add("w", np.array([[1.0, -2.0]]))
        p.grad = np.zeros((1, 2))
        dg.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.value, [[1.0, -2.0]])

    def test_adam_quadratic(self):
        store = dg.ParamStore()
        w = store.add("w", [[0.0]])
        for _ in range(2000):
            store.zero_grad()
            dg.backward(dg.square(dg.sub(w, 3.0)))
            dg.adam_step(store, lr=1e-2)
        assert abs(w.item() - 3.0) < 1e-3

    def test_sgd_moves_minus_lr_grad(self):
        store = dg.ParamStore()
        w = store.add("w", [[1.0, 2.0]])
        c = np.array([[0.5, -3.0]])
        dg.backward(dg.sum(dg.mul(w, c)))
        dg.sgd_step(store, lr=0.1)
        np.testing.assert_allclose(w.value, [[1.0 - 0.05, 2.0 + 0.3]], rtol=1e-15)

    def test_adam_per_parameter_step_counts(self):
        store = dg.ParamStore()
        a = store.add("a", [[1.0]])
        store.add("b", [[1.0]])
        a.grad = np.ones((1, 1))
        dg.adam_step(store, names=["a"])
        assert store.t == {"a": 1}

    def test_missing_gradient_raises(self):
        store = dg.ParamStore()
        store.add("w", [[1.0]])
        with pytest.raises(ValueError):
            dg.adam_step(store)

    def test_duplicate_names(self):
        store = dg.ParamStore()
        store.add("w", [[1.0]])
        with pytest.raises(KeyError):
            store.add("w", [[2.0]])

    def test_load_rejects_new_shape(self):
        store = dg.ParamStore()
        store.add("w", np.ones((2, 2)))
        with pytest.raises(dg.ShapeError):
            store.load({"w": np.ones((3, 2))})
