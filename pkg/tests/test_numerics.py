import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitenc.numerics import (
    FORGET_BIAS,
    LstmCellParams,
    LstmState,
    NumericalError,
    OptimizerState,
    affine_forward,
    check_finite,
    clip_by_global_norm,
    finite_difference_gradient,
    lstm_cell_backward,
    lstm_cell_forward,
    max_relative_error,
    sgd_momentum_step,
    softmax,
    softmax_backward,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def reference_cell(W, U, b, x, h, c):
    """Gate-by-gate LSTM written independently of the packed implementation."""
    k = U.shape[1]
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    Wi, Wf, Wg, Wo = (W[n * k:(n + 1) * k] for n in range(4))
    Ui, Uf, Ug, Uo = (U[n * k:(n + 1) * k] for n in range(4))
    bi, bf, bg, bo = (b[n * k:(n + 1) * k] for n in range(4))
    i = sig(Wi @ x + Ui @ h + bi)
    f = sig(Wf @ x + Uf @ h + bf)
    g = np.tanh(Wg @ x + Ug @ h + bg)
    o = sig(Wo @ x + Uo @ h + bo)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


@pytest.fixture
def cell():
    rng = np.random.default_rng(3)
    p = LstmCellParams.init(rng, 2, 3)
    p.b[:] = rng.normal(size=p.b.shape)
    return p, rng


class TestLstmForward:
    def test_init_shapes_and_forget_bias(self):
        p = LstmCellParams.init(np.random.default_rng(0), 5, 4)
        assert p.W.shape == (16, 5) and p.U.shape == (16, 4) and p.b.shape == (16,)
        assert np.all(p.b[4:8] == FORGET_BIAS)
        assert np.all(p.b[:4] == 0) and np.all(p.b[8:] == 0)

    def test_zero_weights_give_zero_hidden(self):
        p = LstmCellParams.zeros(2, 3)
        state, _ = lstm_cell_forward(p, np.array([0.7, -2.0]), LstmState.zeros(1, 3))
        np.testing.assert_array_equal(state.hidden, 0.0)

    def test_zero_fixed_point(self):
        p = LstmCellParams.zeros(2, 3)
        state = LstmState.zeros(1, 3)
        for _ in range(5):
            nxt, _ = lstm_cell_forward(p, np.zeros(2), state)
            np.testing.assert_array_equal(nxt.hidden, state.hidden)
            np.testing.assert_array_equal(nxt.cell, state.cell)
            state = nxt

    def test_matches_reference_cell(self, cell):
        p, rng = cell
        x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
        state, _ = lstm_cell_forward(p, x, LstmState(h, c))
        h_ref, c_ref = reference_cell(p.W, p.U, p.b, x, h, c)
        np.testing.assert_allclose(state.hidden[0], h_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.cell[0], c_ref, rtol=0, atol=1e-12)

    def test_batch_rows_are_independent(self, cell):
        p, rng = cell
        x, h, c = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        batched, _ = lstm_cell_forward(p, x, LstmState(h, c))
        for n in range(4):
            single, _ = lstm_cell_forward(p, x[n], LstmState(h[n], c[n]))
            np.testing.assert_allclose(batched.hidden[n], single.hidden[0], atol=1e-15)

    def test_dimension_mismatch(self, cell):
        p, _ = cell
        with pytest.raises(ValueError):
            lstm_cell_forward(p, np.zeros(3), LstmState.zeros(1, 3))
        with pytest.raises(ValueError):
            lstm_cell_forward(p, np.zeros(2), LstmState.zeros(1, 4))

    def test_non_finite_raises(self, cell):
        p, _ = cell
        with pytest.raises(NumericalError):
            lstm_cell_forward(p, np.array([np.nan, 0.0]), LstmState.zeros(1, 3))

    def test_deterministic(self, cell):
        p, rng = cell
        x = rng.normal(size=(3, 2))
        a, _ = lstm_cell_forward(p, x, LstmState.zeros(3, 3))
        b, _ = lstm_cell_forward(p, x, LstmState.zeros(3, 3))
        assert a.hidden.tobytes() == b.hidden.tobytes()


class TestLstmBackward:
    def test_zero_upstream_gives_zero_gradients(self, cell):
        p, rng = cell
        _, cache = lstm_cell_forward(p, rng.normal(size=(2, 2)), LstmState.zeros(2, 3))
        grads, dx, dprev = lstm_cell_backward(cache, np.zeros((2, 3)), np.zeros((2, 3)))
        for g in [*grads.tensors(), dx, dprev.hidden, dprev.cell]:
            np.testing.assert_array_equal(g, 0.0)

    def test_matches_finite_differences(self, cell):
        p, rng = cell
        x = rng.normal(size=(2, 2))
        h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        rh, rc = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        def loss():
            s, _ = lstm_cell_forward(p, x, LstmState(h0, c0))
            return float(np.sum(s.hidden * rh) + np.sum(s.cell * rc))

        _, cache = lstm_cell_forward(p, x, LstmState(h0, c0))
        grads, dx, dprev = lstm_cell_backward(cache, rh, rc)
        numeric = finite_difference_gradient(loss, [p.W, p.U, p.b, x, h0, c0], 1e-6)
        analytic = [*grads.tensors(), dx, dprev.hidden, dprev.cell]
        assert max_relative_error(analytic, numeric, floor=1e-4) <= 1e-6

    def test_unused_input_slot_has_exactly_zero_gradient(self, cell):
        p, rng = cell
        x = rng.normal(size=(3, 2))
        x[:, 1] = 0.0
        _, cache = lstm_cell_forward(p, x, LstmState.zeros(3, 3))
        grads, _, _ = lstm_cell_backward(cache, rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(grads.W[:, 1], 0.0)

    def test_rejects_foreign_cache(self):
        with pytest.raises(TypeError):
            lstm_cell_backward(object(), np.zeros(3))


class TestAffine:
    def test_identity(self):
        x = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(affine_forward(np.eye(3), x), x)
        np.testing.assert_array_equal(affine_forward(np.eye(3), np.zeros(3), use_tanh=True), 0.0)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(affine_forward(np.array([[1.0, 1.0], [2.0, 0.0]]),
                                                     np.array([1.0, 2.0])), [3.0, 2.0])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            affine_forward(np.eye(2), np.zeros(3))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.full(6, 2.5)), np.full(6, 1 / 6), atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], atol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    def test_large_scores_are_stable(self):
        np.testing.assert_allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    @given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
    def test_probability_vector_and_shift_invariance(self, s, shift):
        p = softmax(s)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(s + shift), p, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        s, r = rng.normal(size=5), rng.normal(size=5)
        numeric = finite_difference_gradient(lambda: float(softmax(s) @ r), [s])
        analytic = softmax_backward(softmax(s), r)
        assert max_relative_error([analytic], numeric, floor=1e-4) <= 1e-6


class TestSgdMomentum:
    def test_zero_gradient_is_a_no_op(self):
        w = np.array([[1.0, -2.0]])
        sgd_momentum_step([w], [np.zeros_like(w)], OptimizerState(0.1, 0.9, 0.0))
        np.testing.assert_array_equal(w, [[1.0, -2.0]])

    def test_hand_arithmetic(self):
        w = np.array([1.0])
        sgd_momentum_step([w], [np.array([1.0])], OptimizerState(0.1, 0.0, 0.0))
        np.testing.assert_allclose(w, [0.9], atol=1e-15)

    def test_momentum_second_step(self):
        w = np.array([0.0])
        opt = OptimizerState(0.1, 0.9, 0.0)
        sgd_momentum_step([w], [np.array([1.0])], opt)
        before = w.copy()
        sgd_momentum_step([w], [np.array([1.0])], opt)
        np.testing.assert_allclose(before - w, [0.19], atol=1e-15)

    def test_weight_decay_only_on_weights(self):
        W, b = np.ones((2, 2)), np.ones(2)
        sgd_momentum_step([W, b], [np.zeros((2, 2)), np.zeros(2)], OptimizerState(0.1, 0.0, 0.5))
        np.testing.assert_allclose(W, 0.9)
        np.testing.assert_array_equal(b, 1.0)

    def test_defaults(self):
        opt = OptimizerState()
        assert (opt.learning_rate, opt.momentum, opt.l2) == (0.0005, 0.9, 0.02)

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite),
           st.floats(1e-4, 1.0))
    def test_plain_gradient_descent_without_momentum(self, w, g, lr):
        expected = w - lr * g
        sgd_momentum_step([w], [g], OptimizerState(lr, 0.0, 0.0))
        assert w.tobytes() == expected.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], OptimizerState())


class TestFiniteDifferences:
    def test_square(self):
        w = np.array([3.0])
        (g,) = finite_difference_gradient(lambda: float(w[0] ** 2), [w])
        assert abs(g[0] - 6.0) <= 1e-6

    def test_constant_and_sum(self):
        a, b = np.ones(3), np.ones((2, 2))
        for g in finite_difference_gradient(lambda: 7.0, [a, b]):
            np.testing.assert_array_equal(g, 0.0)
        for g in finite_difference_gradient(lambda: float(a.sum() + b.sum()), [a, b]):
            np.testing.assert_allclose(g, 1.0, atol=1e-8)

    def test_nondeterministic_loss_is_detected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="deterministic"):
            finite_difference_gradient(lambda: float(rng.normal()), [np.zeros(1)])

    def test_parameters_restored(self):
        w = np.array([1.5, -0.5])
        finite_difference_gradient(lambda: float(np.sum(w ** 3)), [w])
        np.testing.assert_array_equal(w, [1.5, -0.5])


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([[4.0]])]
    assert clip_by_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g[0][0], g[1][0, 0]], [0.6, 0.8])
    small = [np.array([0.1])]
    clip_by_global_norm(small, 1.0)
    np.testing.assert_array_equal(small[0], [0.1])


def test_check_finite():
    check_finite(np.ones(3))
    for bad in (np.inf, -np.inf, np.nan):
        with pytest.raises(NumericalError):
            check_finite(np.array([1.0, bad]))
