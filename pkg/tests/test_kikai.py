import copy

import numpy as np
import pytest

from lamina.errors import OrderingError, ShapeError, SingularMatrixError
from lamina.kaku import IO, Criterion, OptimFactory, State
from lamina.kikai import (
    DFALearner,
    FALearner,
    GradLearner,
    LeastSquaresLearner,
    StackedLearner,
    TargetPropLearner,
    dfa_accumulate,
    fa_accumulate,
    grad_step_x,
    least_squares_step_x,
    target_prop_step_x,
)
from lamina.layers import BatchNorm1d, Identity, Linear, ReLU, Sequential
from lamina.numerics import Rng, softmax_cross_entropy

SGD = OptimFactory("sgd", 0.05)


def _forwarded(learner, x):
    state = State()
    x = IO(x)
    learner.forward(x, state)
    return x, state


class TestGradStepX:
    def test_zero_gradient_returns_x(self):
        learner = GradLearner(Linear(3, 2, Rng(0)), Criterion.sse(), SGD)
        x = np.random.default_rng(0).normal(size=(4, 3))
        xi, state = _forwarded(learner, x)
        t = IO(state[learner, xi, "y"].f.copy())
        np.testing.assert_array_equal(grad_step_x(learner, xi, t, state).f, x)

    def test_scalar_chain(self):
        lin = Linear(1, 1, bias=False)
        lin.weight.value = np.array([[2.0]])
        learner = GradLearner(lin, Criterion.sse(), SGD)
        xi, state = _forwarded(learner, np.array([[1.0]]))
        assert learner.step_x(xi, IO(np.array([[0.0]])), state).f[0, 0] == -3.0

    def test_round_trip_reproduces_upstream_gradient(self):
        # the SSE(0.5) gradient toward t = y - g at y is g itself
        rng = np.random.default_rng(1)
        y = rng.normal(size=(5, 4))
        g = rng.normal(size=(5, 4))
        np.testing.assert_allclose(Criterion.sse().grad(y, y - g), g, atol=1e-10)

    def test_shape_preserved(self):
        learner = GradLearner(Sequential(Linear(6, 3, Rng(2)), ReLU()), Criterion.sse(), SGD)
        xi, state = _forwarded(learner, np.ones((4, 6)))
        assert learner.step_x(xi, IO(np.zeros((4, 3))), state).f.shape == (4, 6)

    def test_missing_forward(self):
        learner = GradLearner(Linear(3, 2, Rng(0)), Criterion.sse(), SGD)
        with pytest.raises(Exception) as info:
            learner.step_x(IO(np.ones((2, 3))), IO(np.zeros((2, 2))), State())
        assert isinstance(info.value, (OrderingError, KeyError))

    def test_iterated_descent_leaves_module_alone(self):
        learner = GradLearner(
            Sequential(BatchNorm1d(3), Linear(3, 2, Rng(3))),
            Criterion("cross_entropy"),
            SGD,
            x_step=0.1,
            x_iterations=40,
        )
        x = np.random.default_rng(3).normal(size=(8, 3))
        xi, state = _forwarded(learner, x)
        t = IO(np.arange(8) % 2)
        snapshot = copy.deepcopy(learner.module)
        target = learner.step_x(xi, t, state).f
        np.testing.assert_array_equal(learner.module[1].weight.value, snapshot[1].weight.value)
        np.testing.assert_array_equal(learner.module[0].running_mean, snapshot[0].running_mean)
        before = Criterion("cross_entropy")(snapshot.forward(x, record=False), t.f)
        after = Criterion("cross_entropy")(snapshot.forward(target, record=False), t.f)
        assert after < before


class TestLeastSquaresStepX:
    def test_zero_residual(self):
        lin = Linear(4, 3, Rng(0))
        x = np.random.default_rng(0).normal(size=(5, 4))
        t = lin.forward(x, record=False)
        np.testing.assert_allclose(least_squares_step_x(lin, x, t, 1e-3), x, atol=1e-14)

    def test_orthonormal_exact(self):
        q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(4, 4)))
        lin = Linear(4, 4)
        lin.weight.value = q
        lin.bias.value = np.full((1, 4), 0.3)
        rng = np.random.default_rng(2)
        x, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = least_squares_step_x(lin, x, t, 0.0)
        np.testing.assert_allclose(lin.forward(out, record=False), t, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_normal_equations_and_reduction(self, seed):
        rng = np.random.default_rng(seed)
        lin = Linear(5, 8, Rng(seed))
        lin.bias.value = rng.normal(size=(1, 8))
        x, t = rng.normal(size=(6, 5)), rng.normal(size=(6, 8))
        w = lin.weight.value
        y = x @ w.T + lin.bias.value
        oracle = x + (t - y) @ w @ np.linalg.inv(w.T @ w + 0.1 * np.eye(5))
        out = least_squares_step_x(lin, x, t, 0.1)
        np.testing.assert_allclose(out, oracle, atol=1e-9)
        y_new = out @ w.T + lin.bias.value
        assert np.sum((y_new - t) ** 2) < np.sum((y - t) ** 2)

    def test_change_lies_in_row_space(self):
        rng = np.random.default_rng(4)
        lin = Linear(6, 2, Rng(4))
        x, t = rng.normal(size=(3, 6)), rng.normal(size=(3, 2))
        dx = least_squares_step_x(lin, x, t, 0.01) - x
        w = lin.weight.value
        projector = w.T @ np.linalg.pinv(w.T)
        np.testing.assert_allclose(dx @ projector.T, dx, atol=1e-10)

    def test_singular(self):
        lin = Linear(4, 2, Rng(0))
        lin.weight.value[:, 0] = 0.0
        with pytest.raises(SingularMatrixError):
            least_squares_step_x(lin, np.ones((2, 4)), np.zeros((2, 2)), 0.0)

    def test_learner_uses_gradient_target_at_linear_output(self):
        module = Sequential(Linear(4, 3, Rng(5)), BatchNorm1d(3), ReLU())
        learner = LeastSquaresLearner(module, Criterion.sse(), SGD, lam=1e-3)
        x = np.random.default_rng(5).normal(size=(6, 4))
        xi, state = _forwarded(learner, x)
        t = IO(np.random.default_rng(6).normal(size=(6, 3)))
        out = learner.step_x(xi, t, state).f
        z = module[0].forward(x, record=False)
        expected = least_squares_step_x(module[0], x, z - module.output_grads[0], 1e-3)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_needs_linear_first(self):
        with pytest.raises(TypeError):
            LeastSquaresLearner(Sequential(ReLU()), Criterion.sse())


def _tp(n=4, seed=0, reverse=None, lr=1e-2):
    rng = Rng(seed)
    return TargetPropLearner(
        Sequential(Linear(n, n, rng.split("f"))),
        reverse if reverse is not None else Sequential(Linear(n, n, rng.split("r"))),
        optim=OptimFactory("adam", lr),
        reverse_optim=OptimFactory("adam", lr),
    )


def _params(module):
    return [p.value.copy() for p in module.parameters()]


class TestTargetProp:
    def test_identity_reverse(self):
        tp = _tp(reverse=Sequential(Identity()))
        t = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(target_prop_step_x(tp, IO(t)).f, t)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            target_prop_step_x(_tp(), IO(np.ones((2, 5))))

    def test_step_x_deterministic_and_pure(self):
        tp = _tp()
        t = IO(np.random.default_rng(1).normal(size=(3, 4)))
        before = _params(tp.reverse_module) + _params(tp.forward_module)
        a = tp.step_x(None, t, State()).f
        b = tp.step_x(None, t, State()).f
        np.testing.assert_array_equal(a, b)
        for p, q in zip(before, _params(tp.reverse_module) + _params(tp.forward_module)):
            np.testing.assert_array_equal(p, q)

    def _tick(self, tp, x, t, epoch):
        state = State()
        xi = IO(x)
        y = tp.forward(xi, state)
        tp.train_tick(xi, y, IO(t), state, epoch)

    def test_epoch_parity_selects_model(self):
        tp = _tp()
        rng = np.random.default_rng(2)
        x, t = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        f0, r0 = _params(tp.forward_module), _params(tp.reverse_module)
        self._tick(tp, x, t, epoch=1)
        assert all(np.array_equal(a, b) for a, b in zip(f0, _params(tp.forward_module)))
        assert not all(np.array_equal(a, b) for a, b in zip(r0, _params(tp.reverse_module)))
        r1 = _params(tp.reverse_module)
        self._tick(tp, x, t, epoch=2)
        assert not all(np.array_equal(a, b) for a, b in zip(f0, _params(tp.forward_module)))
        assert all(np.array_equal(a, b) for a, b in zip(r1, _params(tp.reverse_module)))

    def test_reverse_loss_decreases(self):
        drops = []
        for seed in range(5):
            tp = _tp(seed=seed, lr=1e-2)
            rng = np.random.default_rng(seed)
            losses = []
            for _ in range(200):
                x = rng.normal(size=(16, 4))
                y = tp.forward_module.infer(x)
                losses.append(Criterion("mse")(tp.reverse_module.infer(y), x))
                self._tick(tp, x, x, epoch=1)
            drops.append(np.mean(losses[-20:]) < np.mean(losses[:20]))
        assert sorted(drops)[2]

    def test_reverse_converges_to_inverse(self):
        tp = _tp(seed=3, lr=1e-2)
        w = np.array([[2.0, 0.5, 0, 0], [0, 1.5, 0.3, 0], [0.2, 0, 1.0, 0], [0, 0, 0.4, 1.2]])
        b = np.array([[0.1, -0.2, 0.3, 0.0]])
        tp.forward_module[0].weight.value = w
        tp.forward_module[0].bias.value = b
        rng = np.random.default_rng(3)
        for _ in range(3000):
            self._tick(tp, rng.normal(size=(32, 4)), np.zeros((32, 4)), epoch=1)
        t = rng.normal(size=(10, 4))
        oracle = (t - b) @ np.linalg.inv(w).T
        assert np.abs(target_prop_step_x(tp, IO(t)).f - oracle).max() < 1e-2


class TestFeedbackAlignment:
    def _pair(self, seed=0):
        rng = Rng(seed)
        hidden = FALearner(Sequential(Linear(5, 4, rng.split("a")), ReLU()), Criterion.sse(), SGD, rng.split("b1"))
        out = FALearner(Sequential(Linear(4, 3, rng.split("c"))), Criterion("cross_entropy"), SGD, rng.split("b2"))
        return hidden, out

    def test_zero_delta(self):
        hidden, out = self._pair()
        xi, _ = _forwarded(hidden, np.random.default_rng(0).normal(size=(6, 5)))
        fa_accumulate(hidden, xi, np.zeros((6, 3)), out.B)
        assert not hidden.module[0].weight.grad.any()

    def test_dead_relu(self):
        hidden, out = self._pair()
        hidden.module[0].bias.value[:] = -1e6
        xi, _ = _forwarded(hidden, np.random.default_rng(1).normal(size=(6, 5)))
        fa_accumulate(hidden, xi, np.ones((6, 3)), out.B)
        assert not hidden.module[0].weight.grad.any()

    def test_hand_evaluated_2x2(self):
        lin = Linear(2, 2)
        lin.weight.value = np.array([[1.0, -1.0], [0.5, 2.0]])
        lin.bias.value = np.zeros((1, 2))
        hidden = FALearner(Sequential(lin, ReLU()), Criterion.sse(), SGD)
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        xi, _ = _forwarded(hidden, x)
        B = np.array([[2.0, 1.0], [-1.0, 3.0]])
        delta = np.array([[0.5, -1.0], [1.0, 0.25]])
        # z = x W^T: row0 = [-1, 4.5], row1 = [4, -0.5]; phi' = [[0,1],[1,0]]
        # delta B = [[2, -2.5], [1.75, 1.75]] -> masked [[0, -2.5], [1.75, 0]]
        # dW = masked^T x = [[5.25, -1.75], [-2.5, -5]]
        fa_accumulate(hidden, xi, delta, B)
        np.testing.assert_allclose(lin.weight.grad, [[5.25, -1.75], [-2.5, -5.0]], atol=1e-14)
        np.testing.assert_allclose(lin.bias.grad, [[1.75, -2.5]], atol=1e-14)

    def test_b_is_fixed_across_training(self):
        hidden, out = self._pair()
        stack = StackedLearner([hidden, out])
        b1, b2 = hidden.B.copy(), out.B.copy()
        rng = np.random.default_rng(2)
        for _ in range(10):
            stack.train_step(rng.normal(size=(8, 5)), rng.integers(0, 3, 8))
        assert np.array_equal(hidden.B, b1) and np.array_equal(out.B, b2)
        with pytest.raises(ValueError):
            out.B[0, 0] = 1.0

    def test_step_x_uses_b(self):
        hidden, out = self._pair()
        xi, state = _forwarded(out, np.random.default_rng(3).normal(size=(4, 4)))
        t = IO(np.array([0, 1, 2, 0]))
        target = out.step_x(xi, t, state).f
        _, g = softmax_cross_entropy(state[out, xi, "y"].f, t.f)
        np.testing.assert_allclose(target, xi.f - g @ out.B, atol=1e-14)


class TestDirectFeedbackAlignment:
    def _stack(self, seed=0, hidden=6):
        rng = Rng(seed)
        dfa = DFALearner(Sequential(Linear(5, hidden, rng.split("a")), ReLU()), 3, SGD, rng.split("b"))
        out = FALearner(Sequential(Linear(hidden, 3, rng.split("c"))), Criterion("cross_entropy"), SGD, rng.split("d"))
        return dfa, out, StackedLearner([dfa, out], propagation="direct")

    def test_b_shape(self):
        dfa, _, _ = self._stack(hidden=7)
        assert dfa.B.shape == (7, 3)

    def test_zero_error(self):
        dfa, _, _ = self._stack()
        xi, _ = _forwarded(dfa, np.ones((4, 5)))
        dfa_accumulate(dfa, xi, np.zeros((4, 3)))
        assert not dfa.module[0].weight.grad.any()

    def test_wrong_width(self):
        dfa, _, _ = self._stack()
        xi, _ = _forwarded(dfa, np.ones((4, 5)))
        with pytest.raises(ShapeError):
            dfa_accumulate(dfa, xi, np.zeros((4, 2)))

    @pytest.mark.parametrize("seed", range(3))
    def test_true_weights_match_backprop(self, seed):
        dfa, out, stack = self._stack(seed)
        w2 = out.module[0].weight.value
        dfa.B = w2.T.copy()
        rng = np.random.default_rng(seed)
        x, labels = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)

        mono = copy.deepcopy(Sequential(dfa.module[0], dfa.module[1], out.module[0]))
        y = mono.forward(x)
        _, g = softmax_cross_entropy(y, labels)
        mono.backward(g)
        expected = [p.value - 0.05 * p.grad for p in mono.parameters()]

        stack.train_step(x, labels)
        got = [p.value for p in dfa.module.parameters() + out.module.parameters()]
        for e, a in zip(expected, got):
            np.testing.assert_allclose(a, e, atol=1e-10)

    def test_every_layer_sees_same_error(self):
        rng = Rng(4)
        l1 = DFALearner(Sequential(Linear(5, 4, rng.split("a")), ReLU()), 3, SGD, rng.split("b"))
        l2 = DFALearner(Sequential(Linear(4, 4, rng.split("c")), ReLU()), 3, SGD, rng.split("d"))
        out = FALearner(Sequential(Linear(4, 3, rng.split("e"))), Criterion("cross_entropy"), SGD, rng.split("f"))
        stack = StackedLearner([l1, l2, out], propagation="direct")
        x = IO(np.random.default_rng(4).normal(size=(6, 5)))
        t = IO(np.arange(6) % 3)
        state = State()
        stack.forward(x, state)
        stack.step(x, t, state)
        _, g = softmax_cross_entropy(state[stack, x, "y"].f, t.f)
        for layer, key in ((l1, "x0"), (l2, "x1")):
            xi = state[stack, x, key]
            np.testing.assert_allclose(layer.module.output_grads[-1], g @ layer.B.T, atol=1e-14)
            assert state.has(layer, xi, "stepped")
        assert stack.step_x_calls == 0

    def test_assess_not_defined(self):
        dfa, _, _ = self._stack()
        with pytest.raises(NotImplementedError):
            dfa.assess_y(IO(np.ones((1, 6))), IO(np.ones((1, 6))))


def _grad_stack(seed, optim=SGD, order="step_x_first"):
    rng = Rng(seed)
    return StackedLearner(
        [
            GradLearner(Sequential(Linear(6, 5, rng.split("a")), ReLU(), BatchNorm1d(5)), Criterion.sse(), optim),
            GradLearner(Sequential(Linear(5, 4, rng.split("b")), ReLU()), Criterion.sse(), optim),
            GradLearner(Sequential(Linear(4, 3, rng.split("c"))), Criterion("cross_entropy"), optim),
        ],
        step_order=order,
    )


def backprop_equivalence_error(seed):
    """Largest parameter difference between a stacked step and monolithic backprop."""
    stack = _grad_stack(seed)
    mono = copy.deepcopy(Sequential([m for layer in stack.layers for m in layer.module.layers]))
    rng = np.random.default_rng(seed)
    x, labels = rng.normal(size=(10, 6)), rng.integers(0, 3, 10)
    y = mono.forward(x)
    _, g = softmax_cross_entropy(y, labels)
    mono.backward(g)
    expected = [p.value - 0.05 * p.grad for p in mono.parameters()]
    stack.train_step(x, labels)
    got = [p for layer in stack.layers for p in layer.module.parameters()]
    return max(np.abs(e - p.value).max() for e, p in zip(expected, got))


class TestStackedLearner:
    @pytest.mark.parametrize("seed", range(20))
    def test_backprop_equivalence(self, seed):
        assert backprop_equivalence_error(seed) < 1e-8

    def test_step_first_matches_too(self):
        a, b = _grad_stack(1), _grad_stack(1, order="step_first")
        rng = np.random.default_rng(1)
        x, labels = rng.normal(size=(10, 6)), rng.integers(0, 3, 10)
        a.train_step(x, labels)
        b.train_step(x, labels)
        for la, lb in zip(a.layers, b.layers):
            for p, q in zip(la.module.parameters(), lb.module.parameters()):
                np.testing.assert_allclose(p.value, q.value, atol=1e-14)

    def test_single_layer_is_plain_gradient_step(self):
        lin = Linear(4, 3, Rng(0))
        ref = copy.deepcopy(lin)
        stack = StackedLearner([GradLearner(Sequential(lin), Criterion("cross_entropy"), SGD)])
        rng = np.random.default_rng(0)
        x, labels = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
        _, g = softmax_cross_entropy(ref.forward(x), labels)
        ref.backward(g)
        stack.train_step(x, labels)
        np.testing.assert_allclose(lin.weight.value, ref.weight.value - 0.05 * ref.weight.grad, atol=1e-12)

    def test_step_x_call_count(self):
        stack = _grad_stack(2)
        rng = np.random.default_rng(2)
        for _ in range(3):
            stack.train_step(rng.normal(size=(6, 6)), rng.integers(0, 3, 6))
        assert stack.step_x_calls == 3 * (len(stack.layers) - 1)

    def test_targets_are_successor_step_x(self):
        stack = _grad_stack(3)
        calls = []
        for i, layer in enumerate(stack.layers):
            original = layer.step_x
            layer.step_x = lambda x, t, state, _o=original, _i=i: calls.append((_i, _o(x, t, state))) or calls[-1][1]
        x, t = IO(np.random.default_rng(3).normal(size=(6, 6))), IO(np.arange(6) % 3)
        state = State()
        stack.forward(x, state)
        stack.step(x, t, state)
        produced = dict(calls)
        assert state[stack, x, "t1"] is produced[2]
        assert state[stack, x, "t0"] is produced[1]
        assert state[stack, x, "t2"] is t

    def test_step_x_needs_step(self):
        stack = _grad_stack(4)
        x = IO(np.ones((3, 6)))
        state = State()
        stack.forward(x, state)
        with pytest.raises(OrderingError):
            stack.step_x(x, IO(np.arange(3) % 3), state)

    def test_dfa_step_x_needs_step(self):
        dfa = DFALearner(Sequential(Linear(3, 2, Rng(0)), ReLU()), 2, SGD)
        x = IO(np.ones((2, 3)))
        state = State()
        dfa.forward(x, state)
        with pytest.raises(OrderingError):
            dfa.step_x(x, IO(np.zeros((2, 2))), state)

    def test_stale_forward_rejected(self):
        learner = GradLearner(Linear(3, 2, Rng(0)), Criterion.sse(), SGD)
        state = State()
        a, b = IO(np.ones((2, 3))), IO(np.zeros((2, 3)))
        learner.forward(a, state)
        learner.forward(b, state)
        with pytest.raises(OrderingError):
            learner.step(a, IO(np.zeros((2, 2))), state)
