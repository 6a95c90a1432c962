import time

import numpy as np
import pytest

from lamina.errors import OrderingError, ShapeError
from lamina.gradcheck import TOLERANCE, check_layer, run_suite
from lamina.layers import BatchNorm1d, Dropout, Identity, Linear, ReLU, Sequential
from lamina.numerics import Rng


class TestForward:
    def test_linear_identity(self):
        lin = Linear(3, 3)
        lin.weight.value = np.eye(3)
        lin.bias.value[:] = 0
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(lin.forward(x), x)

    def test_linear_formula(self):
        rng = np.random.default_rng(1)
        lin = Linear(3, 2, Rng(1))
        lin.bias.value = rng.normal(size=(1, 2))
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(lin.forward(x), x @ lin.weight.value.T + lin.bias.value, atol=1e-14)

    def test_relu(self):
        np.testing.assert_array_equal(ReLU().forward(np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])

    def test_dropout_zero_p_is_identity(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        np.testing.assert_array_equal(Dropout(0.0).forward(x, train=True), x)

    def test_dropout_eval_is_identity(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        np.testing.assert_array_equal(Dropout(0.7).forward(x, train=False), x)

    def test_dropout_keep_fraction(self):
        d = Dropout(0.3, Rng(3))
        out = d.forward(np.ones((1, 100_000)))
        kept = np.mean(out > 0)
        assert abs(kept - 0.7) < 0.01
        np.testing.assert_allclose(out[out > 0], 1 / 0.7)

    def test_dropout_rejects_p_one(self):
        with pytest.raises(ValueError):
            Dropout(1.0)

    def test_linear_shape_error(self):
        with pytest.raises(ShapeError):
            Linear(3, 2).forward(np.ones((2, 4)))

    def test_kaiming_uniform_bounds(self):
        lin = Linear(50, 20, Rng(4))
        assert np.abs(lin.weight.value).max() <= np.sqrt(6 / 50)
        assert not lin.bias.value.any()


class TestBatchNorm:
    def test_train_normalizes(self):
        bn = BatchNorm1d(4)
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(64, 4))
        out = bn.forward(x)
        assert np.abs(out.mean(axis=0)).max() < 1e-9
        assert np.abs(out.var(axis=0) - 1).max() < 1e-6 * 1 + 1e-3  # eps shifts variance by ~eps/var

    def test_train_normalizes_before_affine(self):
        bn = BatchNorm1d(3, eps=0.0)
        x = np.random.default_rng(6).normal(size=(32, 3))
        out = bn.forward(x)
        assert np.abs(out.mean(axis=0)).max() < 1e-9
        assert np.abs(out.var(axis=0) - 1).max() < 1e-6

    def test_running_stats_update(self):
        bn = BatchNorm1d(2, momentum=0.1)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn.forward(x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0, keepdims=True))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1, keepdims=True))

    def test_eval_uses_running_stats_only(self):
        bn = BatchNorm1d(2)
        bn.running_mean = np.array([[1.0, -1.0]])
        bn.running_var = np.array([[4.0, 9.0]])
        x = np.array([[3.0, 2.0]])
        expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(bn.forward(x, train=False), expected)
        np.testing.assert_array_equal(bn.forward(x, train=False), bn.forward(x, train=False))

    def test_record_false_leaves_running_stats(self):
        bn = BatchNorm1d(2)
        bn.forward(np.random.default_rng(7).normal(size=(8, 2)), record=False)
        assert not bn.running_mean.any() and (bn.running_var == 1).all()


class TestBackward:
    def test_zero_upstream(self):
        lin = Linear(3, 2, Rng(0))
        lin.forward(np.ones((4, 3)))
        assert not lin.backward(np.zeros((4, 2))).any()
        assert not lin.weight.grad.any() and not lin.bias.grad.any()

    def test_scalar_chain_rule(self):
        lin = Linear(1, 1)
        lin.weight.value = np.array([[3.0]])
        lin.forward(np.array([[2.0]]))
        assert lin.backward(np.array([[5.0]]))[0, 0] == 15.0

    @pytest.mark.parametrize("layer", [Linear(3, 2), ReLU(), Dropout(0.5), BatchNorm1d(3), Identity(), Sequential(ReLU())])
    def test_backward_before_forward(self, layer):
        with pytest.raises(OrderingError):
            layer.backward(np.ones((2, 2)))

    def test_backward_accumulates(self):
        lin = Linear(2, 2, Rng(1))
        x = np.ones((3, 2))
        g = np.ones((3, 2))
        lin.forward(x)
        lin.backward(g)
        first = lin.weight.grad.copy()
        lin.backward(g)
        np.testing.assert_allclose(lin.weight.grad, 2 * first)

    def test_upstream_shape_checked(self):
        lin = Linear(2, 2)
        lin.forward(np.ones((3, 2)))
        with pytest.raises(ShapeError):
            lin.backward(np.ones((2, 2)))

    def test_sequential_output_grads(self):
        seq = Sequential(Linear(3, 4, Rng(2)), ReLU())
        seq.forward(np.random.default_rng(8).normal(size=(5, 3)))
        g = np.ones((5, 4))
        seq.backward(g)
        np.testing.assert_array_equal(seq.output_grads[1], g)
        np.testing.assert_array_equal(seq.output_grads[0], g * seq[1].derivative())

    @pytest.mark.parametrize(
        "make",
        [
            lambda r: Linear(7, 4, r),
            lambda r: ReLU(),
            lambda r: Dropout(0.4, r),
            lambda r: BatchNorm1d(7),
            lambda r: Sequential(Linear(7, 6, r.split("a")), BatchNorm1d(6), ReLU(), Linear(6, 2, r.split("b"))),
        ],
        ids=["linear", "relu", "dropout", "batchnorm", "sequential"],
    )
    def test_finite_differences_5x7(self, make):
        rng = Rng(9)
        result = check_layer(make(rng), rng.normal(size=(5, 7)), rng)
        assert result.max_error < TOLERANCE


class TestGradcheckSuite:
    def test_suite_passes_quickly(self):
        start = time.perf_counter()
        results = run_suite(seed=0)
        elapsed = time.perf_counter() - start
        shapes_per_kind = {}
        for r in results:
            shapes_per_kind.setdefault(r.name, set()).add(r.shape)
        assert all(r.passed for r in results), [r for r in results if not r.passed]
        assert all(len(s) >= 10 for name, s in shapes_per_kind.items() if name != "BatchNorm1d(eval)")
        assert elapsed < 30

    def test_detects_a_wrong_backward(self):
        class Broken(ReLU):
            def backward(self, grad):
                return 2 * super().backward(grad)

        result = check_layer(Broken(), Rng(0).normal(size=(3, 3)), Rng(1))
        assert not result.passed
