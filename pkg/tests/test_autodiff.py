"""Tests for the reverse-mode differentiation engine."""

import numpy as np
import pytest
from scipy.special import softmax as np_softmax

from src.core import autodiff as ad
from src.core.autodiff import Tape, Tensor, backward, grad_check


def _check(f, point):
    report = grad_check(f, point)
    assert report.passed, f"max abs error {report.max_abs_error:.3e}"
    return report


class TestPrimitives:

    def test_arithmetic(self, rng):
        _check(lambda x: ad.tsum(x * x / (x + 3.0) - 2.0 * x), rng.uniform(0.5, 2.0, size=5))

    def test_unary(self, rng):
        point = rng.uniform(0.2, 1.5, size=6)
        _check(lambda x: ad.tsum(ad.exp(x) + ad.log(x) + ad.sqrt(x)), point)
        _check(lambda x: ad.tsum(ad.sigmoid(x) * ad.tanh(x) + ad.atan(x)), point)
        _check(lambda x: ad.tsum(x ** 3.0), point)

    def test_matmul_shapes(self, rng):
        b = rng.standard_normal((3, 2))
        v = rng.standard_normal(3)
        _check(lambda x: ad.tsum(x.reshape(2, 3) @ b), rng.standard_normal(6))
        _check(lambda x: ad.tsum(x @ b), rng.standard_normal(3))
        _check(lambda x: ad.tsum(x.reshape(2, 3) @ v), rng.standard_normal(6))
        _check(lambda x: x @ v, rng.standard_normal(3))

    def test_reductions_and_softmax(self, rng):
        w = rng.standard_normal((4, 3))
        _check(lambda x: ad.tsum(ad.softmax(x.reshape(4, 3), axis=1) * w), rng.standard_normal(12))
        _check(lambda x: ad.tsum(ad.logsumexp(x.reshape(4, 3), axis=1)), rng.standard_normal(12))
        _check(lambda x: ad.mean(x.reshape(4, 3), axis=0).sum(), rng.standard_normal(12))

    def test_gather_and_concat(self, rng):
        idx = np.array([0, 2, 2, 4])
        _check(lambda x: ad.tsum(x[idx] * x[idx]), rng.standard_normal(5))
        _check(lambda x: ad.tsum(ad.concat([x, x * 2.0]) ** 2.0), rng.standard_normal(3))

    def test_softmax_matches_scipy(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(ad.softmax(Tensor(x), axis=1).data, np_softmax(x, axis=1))


class TestBackward:

    def test_broadcast_gradients(self):
        a = Tensor(np.ones((3, 1)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        with Tape() as tape:
            out = ad.tsum(a * b)
        backward(out, tape)
        np.testing.assert_allclose(a.grad, np.full((3, 1), 4.0))
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    def test_leaf_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                y = ad.tsum(x * x)
            backward(y, tape)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_backward_without_tape(self):
        x = Tensor([3.0], requires_grad=True)
        y = ad.tsum(x * x + x)
        backward(y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_tape_records_in_creation_order(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            a = x * 2.0
            b = ad.exp(a)
        assert tape.nodes[0] is a and tape.nodes[-1] is b
        assert ad.current_tape() is None

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            Tensor([1.0]) + 2.0
        assert len(tape) == 0

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_log_clamp(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(ad.log(x))
        backward(y, tape)
        assert np.isfinite(y.item())
        np.testing.assert_allclose(x.grad, [0.0, 1.0])

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(x * ad.detach(x))
        backward(y, tape)
        np.testing.assert_allclose(x.grad, [2.0])


class TestErrors:

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="Shape mismatch"):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(ValueError, match="Shape mismatch"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_grad_check_detects_wrong_gradient(self):
        def wrong(x):
            # forward is x^2 but the backward rule pretends it is x
            return ad.tsum(ad._node(x.data ** 2, (x,), lambda g: (g,), "bad"))
        assert not grad_check(wrong, np.array([1.0, 2.0])).passed
