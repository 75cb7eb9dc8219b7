# tests/test_autograd.py
from __future__ import annotations

import numpy as np
import pytest

from t3d.autograd import NodeGraph, Evaluation, backward, finite_diff_check, finite_diff_report
from t3d.common import ContractError


def _x(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 1, 1, -1)


class TestBackward:
    def test_relu_subgradient(self):
        g = NodeGraph()
        x = g.leaf(_x([-1.0, 2.0]), requires_grad=True)
        backward(g, g.sum(g.relu(x)))
        np.testing.assert_array_equal(g.grad(x).reshape(-1), [0.0, 1.0])

    def test_concat_passes_ones(self, rng):
        g = NodeGraph()
        a = g.leaf(rng.standard_normal((2, 3, 1, 2, 2)), requires_grad=True)
        b = g.leaf(rng.standard_normal((2, 1, 1, 2, 2)), requires_grad=True)
        backward(g, g.sum(g.concat([a, b])))
        np.testing.assert_array_equal(g.grad(a), np.ones((2, 3, 1, 2, 2)))
        np.testing.assert_array_equal(g.grad(b), np.ones((2, 1, 1, 2, 2)))

    def test_two_consumers_accumulate(self, rng):
        g = NodeGraph()
        x = g.leaf(rng.standard_normal((1, 2, 1, 2, 2)), requires_grad=True)
        y = g.add(g.relu(x), g.relu(x))
        backward(g, g.sum(y))
        np.testing.assert_array_equal(g.grad(x), 2.0 * (x.value > 0))

    def test_grad_shapes_match_values(self, rng):
        g = NodeGraph()
        x = g.leaf(rng.standard_normal((2, 2, 3, 4, 4)), requires_grad=True)
        w = g.leaf(rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True)
        y = g.pool3d(g.relu(g.conv3d(x, w, padding=1)), "max", 2, 2)
        backward(g, g.sum(y))
        for node in g.nodes:
            if node.index in g.grads:
                assert g.grads[node.index].shape == node.value.shape

    def test_non_scalar_root(self):
        g = NodeGraph()
        x = g.leaf(_x([1.0, 2.0]), requires_grad=True)
        with pytest.raises(ContractError):
            backward(g, g.relu(x))

    def test_single_pass(self):
        g = NodeGraph()
        root = g.sum(g.leaf(_x([1.0]), requires_grad=True))
        backward(g, root)
        with pytest.raises(ContractError):
            backward(g, root)

    def test_foreign_node(self):
        other = NodeGraph().leaf(_x([1.0]))
        g = NodeGraph()
        g.leaf(_x([2.0]))
        with pytest.raises(ContractError):
            g.relu(other)

    def test_deterministic(self, rng):
        x0 = rng.standard_normal((2, 2, 2, 3, 3))
        w0 = rng.standard_normal((2, 2, 1, 3, 3))

        def run():
            g = NodeGraph()
            x = g.leaf(x0, requires_grad=True)
            w = g.leaf(w0, requires_grad=True)
            backward(g, g.sum(g.relu(g.conv3d(x, w, padding=(0, 1, 1)))))
            return g.grad(w)

        np.testing.assert_array_equal(run(), run())

    def test_cross_entropy_gradient(self):
        g = NodeGraph()
        logits = g.leaf(np.zeros((2, 4)), requires_grad=True)
        backward(g, g.softmax_cross_entropy(logits, np.asarray([1, 3])))
        expected = np.full((2, 4), 0.25)
        expected[0, 1] -= 1.0
        expected[1, 3] -= 1.0
        np.testing.assert_allclose(g.grad(logits), expected / 2.0)


class TestFiniteDiff:
    def test_quadratic(self, rng):
        p = rng.uniform(0.5, 1.5, size=(1, 2, 2, 2, 2))
        err = finite_diff_check(lambda q: Evaluation(float((q**2).sum()), 2.0 * q), p)
        assert err < 1e-8

    def test_wrong_gradient_detected(self, rng):
        p = rng.standard_normal((1, 1, 1, 2, 2))
        assert finite_diff_check(lambda q: Evaluation(float((q**2).sum()), q), p) > 0.4

    def test_nan_propagates(self):
        p = np.ones((1, 1, 1, 1, 2))
        res = finite_diff_report(lambda q: Evaluation(float("nan"), np.zeros_like(q)), p)
        assert np.isnan(res.max_error)

    def test_restores_parameter(self, rng):
        p = rng.standard_normal((1, 1, 1, 3, 3))
        before = p.copy()
        finite_diff_check(lambda q: Evaluation(float(q.sum()), np.ones_like(q)), p)
        np.testing.assert_array_equal(p, before)

    def test_non_contiguous_parameter(self, rng):
        p = rng.uniform(0.5, 1.5, size=(1, 1, 2, 3, 4)).transpose(0, 1, 4, 3, 2)
        assert not p.flags["C_CONTIGUOUS"]
        before = p.copy()
        err = finite_diff_check(lambda q: Evaluation(float((q**2).sum()), 2.0 * q), p)
        assert err < 1e-8
        np.testing.assert_array_equal(p, before)

    def test_extrapolation_cancels_truncation(self, rng):
        p = rng.uniform(0.5, 1.5, size=(1, 1, 1, 2, 3))

        def f(q):
            return Evaluation(float((q**3).sum()), 3.0 * q**2)

        plain = finite_diff_report(f, p, step=1e-2)
        extrapolated = finite_diff_report(f, p, step=1e-2, extrapolate=True)
        assert plain.max_error > 1e-5
        assert extrapolated.max_error < 1e-9
        assert extrapolated.checked == p.size

    def test_conv_weight_gradient(self, rng):
        x = rng.standard_normal((1, 2, 3, 5, 5))
        w = rng.standard_normal((3, 2, 2, 3, 3))
        proj = rng.standard_normal((1, 3, 2, 3, 3))

        def f(q):
            g = NodeGraph()
            wn = g.leaf(q, requires_grad=True)
            loss = g.weighted_sum(g.conv3d(g.leaf(x), wn), proj)
            backward(g, loss)
            return Evaluation(float(loss.value.reshape(-1)[0]), g.grad(wn))

        assert finite_diff_check(f, w) < 1e-6

    def test_max_pool_tie_is_skipped(self):
        p = np.asarray([3.0, 3.0, 0.0, 1.0]).reshape(1, 1, 1, 2, 2)

        def f(q):
            g = NodeGraph()
            x = g.leaf(q, requires_grad=True)
            loss = g.sum(g.pool3d(x, "max", (1, 2, 2), 1))
            backward(g, loss)
            return Evaluation(float(loss.value.reshape(-1)[0]), g.grad(x), g.activation_pattern())

        res = finite_diff_report(f, p)
        # the two tied elements each flip the winner in one direction
        assert res.skipped == 2
        assert res.max_error < 1e-8
