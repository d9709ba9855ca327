import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special as sp

from babn import tensor as T
from babn.special import EULER_GAMMA, DomainError, digamma, lgamma
from babn.tensor import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestSpecialFunctions:
    def test_lgamma_known_values(self):
        assert lgamma(1.0) == pytest.approx(0.0, abs=1e-15)
        assert lgamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-14)
        assert 0.5 * math.log(math.pi) == pytest.approx(0.57236494, abs=1e-8)

    def test_digamma_at_one_is_minus_euler(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-14)
        assert EULER_GAMMA == pytest.approx(0.57721566, abs=1e-8)

    def test_against_scipy(self):
        x = np.geomspace(1e-3, 1e3, 500)
        assert np.max(np.abs(lgamma(x) - sp.gammaln(x)) / np.maximum(1, np.abs(sp.gammaln(x)))) < 1e-13
        assert np.max(np.abs(digamma(x) - sp.digamma(x)) / np.maximum(1, np.abs(sp.digamma(x)))) < 1e-12

    def test_factorials(self):
        for n in range(1, 21):
            assert math.exp(lgamma(float(n))) == pytest.approx(math.factorial(n - 1), rel=1e-13)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            lgamma(np.array([1.0, 0.0]))
        with pytest.raises(DomainError):
            digamma(-1.0)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[5.0, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_inner(self):
        assert (Tensor([[1.0, 2]]) @ Tensor([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_grad_matches_fd(self):
        a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]], atol=1e-12)
        assert T.gradcheck(lambda: (a @ b).sum(), [a, b]) < 1e-8

    def test_batched_broadcast_grad(self, np_rng):
        a = leaf(np_rng.normal(size=(3, 2, 4, 5)))
        b = leaf(np_rng.normal(size=(5, 3)))
        assert T.gradcheck(lambda: ((a @ b) ** 2).sum(), [a, b]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_ratio(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.5, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, xs):
        out = T.softmax(Tensor(xs)).data
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(out >= 0)

    def test_log_softmax_consistent(self, np_rng):
        x = np_rng.normal(size=(4, 6))
        np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), T.softmax(Tensor(x)).data, atol=1e-14)

    def test_grad(self, np_rng):
        x = leaf(np_rng.normal(size=(3, 5)))
        w = np_rng.normal(size=(3, 5))
        assert T.gradcheck(lambda: (T.softmax(x, -1) * w).sum(), [x]) < 1e-6


class TestElementwise:
    def test_softplus_zero(self):
        assert T.softplus(Tensor(0.0)).item() == pytest.approx(0.693147, abs=1e-6)

    def test_softplus_large_inputs_stable(self):
        out = T.softplus(Tensor([-800.0, 800.0])).data
        assert out[0] == 0.0 and out[1] == 800.0

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-2.0, 3.0])).data, [0, 3])

    def test_layer_norm_constant_row(self):
        out = T.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [[0, 0, 0]], atol=1e-12)

    def test_layer_norm_grad(self, np_rng):
        x, g, b = leaf(np_rng.normal(size=(2, 3, 5))), leaf(np_rng.normal(size=5)), leaf(np_rng.normal(size=5))
        w = np_rng.normal(size=(2, 3, 5))
        assert T.gradcheck(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5

    @pytest.mark.parametrize("fn", [
        lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b, lambda a, b: a / (b * b + 1.0),
        lambda a, b: T.exp(a) * b, lambda a, b: T.log(a * a + 1.0) + b, lambda a, b: (a * a + 1.0) ** 1.5 + b,
        lambda a, b: T.softplus(a) * b, lambda a, b: T.logaddexp(a, b), lambda a, b: T.scale(a, 3.0) - b,
        lambda a, b: T.relu(a) * b, lambda a, b: T.lgamma(a * a + 0.5) + b,
    ])
    def test_binary_grads_with_broadcast(self, fn, np_rng):
        a = leaf(np_rng.normal(size=(3, 4)) + 0.05)
        b = leaf(np_rng.normal(size=(4,)))
        assert T.gradcheck(lambda: fn(a, b).sum(), [a, b]) < 1e-5

    def test_reductions_and_reshapes(self, np_rng):
        a = leaf(np_rng.normal(size=(2, 3, 4)))
        w = np_rng.normal(size=(4, 3))
        f = lambda: (T.transpose(a, (0, 2, 1)).reshape(2, 12).sum(0).reshape(4, 3) * w).sum() + a.mean(axis=1).sum()
        assert T.gradcheck(f, [a]) < 1e-6

    def test_concat_and_slice(self, np_rng):
        a, b = leaf(np_rng.normal(size=(2, 3))), leaf(np_rng.normal(size=(2, 2)))
        f = lambda: (T.concat([a, b], axis=1)[:, 1:4] ** 2).sum()
        assert T.gradcheck(f, [a, b]) < 1e-6
        assert T.concat([a, b], axis=1).shape == (2, 5)

    def test_clamp_blocks_gradient_at_bound(self):
        x = leaf([-1.0, 0.5, 2.0])
        T.clamp(x, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 0])

    def test_embedding(self):
        table = leaf(np.arange(12.0).reshape(4, 3))
        out = T.embedding(table, np.array([[0, 2], [2, 3]]))
        np.testing.assert_array_equal(out.data[0, 0], [0, 1, 2])
        out.sum().backward()
        np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 1])
        with pytest.raises(IndexError):
            T.embedding(table, np.array([4]))


class TestBackward:
    def test_lgamma_grad_is_digamma(self):
        x = leaf(3.0)
        T.lgamma(x).backward()
        assert x.grad == pytest.approx(1.5 - EULER_GAMMA, abs=1e-13)

    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2, 4])
        assert T.gradcheck(lambda: (x * x).sum(), [x]) < 1e-6

    def test_cross_entropy(self, np_rng):
        logits = leaf(np_rng.normal(size=(5, 7)))
        y = np_rng.integers(0, 7, 5)
        assert T.gradcheck(lambda: T.cross_entropy(logits, y), [logits]) < 1e-4
        ref = -np.mean(sp.log_softmax(logits.data, axis=1)[np.arange(5), y])
        assert T.cross_entropy(logits, y).item() == pytest.approx(ref, abs=1e-13)

    def test_grad_accumulates_over_shared_nodes(self):
        x = leaf(2.0)
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(8.0)

    def test_nonscalar_root_needs_seed(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(T.ShapeError):
            (x * 2.0).backward()

    def test_no_grad(self):
        x = leaf(1.0)
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert x.grad == 1.0

    def test_check_finite(self):
        with pytest.raises(T.NonFiniteError):
            T.check_finite(Tensor([1.0, np.inf]))
