"""
Tests for fleet_tensor: ops, reverse-mode gradients, finite-difference oracle.

All gradient checks run in float64.
"""

import numpy as np
import pytest

from fleet_errors import ContractError, DimensionError
from fleet_tensor import (
    Tensor,
    backward,
    concat,
    count_multiplies,
    finite_diff_grad,
    fold,
    grad_check,
    layer_norm,
    matmul,
    mse,
    mul,
    no_grad,
    reduce_sum,
    sigmoid,
    softmax_lastdim,
    take_slice,
)


def _t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ============================================================================
# matmul
# ============================================================================


class TestMatmul:
    """Matrix product, shape checks and gradients."""

    def test_identity(self, rng):
        """I @ A == A."""
        A = rng.normal(size=(3, 4))
        out = matmul(_t(np.eye(3), False), _t(A, False))
        np.testing.assert_allclose(out.data, A)

    def test_hand_arithmetic(self):
        """[[1,2],[3,4]] @ [[1],[1]] == [[3],[7]]."""
        out = matmul(_t([[1.0, 2.0], [3.0, 4.0]], False), _t([[1.0], [1.0]], False))
        np.testing.assert_allclose(out.data, [[3.0], [7.0]])

    def test_inner_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(_t(np.ones((2, 3))), _t(np.ones((4, 2))))

    def test_gradient_matches_finite_differences(self, rng):
        """Random 4x5 @ 5x3 against central differences."""
        a = _t(rng.normal(size=(4, 5)))
        b = _t(rng.normal(size=(5, 3)))
        r = _t(rng.normal(size=(4, 3)), False)
        errors = grad_check(lambda: reduce_sum(mul(matmul(a, b), r)), [a, b])
        assert max(errors) <= 1e-6

    def test_multiply_count(self):
        """[2,3] @ [3,4] performs 24 scalar multiplies."""
        with count_multiplies() as counter:
            matmul(_t(np.ones((2, 3)), False), _t(np.ones((3, 4)), False))
        assert counter.total == 24


# ============================================================================
# softmax / layer_norm / misc ops
# ============================================================================


class TestSoftmax:
    """Numerically stable softmax over the last axis."""

    def test_uniform(self):
        out = softmax_lastdim(_t([0.0, 0.0, 0.0, 0.0], False))
        np.testing.assert_allclose(out.data, [0.25] * 4)

    def test_large_logits_do_not_overflow(self):
        out = softmax_lastdim(_t([1000.0, 0.0], False))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_of_huge_logits_sum_to_one(self, rng):
        out = softmax_lastdim(_t(rng.uniform(-1e3, 1e3, size=(3, 5, 9)), False))
        assert np.all(np.isfinite(out.data))
        assert np.all(out.data >= 0.0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_rows_sum_to_one_and_gradient(self, rng):
        x = _t(rng.normal(size=(2, 7)))
        np.testing.assert_allclose(softmax_lastdim(x).data.sum(axis=-1), 1.0, atol=1e-9)
        w = _t(rng.normal(size=(2, 7)), False)
        errors = grad_check(lambda: reduce_sum(mul(softmax_lastdim(x), w)), [x])
        assert errors[0] <= 1e-6


class TestLayerNorm:
    """Population-variance normalization over the last axis."""

    def test_hand_computed(self):
        out = layer_norm(_t([1.0, 2.0, 3.0], False), _t(np.ones(3), False), _t(np.zeros(3), False))
        np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)

    def test_constant_input_gives_zeros(self):
        out = layer_norm(_t(np.full(5, 4.2), False), _t(np.ones(5), False), _t(np.zeros(5), False))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_moments(self, rng):
        out = layer_norm(_t(rng.normal(size=(4, 8)), False), _t(np.ones(8), False), _t(np.zeros(8), False))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_gradient(self, rng):
        x = _t(rng.normal(size=(3, 8)))
        g = _t(rng.normal(size=8))
        b = _t(rng.normal(size=8))
        w = _t(rng.normal(size=(3, 8)), False)
        errors = grad_check(lambda: reduce_sum(mul(layer_norm(x, g, b), w)), [x, g, b])
        assert max(errors) <= 1e-6


class TestElementwise:
    """mse, sigmoid, concat, fold."""

    def test_mse_of_identical_inputs(self, rng):
        x = rng.normal(size=(3, 4))
        assert mse(_t(x), _t(x)).item() == 0.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(_t(np.ones(3)), _t(np.ones(4)))

    def test_sigmoid_at_zero(self):
        assert sigmoid(_t(0.0, False)).item() == 0.5

    def test_concat_shape(self):
        out = concat([_t(np.ones((2, 3)), False), _t(np.zeros((2, 5)), False)], axis=1)
        assert out.shape == (2, 8)

    def test_fold_without_overlap_is_reshape(self):
        x = np.arange(12, dtype=np.float64).reshape(3, 4)
        out = fold(_t(x, False), stride=4)
        np.testing.assert_allclose(out.data, np.arange(12))

    def test_fold_averages_overlaps(self):
        """Two patches of 4 at stride 2: the middle two samples are averaged."""
        x = np.array([[1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0]])
        out = fold(_t(x, False), stride=2)
        np.testing.assert_allclose(out.data, [1.0, 1.0, 2.0, 2.0, 3.0, 3.0])

    def test_fold_rejects_gaps(self):
        with pytest.raises(DimensionError):
            fold(_t(np.ones((2, 4))), stride=5)


# ============================================================================
# backward
# ============================================================================


class TestBackward:
    """Tape traversal and gradient accumulation."""

    def test_sum(self):
        x = _t([1.0, 2.0, 3.0])
        backward(reduce_sum(x))
        np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0])

    def test_reused_input_accumulates(self):
        """d/dx sum(x * x) == 2x: both uses of x contribute."""
        x = _t([1.0, -2.0, 0.5])
        backward(reduce_sum(mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 1.0])

    def test_mse_closed_form(self, rng):
        """grad(W) of mse(W x, y) == 2/n (Wx - y) x^T."""
        W = _t(rng.normal(size=(3, 4)))
        x = rng.normal(size=(4, 1))
        y = rng.normal(size=(3, 1))
        backward(mse(matmul(W, _t(x, False)), _t(y, False)))
        expected = 2.0 / 3.0 * (W.data @ x - y) @ x.T
        np.testing.assert_allclose(W.grad, expected, atol=1e-9)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(mul(_t([1.0, 2.0]), _t([3.0, 4.0])))

    def test_slice_gradient_scatters(self):
        x = _t(np.arange(5.0))
        backward(reduce_sum(take_slice(x, slice(1, 3))))
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0, 0.0, 0.0])

    def test_no_grad_records_nothing(self):
        x = _t([1.0, 2.0])
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad


# ============================================================================
# finite differences
# ============================================================================


class TestFiniteDiff:
    """Central-difference oracle."""

    def test_square(self):
        x = _t(3.0)
        g = finite_diff_grad(lambda t: mul(t, t), x, h=1e-5)
        assert abs(g.item() - 6.0) <= 1e-8

    def test_constant_function(self):
        g = finite_diff_grad(lambda t: 4.0, _t(np.ones(5)))
        np.testing.assert_array_equal(g.data, np.zeros(5))

    def test_softmax_dot_agrees_with_backward(self, rng):
        x = _t(rng.normal(size=6))
        w = _t(rng.normal(size=6), False)
        errors = grad_check(lambda: reduce_sum(mul(softmax_lastdim(x), w)), [x])
        assert errors[0] <= 1e-6

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: t, _t(1.0), h=0.0)
