import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gatedcap import autodiff as ad
from gatedcap.autodiff import Tensor

from gradcases import DECODER_CASES, OP_CASES, TOL, check_decoder_loss, check_op

OP_SEEDS = range(8)


@pytest.mark.parametrize("seed", OP_SEEDS)
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(op, seed):
    assert check_op(op, seed) < TOL


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("cell,mode", DECODER_CASES)
def test_decoder_loss_gradient(cell, mode, seed):
    assert check_decoder_loss(cell, seed, mode) < TOL


def test_case_count_covers_suite():
    assert len(OP_CASES) * len(OP_SEEDS) + 3 * len(DECODER_CASES) >= 200


def test_sum_of_product_gradient():
    # loss = sum(x * y), x = [1,2], y = [3,4] -> grad x = y, grad y = x
    x = Tensor([1.0, 2.0], True)
    y = Tensor([3.0, 4.0], True)
    ad.backward(ad.sum(ad.mul(x, y)))
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])
    np.testing.assert_array_equal(y.grad, [1.0, 2.0])


def test_reused_node_accumulates():
    # loss = (x + x) * x -> d/dx = 4x
    x = Tensor(3.0, True)
    loss = ad.mul(ad.add(x, x), x)
    ad.backward(loss)
    assert x.grad == pytest.approx(12.0)


def test_leaf_gradients_accumulate_until_zeroed():
    x = Tensor([2.0], True)
    ad.backward(ad.sum(ad.mul(x, 3.0)))
    ad.backward(ad.sum(ad.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], True)
    loss = ad.sum(ad.tanh(x))
    ad.backward(loss)
    with pytest.raises(RuntimeError, match="consumed"):
        ad.backward(loss)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.tanh(x))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_lookup_out_of_range():
    with pytest.raises(IndexError):
        ad.lookup(Tensor(np.ones((4, 2))), [0, 4])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y.is_leaf
    assert ad.grad_enabled()


def test_dropout_identity_in_eval_and_rejects_rate_one():
    x = Tensor(np.arange(4.0))
    assert ad.dropout(x, 0.5, False, None) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, np.random.default_rng(0))


def test_straight_through_passes_gradient_unchanged():
    p = Tensor([0.2, 0.7], True)
    out = ad.straight_through(p, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    ad.backward(ad.sum(ad.mul(out, Tensor([5.0, -2.0]))))
    np.testing.assert_array_equal(p.grad, [5.0, -2.0])


def test_cross_entropy_uniform_logits():
    # uniform over V classes -> ln V per row
    loss = ad.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
    assert loss.item() == pytest.approx(3 * np.log(7))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(z):
    s = ad.softmax(Tensor(z), axis=1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-12)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_sigmoid_bounded_and_symmetric(z):
    s = ad.sigmoid(Tensor(z)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + ad.sigmoid(Tensor(-z)).data, 1.0, atol=1e-15)
