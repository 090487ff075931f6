import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slmpda import autodiff as ad
from slmpda.autodiff import NumericFault, ShapeError, Tape, TapeError, Tensor, backward, grad_check


def test_relu_forward():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_log_softmax_symmetric_pair():
    out = ad.log_softmax(Tensor([[0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[-math.log(2), -math.log(2)]], atol=1e-15)


def test_matmul_arithmetic():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_square_gradient_at_three():
    tape = Tape()
    x = tape.watch(np.array(3.0))
    g = backward(tape, ad.square(x))
    assert g[x] == pytest.approx(6.0)


def test_mean_gradient_is_uniform():
    tape = Tape()
    x = tape.watch(np.array([1.0, 5.0]))
    g = backward(tape, ad.mean(x))
    np.testing.assert_array_equal(g[x], [0.5, 0.5])


def test_relu_gradient_at_kink_is_zero():
    tape = Tape()
    x = tape.watch(np.array(0.0))
    assert backward(tape, ad.relu(x))[x] == 0.0


def test_unreachable_nodes_get_exact_zeros():
    tape = Tape()
    x = tape.watch(np.ones(3))
    y = tape.watch(np.ones((2, 2)))
    g = backward(tape, ad.sum(ad.square(x)))
    assert not g.reached(y)
    np.testing.assert_array_equal(g[y], np.zeros((2, 2)))


def test_tape_is_single_use():
    tape = Tape()
    x = tape.watch(np.array(1.0))
    y = ad.square(x)
    backward(tape, y)
    with pytest.raises(TapeError):
        backward(tape, y)
    with pytest.raises(TapeError):
        tape.watch(np.array(2.0))


def test_backward_needs_scalar_root():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, ad.square(x))


def test_mixing_tapes_is_rejected():
    a = Tape().watch(np.ones(2))
    b = Tape().watch(np.ones(2))
    with pytest.raises(TapeError):
        ad.add(a, b)


def test_shape_mismatch_is_a_contract_violation():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.sub(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_non_finite_output_names_the_primitive():
    with pytest.raises(NumericFault) as info:
        ad.exp(Tensor([1000.0]))
    assert info.value.kind == "exp"
    assert "exp" in str(info.value)


def test_log_clamps_small_arguments():
    out = ad.log(Tensor([0.0, 1.0]))
    assert out.data[0] == pytest.approx(math.log(1e-12))
    tape = Tape()
    x = tape.watch(np.array([0.0, 2.0]))
    g = backward(tape, ad.sum(ad.log(x)))
    np.testing.assert_allclose(g[x], [0.0, 0.5])


def test_row_bias_add_gradient_sums_rows():
    tape = Tape()
    x = tape.watch(np.zeros((3, 2)))
    b = tape.watch(np.zeros(2))
    g = backward(tape, ad.sum(ad.add(x, b)))
    np.testing.assert_array_equal(g[b], [3.0, 3.0])


def test_take_rows_with_repeats_accumulates():
    tape = Tape()
    x = tape.watch(np.arange(6.0).reshape(3, 2))
    g = backward(tape, ad.sum(ad.take_rows(x, [0, 0, 2])))
    np.testing.assert_array_equal(g[x], [[2, 2], [0, 0], [1, 1]])


def test_operator_sugar_routes_through_primitives():
    tape = Tape()
    x = tape.watch(np.array([1.0, 2.0]))
    y = ad.sum((x * 3.0 - 1.0) / 2.0)
    g = backward(tape, y)
    np.testing.assert_allclose(g[x], [1.5, 1.5])


def test_grad_check_sum_of_squares():
    x = np.random.default_rng(0).standard_normal(8)
    assert grad_check(lambda t: ad.sum(ad.square(t)), x, eps=1e-5) < 1e-7


def test_grad_check_cross_entropy():
    rng = np.random.default_rng(1)
    target = rng.dirichlet(np.ones(4), size=3)
    x = rng.standard_normal((3, 4))
    assert grad_check(lambda t: ad.mean(ad.soft_cross_entropy(t, target)), x) < 1e-4


def test_grad_check_constant_function():
    assert grad_check(lambda t: Tensor(3.0), np.ones(4)) == 0.0


def test_grad_check_reversal_scale():
    x = np.random.default_rng(2).standard_normal(5)
    f = lambda t: ad.sum(ad.square(ad.grl(t, 0.3)))  # noqa: E731
    assert grad_check(f, x) > 0.5
    assert grad_check(f, x, numeric_scale=-0.3) < 1e-6


def test_backward_is_linear_in_the_root():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((3, 2))

    def grads(build):
        tape = Tape()
        x = tape.watch(x0)
        return backward(tape, build(x))[x]

    l1 = lambda x: ad.sum(ad.sigmoid(x))  # noqa: E731
    l2 = lambda x: ad.mean(ad.square(ad.matmul(x, Tensor(np.ones((2, 2))))))  # noqa: E731
    a, b = 0.7, -2.5
    combined = grads(lambda x: ad.add(ad.scale(l1(x), a), ad.scale(l2(x), b)))
    np.testing.assert_allclose(combined, a * grads(l1) + b * grads(l2), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
def test_log_softmax_rows_normalise(x):
    out = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-40, 40)))
def test_softplus_matches_log1p_exp(x):
    ref = np.logaddexp(0.0, x)
    np.testing.assert_allclose(ad.softplus(Tensor(x)).data, ref, rtol=1e-12, atol=1e-300)


def test_detach_cuts_the_tape():
    tape = Tape()
    x = tape.watch(np.array([1.0, 2.0]))
    y = ad.add(ad.square(x).detach(), x)
    g = backward(tape, ad.sum(y))
    np.testing.assert_array_equal(g[x], [1.0, 1.0])
