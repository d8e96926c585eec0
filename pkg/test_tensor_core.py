#!/usr/bin/env python3

"""
Tests for the reverse-mode tensor engine
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from services import tensor_core as tc
from services.tensor_core import Tensor


def test_elementwise_identities():
    assert tc.elementwise("sigmoid", tc.tensor(0.0)).item() == 0.5
    x = tc.tensor([1.5, -2.0, 3.25])
    assert np.array_equal(tc.elementwise("add", x, 0.0).data, x.data)
    v = tc.tensor(np.linspace(0.1, 20.0, 50))
    assert np.max(np.abs(v.log().exp().data - v.data)) < 1e-12


def test_elementwise_errors():
    with pytest.raises(tc.DomainError):
        tc.tensor([1.0, -1.0]).log()
    with pytest.raises(tc.NonFiniteError):
        tc.tensor(1000.0).exp()
    with pytest.raises(tc.ShapeError):
        tc.add(tc.tensor([1.0, 2.0]), tc.tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        tc.elementwise("tanh", tc.tensor(1.0))


def test_matmul_hand_cases():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((tc.tensor(np.eye(3)) @ tc.tensor(m)).data, m)
    out = tc.tensor([[1.0, 2.0], [3.0, 4.0]]) @ tc.tensor([[0.0], [1.0]])
    assert out.data.tolist() == [[2.0], [4.0]]
    with pytest.raises(tc.ShapeError):
        tc.tensor(np.ones((2, 3))) @ tc.tensor(np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = tc.tensor(rng.normal(size=(3, 4)))
    a = tc.tensor(rng.normal(size=(2, 3)))
    assert tc.grad_check(lambda t: (t @ b).sum(), a) < 1e-6


def test_softmax_lastdim():
    uniform = tc.softmax_lastdim(tc.tensor(np.full((1, 4), 2.0)))
    assert np.allclose(uniform.data, 0.25, atol=1e-15)
    out = tc.softmax_lastdim(tc.tensor([[0.0, math.log(3.0)]]))
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-15)
    row = np.random.default_rng(1).normal(size=(2, 5))
    shifted = tc.softmax_lastdim(tc.tensor(row + 7.5)).data
    assert np.max(np.abs(shifted - tc.softmax_lastdim(tc.tensor(row)).data)) < 1e-12


def test_cholesky_hand_cases():
    assert np.array_equal(tc.cholesky(tc.tensor(np.eye(3)), jitter=0.0).data, np.eye(3))
    factor = tc.cholesky(tc.tensor([[4.0, 2.0], [2.0, 2.0]]), jitter=0.0).data
    assert np.allclose(factor, [[2.0, 0.0], [1.0, 1.0]], atol=1e-15)


def test_cholesky_reconstructs_random_spd():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 5))
    spd = a @ a.T + 5.0 * np.eye(5)
    factor = tc.cholesky(tc.tensor(spd), jitter=0.0).data
    assert np.allclose(factor, np.tril(factor))
    assert np.max(np.abs(factor @ factor.T - spd)) < 1e-10


def test_cholesky_gives_up_on_indefinite_matrix():
    with pytest.raises(tc.CholeskyError):
        tc.cholesky(tc.tensor([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_escalates_jitter_on_semidefinite_matrix():
    ones = np.ones((3, 3))
    factor = tc.cholesky(tc.tensor(ones), jitter=0.0).data
    assert np.max(np.abs(factor @ factor.T - ones)) < 1e-4


def test_cholesky_gradient():
    rng = np.random.default_rng(3)
    weights = tc.tensor(rng.normal(size=(3, 3)))

    def f(a: Tensor) -> Tensor:
        return (tc.cholesky(a @ a.T + np.eye(3), jitter=0.0) * weights).sum()

    assert tc.grad_check(f, tc.tensor(rng.normal(size=(3, 3)))) < 1e-5


def test_solve_triangular_value_and_gradients():
    rng = np.random.default_rng(4)
    lower = np.tril(rng.normal(size=(3, 3))) + 3.0 * np.eye(3)
    b = rng.normal(size=(3, 2))
    x = tc.solve_triangular(tc.tensor(lower), tc.tensor(b)).data
    assert np.allclose(lower @ x, b, atol=1e-12)

    weights = tc.tensor(rng.normal(size=(3, 2)))
    assert tc.grad_check(lambda t: (tc.solve_triangular(tc.tensor(lower), t) * weights).sum(), tc.tensor(b)) < 1e-6
    assert tc.grad_check(lambda t: (tc.solve_triangular(t, tc.tensor(b)) * weights).sum(), tc.tensor(lower)) < 1e-6


def test_backward_scalar_square():
    w = tc.tensor(3.0, requires_grad=True)
    tc.backward(w * w)
    assert w.grad == 6.0


def test_backward_leaves_unrelated_leaf_untouched():
    w = tc.tensor(2.0, requires_grad=True)
    x = tc.tensor(5.0, requires_grad=True)
    tc.backward(x * 3.0)
    assert w.grad is None or w.grad == 0.0
    assert x.grad == 3.0


def test_backward_accumulates_until_zero_grad():
    w = tc.tensor([1.0, 2.0], requires_grad=True)
    tc.backward((w * w).sum())
    tc.backward((w * w).sum())
    assert w.grad.tolist() == [4.0, 8.0]
    w.zero_grad()
    assert w.grad is None


def test_backward_needs_scalar():
    w = tc.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(tc.ShapeError):
        tc.backward(w * 2.0)


def test_composite_graph_gradient():
    rng = np.random.default_rng(5)
    x = tc.tensor(rng.normal(size=(4, 3)))
    w = tc.tensor(rng.normal(size=(3, 2)))
    assert tc.grad_check(lambda t: (x @ t).sigmoid().sum(), w) < 1e-5


def test_take_accumulates_repeated_indices():
    x = tc.tensor([1.0, 2.0, 3.0], requires_grad=True)
    tc.backward(tc.take(x, np.array([0, 0, 2])).sum())
    assert x.grad.tolist() == [2.0, 0.0, 1.0]


def test_expand_sums_gradient_back():
    x = tc.tensor([1.0, 2.0, 3.0], requires_grad=True)
    tc.backward(x.expand((2, 3)).sum())
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_masked_fill_blocks_gradient():
    x = tc.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    mask = np.array([[False, True], [False, False]])
    out = tc.masked_fill(x, mask, -1e30)
    assert out.data[0, 1] == -1e30
    tc.backward(tc.softmax_lastdim(out).sum() + (x * x).sum())
    assert x.grad[0, 1] == 4.0


def test_concat_and_reshape_gradients():
    rng = np.random.default_rng(6)
    other = tc.tensor(rng.normal(size=(2, 3)))
    weights = tc.tensor(rng.normal(size=(6, 2)))

    def f(t: Tensor) -> Tensor:
        joined = tc.concat([t, other], axis=0).reshape(6, 2)
        return (joined * weights).softplus().sum()

    assert tc.grad_check(f, tc.tensor(rng.normal(size=(2, 3)))) < 1e-6


def test_dropout_is_identity_in_eval_mode():
    x = tc.tensor(np.ones((4, 4)))
    assert tc.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    dropped = tc.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(dropped)) <= {0.0, 2.0}


def test_grad_check_quadratic_and_linear():
    rng = np.random.default_rng(7)
    assert tc.grad_check(lambda t: (t * t).sum(), tc.tensor(rng.uniform(0.5, 2.0, size=6)), eps=1e-5) < 1e-7
    a = tc.tensor(rng.normal(size=5))
    assert tc.grad_check(lambda t: (t * a).sum(), tc.tensor(rng.normal(size=5))) < 1e-9


def test_power_domain():
    assert (tc.tensor([2.0, 3.0]) ** 2).data.tolist() == [4.0, 9.0]
    with pytest.raises(tc.DomainError):
        tc.tensor([-1.0, 4.0]) ** 0.5


def test_kron_value_and_gradients():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    assert np.array_equal(tc.kron(tc.tensor(a), tc.tensor(b)).data, np.kron(a, b))
    weights = tc.tensor(rng.normal(size=(6, 6)))
    assert tc.grad_check(lambda t: (tc.kron(t, tc.tensor(b)) * weights).sum(), tc.tensor(a)) < 1e-6
    assert tc.grad_check(lambda t: (tc.kron(tc.tensor(a), t) * weights).sum(), tc.tensor(b)) < 1e-6
    with pytest.raises(tc.ShapeError):
        tc.kron(tc.tensor([1.0, 2.0]), tc.tensor(b))


def test_take_submatrix_value_and_gradient():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(4, 5))
    rows, cols = np.array([3, 0, 2]), np.array([1, 4])
    assert np.array_equal(tc.take_submatrix(tc.tensor(a), rows, cols).data, a[np.ix_(rows, cols)])
    weights = tc.tensor(rng.normal(size=(3, 2)))
    assert tc.grad_check(lambda t: (tc.take_submatrix(t, rows, cols) * weights).sum(), tc.tensor(a)) < 1e-6

    x = tc.tensor(np.ones((2, 2)), requires_grad=True)
    tc.backward(tc.take_submatrix(x, [0, 0], [1]).sum())
    assert x.grad.tolist() == [[0.0, 2.0], [0.0, 0.0]]


@pytest.mark.parametrize("kind", ["exp", "log", "sqrt", "sigmoid", "relu", "softplus"])
def test_unary_op_gradients(kind):
    rng = np.random.default_rng(10)
    weights = tc.tensor(rng.uniform(0.5, 1.5, size=8))
    values = rng.uniform(0.5, 2.0, size=8)
    if kind in ("sigmoid", "relu", "softplus"):
        values[::2] *= -1.0
    assert tc.grad_check(lambda t: (tc.elementwise(kind, t) * weights).sum(), tc.tensor(values), floor=1e-8) < 1e-6


def test_div_gradients():
    rng = np.random.default_rng(11)
    numerator = rng.uniform(0.5, 2.0, size=(3, 2))
    denominator = rng.uniform(0.5, 2.0, size=(3, 2))
    weights = tc.tensor(rng.uniform(0.5, 1.5, size=(3, 2)))
    assert tc.grad_check(lambda t: ((t / tc.tensor(denominator)) * weights).sum(), tc.tensor(numerator)) < 1e-6
    assert tc.grad_check(lambda t: ((tc.tensor(numerator) / t) * weights).sum(), tc.tensor(denominator)) < 1e-6


def test_softmax_gradient():
    rng = np.random.default_rng(12)
    weights = tc.tensor(rng.normal(size=(3, 4)))
    assert tc.grad_check(lambda t: (tc.softmax_lastdim(t) * weights).sum(), tc.tensor(rng.normal(size=(3, 4))),
                         floor=1e-4) < 1e-5


def test_backward_through_shared_nodes():
    a = tc.tensor(2.0, requires_grad=True)
    b = a * 3.0
    c = a * a
    tc.backward(b * c + b)
    # y = 3a^3 + 3a
    assert a.grad == 39.0

    rng = np.random.default_rng(13)
    x = tc.tensor(rng.normal(size=4))
    w = tc.tensor(rng.normal(size=4))

    def f(t: Tensor) -> Tensor:
        shared = t * w
        return (shared * shared.sigmoid() + shared.exp() * t).sum()

    assert tc.grad_check(f, x) < 1e-6


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
