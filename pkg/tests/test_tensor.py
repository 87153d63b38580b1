import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from darcn import tensor as T
from darcn.errors import ContractError, DimensionError
from darcn.gradcheck import AUDIT_TOL, audit_ops, check, numeric_grad, rel_error
from darcn.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_activation_closed_forms():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert math.isclose(T.softplus(Tensor(0.0)).item(), math.log(2), rel_tol=1e-12)
    assert math.isclose(T.elu(Tensor(-1.0)).item(), math.exp(-1) - 1, rel_tol=1e-12)
    assert T.relu(Tensor(-2.0)).item() == 0.0
    assert T.tanh(Tensor(0.0)).item() == 0.0


def test_sigmoid_is_stable_at_extremes():
    y = T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0
    assert np.all(np.isfinite(T.softplus(Tensor(np.array([-800.0, 800.0]))).data))


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_shape_mismatch_names_both_shapes(kind):
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        T.elementwise(kind, Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_broadcast_gradient_reduces_to_operand_shape():
    a = leaf(np.ones((2, 3, 4)))
    b = leaf(np.arange(4.0))
    T.backward(T.tsum(a * b))
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))


def test_sum_gives_ones_and_square_gives_2x():
    x = leaf(np.random.default_rng(0).uniform(-1, 1, (3, 5)))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 5)))
    x.grad = None
    T.backward(T.tsum(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_repeated_backward_accumulates():
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(x * 3.0))
    T.backward(T.tsum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_shared_subexpression_visited_once():
    x = leaf(2.0)
    y = x * x
    z = y + y  # d/dx 2x^2 = 4x
    T.backward(z)
    assert x.grad == pytest.approx(8.0)
    assert len(T.graph(z)) == 3


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_reshape_roundtrip_and_concat_shapes():
    x = leaf(np.random.default_rng(1).standard_normal((7, 4, 64)))
    y = T.reshape(T.reshape(x, (7, 256)), (7, 4, 64))
    np.testing.assert_array_equal(y.data, x.data)
    c = T.concat([Tensor(np.ones((1, 1, 5, 3))), Tensor(np.zeros((1, 1, 5, 3)))], axis=1)
    assert c.shape == (1, 2, 5, 3)
    with pytest.raises(DimensionError):
        T.reshape(x, (7, 255))
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((1, 1, 5, 3))), Tensor(np.ones((1, 1, 4, 3)))], axis=1)


def test_concat_routes_gradient_slices():
    a, b = leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 2, 2, 2)))
    w = np.arange(12.0).reshape(1, 3, 2, 2)
    T.backward(T.tsum(T.concat([a, b], axis=1) * w))
    np.testing.assert_array_equal(a.grad, w[:, :1])
    np.testing.assert_array_equal(b.grad, w[:, 1:])


def test_slice_axes_gradient_is_zero_outside():
    x = leaf(np.ones((3, 4)))
    T.backward(T.tsum(T.slice_axes(x, [(1, 3), None])))
    np.testing.assert_array_equal(x.grad, np.vstack([np.zeros(4), np.ones(4), np.ones(4)]))


def test_numeric_grad_matches_polynomial():
    arr = np.array([0.3, -0.7])
    x = Tensor(arr, requires_grad=True)
    num = numeric_grad(lambda: T.tsum(x * x * x), arr, [(0,), (1,)])
    np.testing.assert_allclose(num, 3 * arr ** 2, rtol=1e-8)


def test_rel_error_floor():
    assert rel_error(np.array([1e-12]), np.array([0.0])) < 1e-5
    assert rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_every_op_passes_gradient_audit():
    rows = audit_ops(0)
    names = {r.name for r in rows}
    for op in ("add", "sub", "mul", "div", "sigmoid", "tanh", "relu", "elu", "softplus", "concat", "reshape",
               "conv2d", "conv_transpose2d", "batch_norm(train)", "batch_norm(eval)"):
        assert any(n.startswith(op) for n in names), op
    worst = max(rows, key=lambda r: r.max_rel_err)
    assert worst.max_rel_err <= 1e-5, worst
    assert all(r.passed for r in rows) and AUDIT_TOL == 1e-4


floats = st.floats(-1, 1, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=floats), arrays(np.float64, (3, 4), elements=floats))
def test_smooth_op_gradients_on_random_inputs(a, b):
    # ELU's curvature jumps at 0, which biases central differences there
    x, y = leaf(np.where(np.abs(a) < 1e-3, 0.25, a)), leaf(b)
    fn = lambda: T.tsum(T.tanh(x) * T.sigmoid(y) + T.softplus(x - y) + T.elu(x) * y)  # noqa: E731
    assert max(check(fn, [x, y])) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=floats))
def test_relu_gradient_away_from_kink(a):
    a = np.where(np.abs(a) < 1e-3, 0.5, a)
    x = leaf(a)
    assert max(check(lambda: T.tsum(T.relu(x) * x), [x])) <= 1e-5
