import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from stcnet.tensor import (
    ShapeError,
    Tensor,
    TensorFormatError,
    add,
    backward,
    decode_tensor,
    encode_tensor,
    finite_diff_check,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    sum_all,
    topological_order,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_tensor_is_float64_and_scalar_promoted():
    t = Tensor(3)
    assert t.shape == (1,) and t.data.dtype == np.float64


def test_rank_and_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1,) * 6))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_scale_rejects_non_finite():
    with pytest.raises(ValueError):
        scale(Tensor([1.0]), float("inf"))


def test_add_then_sum_gradient_is_ones():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(sum_all(add(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, np.ones((2, 3)))


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = mul(x, x)  # x used twice
    backward(sum_all(add(y, x)))
    assert x.grad[0] == pytest.approx(2 * 2.0 + 1)


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(sum_all(scale(x, 3.0)))
    backward(sum_all(scale(x, 3.0)))
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar_and_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(relu(x))
    with pytest.raises(ValueError):
        backward(sum_all(Tensor(np.ones(2))))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = scale(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_topological_order_parents_first():
    x = Tensor([1.0], requires_grad=True)
    a = scale(x, 2.0)
    b = add(a, x)
    c = sum_all(mul(b, a))
    order = topological_order(c)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert order[-1] is c


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = scale(y, 1.0)
    backward(sum_all(y))
    assert x.grad[0] == 1.0


def test_retain_grad_on_intermediate():
    x = Tensor([1.0, -2.0], requires_grad=True)
    h = scale(x, 3.0).retain_grad()
    backward(sum_all(relu(h)))
    assert np.array_equal(h.grad, [1.0, 0.0])
    assert np.array_equal(x.grad, [3.0, 0.0])


def test_sigmoid_extreme_inputs_are_finite():
    s = sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s.data))
    assert s.data[1] == 0.5 and s.data[0] == 0.0 and s.data[2] == 1.0


def test_mean_matches_numpy():
    x = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert np.allclose(mean(Tensor(x), axis=(1, 2)).data, x.mean(axis=(1, 2)))


def test_mul_broadcast_gradient_reduces():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.full((2, 3, 1), 2.0), requires_grad=True)
    backward(sum_all(mul(a, b)))
    assert b.grad.shape == (2, 3, 1) and np.all(b.grad == 4.0)
    with pytest.raises(ShapeError):
        mul(a, Tensor(np.ones((3, 2))))


def test_finite_diff_check_catches_wrong_gradient():
    from stcnet.tensor import _make

    def bad(t):
        return _make(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    x = Tensor(np.array([1.0, 2.0]))
    assert finite_diff_check(lambda t: sum_all(bad(t)), x) > 0.1
    assert finite_diff_check(lambda t: sum_all(mul(t, t)), x) < 1e-8


def test_finite_diff_check_rejects_bad_eps_and_nondeterminism():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: sum_all(t), x, eps=1e-2)
    counter = iter(range(100))
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: scale(sum_all(t), 1.0 + next(counter)), x)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=5, max_side=4), elements=finite))
def test_encode_decode_round_trip(arr):
    buf = encode_tensor(arr)
    out, end = decode_tensor(buf)
    assert end == len(buf)
    assert out.shape == arr.shape and np.array_equal(out, arr)
    assert encode_tensor(out) == buf


def test_decode_errors():
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(TensorFormatError):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(TensorFormatError):
        decode_tensor(buf[:-1])


def test_tensor_record_layout():
    buf = encode_tensor(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"STCT" and buf[4] == 2
    assert buf[5:13] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(buf[13:], "<f8").tolist() == [1.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_reshape_round_trip_gradient(arr):
    x = Tensor(arr, requires_grad=True)
    backward(sum_all(reshape(reshape(x, (12,)), (2, 6))))
    assert np.array_equal(x.grad, np.ones((3, 4)))
