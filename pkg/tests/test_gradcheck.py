import numpy as np
import pytest

from stcnet import nn
from stcnet.gradcheck import KINK_GAP, TOLERANCE, away_from_zero, check_op, distinct, e2e_check, op_cases
from stcnet.tensor import Tensor, record_kinks, relu, same_pattern


def test_away_from_zero_clears_the_gap():
    x = np.array([-0.5, -1e-5, 0.0, 2e-4, 0.3])
    y = away_from_zero(x)
    assert np.all(np.abs(y) >= KINK_GAP)
    assert np.array_equal(y[[0, 4]], x[[0, 4]])
    assert np.array_equal(np.sign(y[[1, 3]]), np.sign(x[[1, 3]]))


def test_distinct_spaces_values():
    x = np.random.default_rng(0).standard_normal((3, 4))
    y = distinct(x)
    gaps = np.diff(np.sort(y.ravel()))
    assert np.all(gaps >= 2 * KINK_GAP - 1e-15)
    assert np.array_equal(np.argsort(x.ravel()), np.argsort(y.ravel()))


def test_record_kinks_sees_relu_and_pool_switches():
    x = np.array([[[[1.0, -1.0], [0.5, 2.0]]]])
    with record_kinks() as a:
        nn.maxpool2d(relu(Tensor(x)), 2, 2, 0)
    with record_kinks() as b:
        nn.maxpool2d(relu(Tensor(x * [[[[1, 1], [1, 0.1]]]])), 2, 2, 0)
    assert len(a) == 2 and not same_pattern(a, b)
    with record_kinks() as c:
        nn.maxpool2d(relu(Tensor(x * 1.01)), 2, 2, 0)
    assert same_pattern(a, c)


def test_kinks_not_recorded_outside_context():
    with record_kinks() as k:
        pass
    relu(Tensor(np.ones(3)))
    assert k == []


@pytest.mark.parametrize("case", op_cases(), ids=lambda c: c.name)
def test_op_gradient(case):
    for seed in range(3):
        assert check_op(case, seed) <= TOLERANCE


def test_broken_gradient_is_caught():
    from stcnet.gradcheck import OpCase
    from stcnet.tensor import _make, sum_all

    def bad_square(x):
        return sum_all(_make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square"))  # missing factor 2

    case = OpCase("bad_square", lambda rng: (bad_square, rng.uniform(1, 2, (3,))))
    assert check_op(case, 0) > 0.1


@pytest.mark.parametrize("variant", ["full", "spatial_only"])
def test_model_loss_gradient(variant):
    r = e2e_check(0, variant)
    assert r.worst <= TOLERANCE
    assert r.checks > 10
