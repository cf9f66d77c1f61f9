import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiresketch.errors import ContractError
from hiresketch.harness.schedule import Adam, lr_at
from hiresketch.tensor import Tensor


@pytest.mark.parametrize("epoch,expected", [
    (0, 0.001),
    (9, 0.001),
    (10, 6.5e-4),
    (100, 0.001 * 0.65 ** 10),
    (119, 0.001 * 0.65 ** 10),
    (120, 0.001 * 0.65 ** 10 * 0.95),
    (179, 0.001 * 0.65 ** 10 * 0.95 ** 3),
])
def test_schedule_values(epoch, expected):
    assert lr_at(epoch) == pytest.approx(expected, rel=1e-12)


def test_epoch_100_closed_form():
    assert lr_at(100) == pytest.approx(1.346e-5, rel=1e-3)


def test_negative_epoch_rejected():
    with pytest.raises(ContractError):
        lr_at(-1)


@given(st.integers(0, 1000), st.integers(0, 1000))
def test_schedule_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_at(hi) <= lr_at(lo)


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_adam_skips_parameters_without_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([a, b], lr=0.1)
    a.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(b.data, 1.0)
    assert np.all(a.data < 1.0)
    opt.zero_grad()
    assert a.grad is None
