import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cvaegan.errors import ContractError
from cvaegan.optim import AdamState, Schedule, adam_step, lr_at
from cvaegan.tensor import Tensor


def param(value, grad):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


def test_first_adam_step_closed_form():
    p = param([0.0], [1.0])
    state = adam_step({"w": p}, AdamState(), 0.001)
    # m_hat = v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)
    assert state.step_count == 1


def test_zero_grad_leaves_params():
    p = param([1.5, -2.0], [0.0, 0.0])
    adam_step({"w": p}, AdamState(), 0.01)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_deterministic():
    a, b = param([0.3], [0.7]), param([0.3], [0.7])
    adam_step({"w": a}, AdamState(), 0.01)
    adam_step({"w": b}, AdamState(), 0.01)
    assert a.data.tobytes() == b.data.tobytes()


def test_missing_grad_and_bad_lr():
    with pytest.raises(ContractError):
        adam_step({"w": Tensor([1.0], requires_grad=True)}, AdamState(), 0.01)
    with pytest.raises(ContractError):
        adam_step({"w": param([1.0], [1.0])}, AdamState(), 0.0)


def test_moments_mirror_params():
    p = param(np.zeros((2, 3)), np.ones((2, 3)))
    s = adam_step({"w": p}, AdamState(), 0.01)
    assert s.m["w"].shape == s.v["w"].shape == (2, 3)
    assert np.all(s.v["w"] >= 0)


@given(arrays(np.float64, (5, 4), elements=st.floats(-100, 100)), st.floats(1e-5, 1e-1))
def test_update_bounded(grads, lr):
    p = param(np.zeros(4), grads[0])
    state = AdamState()
    for g in grads:
        before = p.data.copy()
        p.grad = g
        adam_step({"w": p}, state, lr)
        assert np.all(np.abs(p.data - before) <= lr / (1 - state.beta1) + 1e-12)


def test_schedule_examples():
    assert lr_at(Schedule(0.0002), 0) == 0.0002
    assert lr_at(Schedule(0.0002), 24) == 0.0002
    assert lr_at(Schedule(0.0002), 25) == pytest.approx(4e-5, abs=1e-12)
    assert lr_at(Schedule(0.002), 50) == pytest.approx(8e-5, abs=1e-12)
    with pytest.raises(ContractError):
        lr_at(Schedule(0.1), -1)


@given(st.floats(1e-6, 1.0), st.integers(0, 500))
def test_schedule_monotone_positive(base, epoch):
    s = Schedule(base)
    assert 0 < lr_at(s, epoch + 1) <= lr_at(s, epoch)
