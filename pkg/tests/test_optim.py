import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitodann.optim import Adam, OneCycleSchedule, adam_step, lr_at
from mitodann.tensor import Tensor


def scalar(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


def test_zero_gradient_leaves_parameter():
    p = scalar(1.25)
    opt = Adam([p])
    p.grad = np.zeros(1)
    opt.step(0.1)
    assert p.data.tolist() == [1.25]


def test_first_step_magnitude_is_lr():
    p = scalar(0.0)
    opt = Adam([p])
    p.grad = np.ones(1)
    adam_step([p], opt, 0.1)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def _quadratic_oracle(theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out longhand, independent of the Adam class."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_minimizes_quadratic():
    p = scalar(1.0)
    opt = Adam([p])
    for _ in range(100):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step(0.05)
    expected = _quadratic_oracle(1.0, 0.05, 100)
    assert abs(expected) < 0.05
    assert p.data[0] == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert abs(p.data[0]) < 0.05


def test_adam_deterministic():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(20, 4))
    finals = []
    for _ in range(2):
        p = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
        opt = Adam([p])
        for g in grads:
            p.grad = g.copy()
            opt.step(1e-2)
        finals.append(p.data.copy())
    assert np.array_equal(*finals)


def test_moment_shape_mismatch():
    p = scalar(1.0)
    opt = Adam([p])
    p.grad = np.ones(2)
    with pytest.raises(ValueError):
        opt.step(0.1)


def test_state_round_trip():
    p = scalar(1.0)
    opt = Adam([p])
    p.grad = np.array([0.3])
    opt.step(0.1)
    q = scalar(1.0)
    opt2 = Adam([q])
    opt2.load_state_dict(opt.state_dict())
    assert opt2.t == 1 and np.array_equal(opt2.m[0], opt.m[0]) and np.array_equal(opt2.v[0], opt.v[0])


# -- schedule ----------------------------------------------------------------------


SCHED = OneCycleSchedule(max_lr=1e-3, steps_per_cycle=100, cycles=3)


def test_schedule_start():
    assert lr_at(SCHED, 0) == pytest.approx(1e-3 / 25)


def test_schedule_peak():
    assert lr_at(SCHED, 30) == pytest.approx(1e-3)
    lrs = [lr_at(SCHED, s) for s in range(100)]
    assert int(np.argmax(lrs)) == 30
    assert sum(1 for s in range(1, 99) if lrs[s] > lrs[s - 1] and lrs[s] >= lrs[s + 1]) == 1


def test_schedule_end_of_cycle_approaches_final():
    assert lr_at(SCHED, 99) > 1e-3 / 1e4
    assert lr_at(SCHED, 99) < 1e-5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_schedule_periodic(step):
    assert lr_at(SCHED, step) == lr_at(SCHED, step + SCHED.steps_per_cycle)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-5, 1.0), st.integers(2, 400), st.floats(0.05, 0.95))
def test_schedule_positive_and_continuous(max_lr, steps, pct):
    s = OneCycleSchedule(max_lr=max_lr, steps_per_cycle=steps, pct_ramp_up=pct, cycles=2)
    lrs = np.array([lr_at(s, i) for i in range(2 * steps + 1)])
    assert np.all(lrs > 0)
    assert np.all(np.abs(np.diff(lrs)) <= max_lr)


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(SCHED, -1)


def test_lr_scales_multiply_step():
    p, q = scalar(0.0), scalar(0.0)
    opt = Adam([p, q], lr_scales=[1.0, 10.0])
    p.grad, q.grad = np.ones(1), np.ones(1)
    opt.step(0.01)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-6)
    assert q.data[0] == pytest.approx(-0.1, rel=1e-6)
    with pytest.raises(ValueError):
        Adam([p], lr_scales=[1.0, 2.0])
