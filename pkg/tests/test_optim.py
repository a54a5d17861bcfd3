import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisherlab.autodiff import LayoutMismatchError, ParamVector
from fisherlab.optim import LrSchedule, SgdState, lr_at, sgd_step


def test_vanilla_step():
    theta = ParamVector([1.0, 1.0])
    new, _ = sgd_step(SgdState.fresh(theta, momentum=0.0), theta, ParamVector([1.0, 2.0]), 0.1)
    np.testing.assert_allclose(new.data, [0.9, 0.8], rtol=1e-15)


def test_momentum_second_update_is_one_point_nine():
    # v1 = g, v2 = 0.9 g + g = 1.9 g
    theta = ParamVector([0.0, 0.0])
    g = ParamVector([0.5, -2.0])
    state = SgdState.fresh(theta, momentum=0.9)
    t1, state = sgd_step(state, theta, g, 0.1)
    t2, _ = sgd_step(state, t1, g, 0.1)
    np.testing.assert_allclose(t1.data - t2.data, 0.1 * 1.9 * g.data, rtol=1e-14)


def test_pure_weight_decay():
    theta = ParamVector([1.0, 0.0])
    state = SgdState.fresh(theta, momentum=0.0, weight_decay=0.1)
    new, _ = sgd_step(state, theta, ParamVector([0.0, 0.0]), 1.0)
    np.testing.assert_allclose(new.data, [0.9, 0.0], rtol=1e-15)


def test_step_errors():
    theta = ParamVector([1.0, 1.0])
    with pytest.raises(LayoutMismatchError):
        sgd_step(SgdState.fresh(theta), theta, ParamVector([1.0]), 0.1)
    with pytest.raises(ValueError):
        sgd_step(SgdState.fresh(theta), theta, theta, 0.0)
    with pytest.raises(ValueError):
        SgdState.fresh(theta, momentum=1.0)


def test_schedule_examples():
    assert lr_at(LrSchedule(0.03), 500) == 0.03
    sched = LrSchedule(0.02, (80, 150, 200), 0.5)
    assert lr_at(sched, 160) == pytest.approx(0.005, rel=1e-15)
    assert lr_at(sched, 79) == 0.02
    assert lr_at(sched, 80) == 0.01
    with pytest.raises(ValueError):
        LrSchedule(0.1, (10, 10))
    with pytest.raises(ValueError):
        lr_at(sched, -1)


def test_trajectory_determinism():
    def run():
        rng = np.random.default_rng(4)
        theta = ParamVector(rng.standard_normal(5))
        state = SgdState.fresh(theta, 0.9, 1e-3)
        for _ in range(50):
            theta, state = sgd_step(state, theta, ParamVector(rng.standard_normal(5)), 0.05)
        return theta.data

    assert np.array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(
    theta=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    scale=st.floats(-5, 5),
    lr=st.floats(1e-4, 1.0),
)
def test_plain_step_is_exact(theta, scale, lr):
    t = ParamVector(theta)
    g = ParamVector(scale * np.asarray(theta) + 1.0)
    new, _ = sgd_step(SgdState.fresh(t, momentum=0.0), t, g, lr)
    assert np.array_equal(new.data, t.data - lr * g.data)


@settings(max_examples=50, deadline=None)
@given(
    milestones=st.lists(st.integers(0, 300), min_size=0, max_size=5, unique=True).map(sorted),
    gamma=st.floats(0.01, 1.0),
    a=st.integers(0, 400),
    b=st.integers(0, 400),
)
def test_schedule_non_increasing(milestones, gamma, a, b):
    sched = LrSchedule(0.1, tuple(milestones), gamma)
    lo, hi = sorted((a, b))
    assert lr_at(sched, hi) <= lr_at(sched, lo)
