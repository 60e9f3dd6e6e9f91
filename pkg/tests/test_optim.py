import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmae.errors import ContractError, TrainingDivergenceError
from fmae.optim import AdamState, LRSchedule, adam_step, lr_at


def test_schedule_endpoints_defaults():
    sched = LRSchedule()
    assert sched.total_steps == 800 and sched.warmup_steps == 40
    assert lr_at(0, sched) == 0.0
    assert lr_at(40, sched) == 1.5e-4
    assert lr_at(800, sched) == 0.0
    assert lr_at(20, sched) == pytest.approx(0.75e-4)
    assert lr_at(420, sched) == pytest.approx(0.75e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 60), st.integers(1, 20))
def test_schedule_shape(warmup, extra, spe):
    sched = LRSchedule(1e-3, warmup, warmup + extra, spe)
    lrs = [lr_at(k, sched) for k in range(sched.total_steps + 1)]
    w = sched.warmup_steps
    assert lrs[0] == 0.0 and lrs[-1] == 0.0 and lrs[w] == 1e-3
    assert all(a <= b for a, b in zip(lrs[:w], lrs[1:w + 1]))
    assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1:]))
    # continuity at the boundary: neighbouring steps differ by at most one grid increment
    assert 1e-3 - lrs[w - 1] <= 1e-3 / w + 1e-18
    assert 1e-3 - lrs[w + 1] <= 1e-3 * (1 - math.cos(math.pi / (sched.total_steps - w))) / 2 + 1e-18


def test_schedule_rejects_bad_input():
    with pytest.raises(ContractError):
        lr_at(801, LRSchedule())
    with pytest.raises(ContractError):
        lr_at(-1, LRSchedule())
    with pytest.raises(ContractError):
        LRSchedule(warmup_epochs=10, total_epochs=10)
    with pytest.raises(ContractError):
        LRSchedule(peak=0.0)


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    adam_step(p, g, AdamState(), 0.1)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g) up to eps
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9], rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=5)}
    ref = p["w"].copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState()
    for t in range(1, 8):
        g = rng.normal(size=5)
        adam_step(p, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)


def test_adam_zero_lr_is_identity():
    p = {"w": np.arange(4.0)}
    before = p["w"].copy()
    adam_step(p, {"w": np.ones(4)}, AdamState(), 0.0)
    np.testing.assert_array_equal(p["w"], before)


def test_adam_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingDivergenceError) as info:
        adam_step({"a": np.ones(2), "b": np.ones(2)}, {"b": np.array([1.0, np.nan])}, AdamState(), 0.1)
    assert info.value.name == "b"
