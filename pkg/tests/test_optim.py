import numpy as np
import pytest

from src.core.config import TrainingSettings
from src.core.errors import DomainError
from src.services.rstar4d.optim import AdamState, LogLinearSchedule, adam_step


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}


def test_zero_gradient_leaves_params_and_decays_v(params):
    before = {k: v.copy() for k, v in params.items()}
    state = AdamState.for_params(params)
    state.v["a"][...] = 1.0
    adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, lr=1e-3)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])
    np.testing.assert_allclose(state.v["a"], 0.999)
    assert state.step == 1


def test_first_step_bounded_by_lr(params):
    rng = np.random.default_rng(1)
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: rng.standard_normal(v.shape) * 100 for k, v in params.items()}
    adam_step(params, grads, AdamState.for_params(params), lr=0.01)
    for k in params:
        delta = params[k] - before[k]
        assert np.all(np.abs(delta) <= 0.01 + 1e-12)
        np.testing.assert_array_equal(np.sign(delta), -np.sign(grads[k]))


def test_frozen_parameters_are_skipped(params):
    before = params["b"].copy()
    state = AdamState.for_params(params)
    grads = {k: np.ones_like(v) for k, v in params.items()}
    adam_step(params, grads, state, lr=0.1, frozen={"b"})
    np.testing.assert_array_equal(params["b"], before)
    assert not state.m["b"].any() and not state.v["b"].any()
    assert state.m["a"].any()


def test_shape_mismatch(params):
    grads = {"a": np.zeros((4, 3)), "b": np.zeros(5)}
    with pytest.raises(DomainError):
        adam_step(params, grads, AdamState.for_params(params), lr=0.1)


def test_state_uses_training_settings(params):
    state = AdamState.for_params(params, TrainingSettings(beta1=0.5, beta2=0.75, eps=1e-6))
    assert (state.beta1, state.beta2, state.eps) == (0.5, 0.75, 1e-6)


def test_schedule_is_log_linear():
    sched = LogLinearSchedule(lr_start=1e-4, lr_end=1e-6, epochs=3)
    assert sched(0) == pytest.approx(1e-4)
    assert sched(1) == pytest.approx(1e-5)
    assert sched(2) == pytest.approx(1e-6)
    assert sched(10) == pytest.approx(1e-6)
    assert sched(-1) == pytest.approx(1e-4)
    assert LogLinearSchedule(1e-3, 1e-5, epochs=1)(0) == 1e-3


def test_schedule_is_monotone():
    sched = LogLinearSchedule(1e-4, 1e-5, epochs=30)
    lrs = [sched(e) for e in range(30)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(1e-5)
