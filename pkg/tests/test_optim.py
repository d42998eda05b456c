import numpy as np
import pytest

from skillbc.errors import ConfigError, TrainingError
from skillbc.nn import Param
from skillbc.optim import Adam, AdamState, adam_step


def test_zero_gradients_leave_parameters_unchanged():
    rng = np.random.default_rng(0)
    params = [Param("a", rng.standard_normal((3, 2))), Param("b", rng.standard_normal(4))]
    before = {p.name: p.data.copy() for p in params}
    opt = Adam(params, lr=0.1)
    for _ in range(5):
        opt.step({p.name: np.zeros_like(p.data) for p in params})
    for p in params:
        assert np.array_equal(p.data, before[p.name])


def test_first_step_magnitude_is_lr_over_one_plus_eps():
    p = Param("p", np.array([0.0]))
    opt = Adam([p], lr=1e-3, epsilon=1e-8)
    opt.step({"p": np.array([1.0])})
    # mhat = vhat = 1 on step one, so the update is lr / (1 + eps)
    assert p.data[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=0, abs=1e-18)
    assert opt.state.step == 1


def test_hundred_steps_match_reference_recurrence():
    # independent reference implementation of the published recurrence
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    theta_ref = np.array([2.0, -3.0, 0.5])
    m = np.zeros(3)
    v = np.zeros(3)
    ref_trace = []
    for t in range(1, 101):
        g = 2.0 * (theta_ref - 1.0)  # quadratic centred at 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta_ref = theta_ref - lr * mhat / (np.sqrt(vhat) + eps)
        ref_trace.append(theta_ref.copy())

    p = Param("p", np.array([2.0, -3.0, 0.5]))
    opt = Adam([p], lr=lr, beta1=b1, beta2=b2, epsilon=eps)
    for t in range(100):
        opt.step({"p": 2.0 * (p.data - 1.0)})
        assert np.max(np.abs(p.data - ref_trace[t])) <= 1e-12


def test_nonfinite_gradient_raises():
    p = Param("p", np.zeros(2))
    opt = Adam([p], lr=0.1)
    with pytest.raises(TrainingError):
        opt.step({"p": np.array([np.nan, 0.0])})


def test_bad_betas_rejected():
    with pytest.raises(ConfigError):
        AdamState(lr=0.1, beta1=1.0)


def test_shape_mismatch_rejected():
    p = Param("p", np.zeros((2, 2)))
    state = AdamState(lr=0.1)
    with pytest.raises(ConfigError):
        adam_step(state, [p], {"p": np.zeros(3)})


def test_step_counter_increments_once_per_call():
    p = Param("p", np.zeros(1))
    opt = Adam([p], lr=0.1)
    for expected in range(1, 4):
        opt.step({"p": np.ones(1)})
        assert opt.state.step == expected
