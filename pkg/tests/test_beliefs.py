import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglearn.beliefs import (
    PLM,
    BeliefState,
    LearningRule,
    Predictor,
    plm_drift,
    predict_price_path,
    update_beliefs,
)
from mfglearn.errors import DomainError, ShapeError


def test_plm_drift_examples():
    assert plm_drift(1.0, [0.0, -1.0]) == pytest.approx(-1.0)
    assert plm_drift(3.7, [0.0, 0.0]) == 0.0
    assert plm_drift(0.5, [0.5, -1.0]) == 0.0


def test_plm_drift_vector_layout():
    p = np.array([0.04, 0.12])
    theta = np.array([0.01, 0.02, -0.5, -0.1])
    np.testing.assert_allclose(plm_drift(p, theta), [0.01 - 0.02, 0.02 - 0.012])
    np.testing.assert_allclose(plm_drift(p, [0.05, 0.1], PLM("reverting", kappa=2.0)), [0.02, -0.04])


def test_plm_dimension_mismatch():
    with pytest.raises(ShapeError):
        plm_drift(np.array([1.0, 2.0]), [0.0, 1.0])


def test_constant_current_prediction():
    out = predict_price_path(Predictor("constant_current"), 0.0, 0.7, None, 5.0, 0.5)
    assert out.values.shape == (11, 1)
    assert np.all(out.values == 0.7)
    assert not out.clipped


def test_linear_plm_exponential_decay():
    pred = Predictor("parametric_plm")
    dt = 0.01
    out = predict_price_path(pred, 0.0, 1.0, [0.0, -1.0], 3.0, dt)
    s = np.arange(out.values.shape[0]) * dt
    np.testing.assert_allclose(out.values[:, 0], np.exp(-s), atol=1e-8)


def test_perfect_foresight_pass_through():
    path = np.column_stack([np.linspace(0.03, 0.05, 21), np.linspace(0.2, 0.1, 21)])
    out = predict_price_path(Predictor("perfect_foresight", path=path), 0.0, path[0], None, 10.0, 0.5)
    assert np.array_equal(out.values, path)
    later = predict_price_path(Predictor("perfect_foresight", path=path), 2.0, path[4], None, 8.0, 0.5)
    assert np.array_equal(later.values, path[4:])


def test_adaptive_level_prediction():
    out = predict_price_path(Predictor("adaptive_level", smoothing=0.2), 1.0, [0.04, 0.1], [0.05, 0.12], 2.0, 0.5)
    np.testing.assert_array_equal(out.values[0], [0.04, 0.1])
    assert np.all(out.values[1:] == [0.05, 0.12])


def test_blow_up_is_clipped_and_flagged():
    pred = Predictor("parametric_plm", price_box=(np.array([0.0]), np.array([2.0])))
    out = predict_price_path(pred, 0.0, 1.0, [0.0, 1.0], 5.0, 0.1)
    assert out.clipped
    assert out.values.max() == 2.0


def test_prediction_leaves_belief_alone():
    belief = BeliefState([0.1, -0.5])
    before = belief.theta.copy()
    predict_price_path(Predictor("parametric_plm"), 0.0, 0.2, belief.theta, 1.0, 0.1)
    assert np.array_equal(belief.theta, before)
    with pytest.raises(ValueError):
        belief.theta[0] = 3.0


def test_ramp_average():
    dt = 1e-3
    rule = LearningRule("decreasing_gain", t0=dt)
    b = BeliefState([0.0])
    n = 2000
    for k in range(n):
        b = update_beliefs(rule, b, k * dt, dt)
    assert abs(b.theta[0] - b.t / 2) <= dt


def _constant_gain_path(alpha, pbar, dt, T):
    rule = LearningRule("constant_gain", gain=alpha)
    b = BeliefState([0.0])
    out = [0.0]
    for _ in range(int(round(T / dt))):
        b = update_beliefs(rule, b, pbar, dt)
        out.append(b.theta[0])
    return np.array(out)


def test_constant_gain_closed_form():
    dt, alpha, pbar = 1e-3, 1.0, 1.0
    th = _constant_gain_path(alpha, pbar, dt, 5.0)
    t = np.arange(th.size) * dt
    assert np.max(np.abs(th - pbar * (1 - np.exp(-alpha * t)))) < 1e-3


def test_constant_gain_error_is_first_order():
    errs = []
    for dt in (1e-2, 5e-3):
        th = _constant_gain_path(0.8, 1.3, dt, 4.0)
        t = np.arange(th.size) * dt
        errs.append(np.max(np.abs(th - 1.3 * (1 - np.exp(-0.8 * t)))))
    assert 0.4 < errs[1] / errs[0] < 0.6


def test_decreasing_gain_doubling_ratio():
    dt, pbar, t0 = 0.01, 0.7, 1.0
    rule = LearningRule("decreasing_gain", t0=t0)
    b = BeliefState([3.0])
    errs = [abs(b.theta[0] - pbar)]
    for _ in range(int(64 / dt)):
        b = update_beliefs(rule, b, pbar, dt)
        errs.append(abs(b.theta[0] - pbar))
    errs = np.array(errs)
    burn = int(t0 / dt)
    assert np.all(np.diff(errs[burn:]) <= 0)
    for t in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0):
        k = int(round(t / dt))
        assert errs[2 * k] <= 0.75 * errs[k]


@settings(max_examples=50)
@given(
    st.sampled_from(["decreasing_gain", "constant_gain"]),
    st.floats(-5, 5),
    st.floats(0.001, 1.0),
    st.floats(0, 100),
)
def test_level_rules_fix_consistent_beliefs(kind, pbar, dt, t):
    rule = LearningRule(kind, gain=0.3)
    b = BeliefState([pbar], t=t)
    assert update_beliefs(rule, b, pbar, dt).theta[0] == pbar


def test_rls_keeps_zero_residual_in_constant_environment():
    rule = LearningRule("recursive_least_squares")
    pbar = 0.8
    theta = np.array([0.4, -0.5])  # 0.4 - 0.5 * 0.8 = 0
    b = BeliefState(theta)
    for _ in range(50):
        b = update_beliefs(rule, b, pbar, 0.1)
    assert abs(plm_drift(pbar, b.theta)) < 1e-12
    assert not b.identified


def test_rls_recovers_linear_law():
    # observed p follows dp/dt = a + b p exactly; RLS on the Euler increments
    # recovers the discrete-time slope
    rule = LearningRule("recursive_least_squares", t0=0.1)
    a, bb, dt = 0.3, -0.6, 0.01
    rng = np.random.default_rng(3)
    p = 0.0
    belief = BeliefState([0.0, 0.0])
    for _ in range(20000):
        belief = update_beliefs(rule, belief, p, dt)
        p = p + dt * (a + bb * p) + 0.05 * np.sqrt(dt) * rng.normal()
    assert belief.identified
    np.testing.assert_allclose(belief.theta, [a, bb], atol=0.15)


def test_rule_validation():
    with pytest.raises(DomainError):
        LearningRule("constant_gain", gain=1.5)
    with pytest.raises(DomainError):
        LearningRule(t0=0.0)
    with pytest.raises(DomainError):
        Predictor("adaptive_level", smoothing=0.0)
