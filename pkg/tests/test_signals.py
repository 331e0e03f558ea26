import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit
from sklearn.linear_model import LogisticRegression

from beliefroute.signals import (CalibrationState, HardSignalState, SoftCalibration,
                                 build_observation_vector, calibrate_hard, calibrate_soft,
                                 fit_soft_calibration, observation_arrays, push_hard,
                                 windowed_hard_values)


def _fill(W, bits):
    st_ = HardSignalState(W)
    for b in bits:
        st_ = push_hard(st_, b)
    return st_


def test_push_examples():
    assert push_hard(HardSignalState(3), True).count == 1
    s = _fill(3, [1, 1, 0])
    assert s.count == 2
    s = push_hard(s, True)
    assert s.window == (True, False, True) and s.count == 2
    s = _fill(20, [1] * 20)
    assert s.count == 20
    assert push_hard(s, False).count == 19


def test_calibrate_hard_examples():
    assert calibrate_hard(HardSignalState(20, 1, 1, (), 10), 20) == pytest.approx(0.5)
    assert calibrate_hard(HardSignalState(20, 1, 1, (), 0), 20) == pytest.approx(1 / 22)
    assert calibrate_hard(HardSignalState(20, 1, 1, (), 20), 20) == pytest.approx(21 / 22)


def test_calibrate_hard_cold_start_uses_window_length():
    s = _fill(20, [1, 1, 0])
    assert calibrate_hard(s) == pytest.approx((1 + 2) / (2 + 3))


def test_calibrate_hard_rejects_zero_denominator():
    with pytest.raises(ValueError):
        calibrate_hard(HardSignalState(1, 0.0, 0.0))


@given(st.integers(1, 25), st.lists(st.booleans(), max_size=80))
def test_push_count_matches_recount(W, bits):
    s = _fill(W, bits)
    assert len(s.window) <= W
    assert s.count == sum(s.window) == sum(bits[-W:]) if bits else s.count == 0


@given(st.integers(1, 30), st.floats(0.01, 5), st.floats(0.01, 5))
def test_calibrate_hard_interior_and_monotone(W, a0, b0):
    vals = [calibrate_hard(HardSignalState(W, a0, b0, (), xi), W) for xi in range(W + 1)]
    assert all(0 < v < 1 for v in vals)
    assert all(x <= y for x, y in zip(vals, vals[1:]))


@given(st.integers(1, 12), st.lists(st.lists(st.booleans(), min_size=2, max_size=2),
                                    min_size=1, max_size=40))
def test_windowed_values_match_sequential(W, rows):
    h = np.array(rows, dtype=float)
    vec = windowed_hard_values(h, W, [1.0, 2.0], [1.0, 0.5])
    for j, (a0, b0) in enumerate([(1.0, 1.0), (2.0, 0.5)]):
        s = HardSignalState(W, a0, b0)
        for t in range(len(rows)):
            s = push_hard(s, rows[t][j])
            assert vec[t, j] == pytest.approx(calibrate_hard(s), abs=1e-12)


def test_calibrate_soft_examples():
    assert calibrate_soft(0.0, SoftCalibration(1, 0)) == 0.5
    assert calibrate_soft(123.4, SoftCalibration(0, 0)) == 0.5
    assert calibrate_soft(1.0, SoftCalibration(2, -1)) == pytest.approx(0.7310585786300049, abs=1e-12)
    assert calibrate_soft(1e6, SoftCalibration(20, 0)) == 1 - 1e-9
    with pytest.raises(ValueError):
        SoftCalibration(-0.5, 0)


@given(st.floats(0, 20), st.floats(-20, 20), st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_calibrate_soft_monotone(a, b, raw):
    raw = np.sort(np.asarray(raw))
    z = calibrate_soft(raw, SoftCalibration(a, b))
    assert np.all(np.diff(z) >= 0)
    assert np.all((z > 0) & (z < 1))


def test_fit_soft_independent_labels():
    rng = np.random.default_rng(0)
    raw = rng.random(10_000)
    y = rng.random(10_000) < 0.5
    cal = fit_soft_calibration(raw, y)
    assert abs(cal.a) < 0.1 or cal.a == 0.0
    assert abs(cal.b) < 0.1
    # oracle: unconstrained sklearn fit projected to a >= 0
    ref = LogisticRegression(C=np.inf).fit(raw[:, None], y)
    a_ref = max(ref.coef_[0, 0], 0.0)
    assert cal.a == pytest.approx(a_ref, abs=1e-4)


def test_fit_soft_matches_sklearn_on_informative_data():
    rng = np.random.default_rng(1)
    raw = rng.random(5000)
    y = rng.random(5000) < expit(4 * raw - 2)
    cal = fit_soft_calibration(raw, y)
    ref = LogisticRegression(C=np.inf, tol=1e-10, max_iter=1000).fit(raw[:, None], y)
    assert cal.a == pytest.approx(ref.coef_[0, 0], abs=1e-4)
    assert cal.b == pytest.approx(ref.intercept_[0], abs=1e-4)


def test_fit_soft_negative_slope_projected():
    rng = np.random.default_rng(2)
    raw = rng.random(4000)
    y = rng.random(4000) < expit(-3 * raw + 1)
    assert fit_soft_calibration(raw, y).a == 0.0


def test_fit_soft_separable_hits_clamp():
    raw = np.linspace(0, 1, 200)
    y = raw > 0.5
    cal = fit_soft_calibration(raw, y)
    assert cal.a == pytest.approx(20.0)
    # the likelihood keeps improving with the slope: a wider clamp moves it further
    from beliefroute.signals import fit_logistic
    w, _ = fit_logistic(raw[:, None], y, slope_bounds=(0, 40))
    assert w[0] > 20


def test_fit_soft_degenerate():
    with pytest.raises(ValueError, match="degenerate calibration split"):
        fit_soft_calibration([0.1, 0.5, 0.9], [1, 1, 1])


def test_build_observation_vector():
    z = build_observation_vector([0.5] * 4, [0.5] * 2)
    assert z.shape == (6,) and np.all(z == 0.5)
    with pytest.raises(ValueError):
        build_observation_vector([0.5] * 3, [0.5] * 2)


def test_calibration_state_matches_batch():
    rng = np.random.default_rng(3)
    hard = rng.random((50, 4)) < 0.6
    soft = rng.random((50, 2))
    cals = [{"a": 2.0, "b": -1.0}, {"a": 0.5, "b": 0.3}]
    state = CalibrationState.create(20, 4, 2, soft_cal=cals)
    seq = np.array([state.observe(hard[t], soft[t]) for t in range(50)])
    zh, zg = observation_arrays(hard, soft, 20, soft_cal=cals)
    assert np.allclose(seq, np.concatenate([zh, zg], axis=-1), atol=1e-12)
    assert state.counts() == [int(hard[-20:, j].sum()) for j in range(4)]
    with pytest.raises(ValueError):
        state.observe(hard[0][:3], soft[0])
