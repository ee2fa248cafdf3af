import numpy as np
import pytest

from trailer_uq import model
from trailer_uq.control import InputLog, feedforward_slip
from trailer_uq.integrator import InputSchedule, IntegratorConfig, integrate
from trailer_uq.params import TABLE2_PARAMS, ParameterSet
from trailer_uq.sensitivity import (SensitivityResult, augment, finite_difference, resolve_params,
                                    sensitivities_along)

from systems import decay_system, ramp_system

TIGHT = IntegratorConfig(rtol=1e-10, atol=1e-12)


def test_ramp_sensitivity_is_time():
    # x' = p  =>  dx/dp = t
    te = np.linspace(0.0, 2.0, 9)
    aug = augment(ramp_system(3.0), [0])
    tr = integrate(aug, np.zeros(2), (0.0, 2.0), config=TIGHT, t_eval=te)
    np.testing.assert_allclose(tr.states[:, 0], 3.0 * te, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(tr.states[:, 1], te, rtol=1e-12, atol=1e-12)
    assert aug.names == ("x", "dx_dp0")


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_decay_sensitivity_closed_form(lam):
    # x' = -lam x, x0 = 1  =>  dx/dlam = -t exp(-lam t); the mass factor has no influence
    te = np.linspace(0.0, 3.0, 13)
    aug = augment(decay_system(lam, 2.0), [0, 1])
    tr = integrate(aug, np.array([1.0, 0.0, 0.0]), (0.0, 3.0), config=TIGHT, t_eval=te)
    np.testing.assert_allclose(tr.states[:, 1], -te * np.exp(-lam * te), rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(tr.states[:, 2], 0.0, atol=1e-12)


def test_sensitivity_under_input_switch():
    # x' = -lam x + u with u stepping 1 -> 0 at t = 1, x0 = 0
    sched = InputSchedule([0.0, 1.0], [[1.0], [0.0]])
    lam = 1.0
    aug = augment(decay_system(lam), [0])
    te = np.array([0.5, 1.0, 2.0])
    tr = integrate(aug, np.zeros(2), (0.0, 2.0), sched, TIGHT, t_eval=te)
    h = 1e-6
    exact = np.array([_decay_input_step(lam, t) for t in te])
    oracle = np.array([(_decay_input_step(lam + h, t) - _decay_input_step(lam - h, t)) / (2 * h) for t in te])
    np.testing.assert_allclose(tr.states[:, 0], exact, rtol=1e-8)
    np.testing.assert_allclose(tr.states[:, 1], oracle, rtol=1e-6)


def _decay_input_step(lam, t):
    if t <= 1.0:
        return (1 - np.exp(-lam * t)) / lam
    return (1 - np.exp(-lam)) / lam * np.exp(-lam * (t - 1.0))


def test_augment_validation():
    base = decay_system()
    with pytest.raises(ValueError):
        augment(base, [])
    with pytest.raises(ValueError):
        augment(base, [5])
    with pytest.raises(ValueError):
        augment(augment(base, [0]), [0])


def test_resolve_params():
    assert resolve_params("all_table2") == TABLE2_PARAMS
    assert resolve_params(["h_s", "h_s", "m_s"]) == ("h_s", "m_s")
    with pytest.raises(KeyError):
        resolve_params(["nope"])
    with pytest.raises(ValueError):
        resolve_params("")


@pytest.fixture(scope="module")
def straight_run():
    p = ParameterSet()
    x0 = model.straight_state(15.0)
    t = np.arange(0.0, 3.0, 0.02)
    log = InputLog(t, np.zeros_like(t), np.full_like(t, feedforward_slip(x0, p)))
    return p, x0, log, sensitivities_along(x0, log, p, ["C_alpha_s", "h_s"], (0.0, 3.0))


def test_initial_sensitivity_zero(straight_run):
    *_, res = straight_run
    np.testing.assert_array_equal(res.sens[0], 0.0)


def test_straight_driving_has_no_lateral_sensitivity(straight_run):
    *_, res = straight_run
    for state in ("v_y", "Y_h", "phi_s", "dpsi_t", "alpha_SL"):
        np.testing.assert_allclose(res.sensitivity(state, "C_alpha_s"), 0.0, atol=1e-14)


def test_scaled_equals_nominal_times_unscaled(straight_run):
    p, *_, res = straight_run
    sc = res.as_scaled()
    assert sc.scaled and sc.as_scaled() is sc
    np.testing.assert_array_equal(sc.sens[:, :, 0], res.sens[:, :, 0] * p.C_alpha_s)
    np.testing.assert_array_equal(sc.sens[:, :, 1], res.sens[:, :, 1] * p.h_s)
    np.testing.assert_allclose(sc.as_unscaled().sens, res.sens, rtol=1e-15)


def test_sensitivity_csv_columns(tmp_path, straight_run):
    *_, res = straight_run
    f = tmp_path / "s.csv"
    res.to_csv(f)
    header = f.read_text().splitlines()[0].split(",")
    assert header[:3] == ["t", "v_x", "v_y"]
    assert header[23] == "dv_x_dC_alpha_s"
    assert header[-1] == "dalpha_SR_dh_s"
    assert len(header) == 1 + 22 * 3
    with pytest.raises(ValueError):
        SensitivityResult(res.times, res.states, res.sens[:, :, :1], res.state_names, ("a", "b"), res.nominal)


def test_vehicle_sensitivity_matches_finite_difference():
    # short sinusoidal steer: every selected parameter is excited
    p = ParameterSet()
    x0 = model.straight_state(14.0)
    t = np.arange(0.0, 2.0, 0.02)
    log = InputLog(t, np.deg2rad(2.0) * np.sin(2.0 * t), np.full_like(t, feedforward_slip(x0, p)))
    res = sensitivities_along(x0, log, p, ["C_alpha_s", "h_s"], (0.0, 2.0), TIGHT)
    for k, name in enumerate(res.param_names):
        fd = finite_difference(x0, log, p, name, 1e-4, (0.0, 2.0), TIGHT, res.times)
        s = res.sens[:, :, k]
        scale = np.abs(fd).max(axis=0) + 1e-300
        rel = np.abs(s - fd).max(axis=0) / scale
        significant = scale > 1e-6 * scale.max()
        assert rel[significant].max() < 1e-4, (name, rel.max())


def test_finite_difference_rejects_zero_parameter():
    p = ParameterSet().replace(c2=0.0)
    log = InputLog([0.0, 1.0], [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        finite_difference(model.straight_state(10.0), log, p, "c2")
