import json

import numpy as np
import pytest

from trailer_uq import model
from trailer_uq.control import feedforward_slip
from trailer_uq.estimation import (CONVERGED, Dataset, FitOptions, fit, fit_percent, loss, output_weights,
                                   predict_outputs, synthetic_dataset)
from trailer_uq.params import ParameterSet
from trailer_uq.scenarios import builtin


def _straight_dataset(p, n=200, dt=0.02, v=10.0, kappa=None, outputs=("v_x",)):
    x0 = model.straight_state(v)
    if kappa is None:
        kappa = feedforward_slip(x0, p)
    t = np.arange(n) * dt
    u = np.column_stack((np.zeros(n), np.full(n, kappa)))
    ds = Dataset(t, u, np.zeros((n, len(outputs))), outputs, x0)
    ds.outputs = predict_outputs(p, ds)
    return ds


@pytest.fixture(scope="module")
def sweep_data():
    return synthetic_dataset(builtin("sweep"))


def test_loss_examples(nominal):
    ds = _straight_dataset(nominal, n=50)
    assert loss(nominal, ds) == 0.0
    one = Dataset([0.0, 1.0], np.zeros((2, 2)), [[1.0], [0.0]], ("v_y",), model.straight_state(10.0))
    # y = (1, 0) against a predictor that stays at 0 on straight rolling
    assert loss(nominal, one) == pytest.approx(1.0, abs=1e-20)


def test_loss_chi_square_oracle(nominal):
    n, std = 1000, 0.01
    ds = _straight_dataset(nominal, n=n)
    rng = np.random.default_rng(2024)
    ds.outputs = ds.outputs + rng.normal(0.0, std, ds.outputs.shape)
    V = loss(nominal, ds)
    mean, sd = n * std ** 2, np.sqrt(2.0 * n) * std ** 2
    assert abs(V - mean) < 3.0 * sd


def test_predictor_self_consistency(nominal, sweep_data):
    yhat = predict_outputs(nominal, sweep_data)
    scale = np.abs(sweep_data.outputs).max(axis=0)
    assert (np.abs(yhat - sweep_data.outputs).max(axis=0) / scale).max() < 1e-4


def test_predictor_monotone_speed_under_drive_slip(nominal):
    p = nominal
    kappa = feedforward_slip(model.straight_state(10.0), p) + 0.01
    ds = _straight_dataset(p, n=100, kappa=kappa)
    assert np.all(np.diff(ds.outputs[:, 0]) > 0.0)


def test_predictor_empty_output_map(nominal):
    ds = Dataset([0.0, 0.5], np.zeros((2, 2)), np.zeros((2, 0)), (), model.straight_state(10.0))
    assert predict_outputs(nominal, ds).shape == (2, 0)


def test_fit_percent():
    y = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    np.testing.assert_array_equal(fit_percent(y, y), [100.0, 100.0])
    f = fit_percent(y, np.zeros_like(y))
    assert f[0] == pytest.approx(100.0 * (1.0 - np.sqrt(5.0) / np.sqrt(2.0)))
    assert f[1] == -np.inf
    assert np.all(fit_percent(y, y + 0.1)[:1] <= 100.0)


def test_output_weights(sweep_data):
    assert np.all(output_weights(sweep_data) == 1.0)
    with pytest.raises(ValueError):
        output_weights(sweep_data, "noise")
    with pytest.raises(ValueError):
        output_weights(sweep_data, "bogus")
    noisy = Dataset(sweep_data.times, sweep_data.inputs, sweep_data.outputs, sweep_data.output_names,
                    sweep_data.x0, np.full(len(sweep_data.output_names), 0.5))
    np.testing.assert_array_equal(output_weights(noisy), 2.0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset([0.0, 0.0], np.zeros((2, 2)), np.zeros((2, 1)), ("v_x",))
    with pytest.raises(KeyError):
        Dataset([0.0, 1.0], np.zeros((2, 2)), np.zeros((2, 1)), ("speed",))
    with pytest.raises(ValueError):
        Dataset([0.0, 1.0], np.zeros((2, 2)), np.zeros((2, 1)), ("v_y",)).initial_state()


def test_dataset_csv_roundtrip_and_malformed_line(tmp_path, sweep_data):
    f = tmp_path / "d.csv"
    sweep_data.to_csv(f)
    back = Dataset.from_csv(f, sweep_data.x0)
    np.testing.assert_array_equal(back.outputs, sweep_data.outputs)
    assert back.output_names == sweep_data.output_names
    lines = f.read_text().splitlines()
    lines[4] = lines[4].rsplit(",", 1)[0]
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 5"):
        Dataset.from_csv(f)
    lines[4] = "1,x,0" + ",0" * len(sweep_data.output_names)
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 5"):
        Dataset.from_csv(f)


def test_fit_requires_free_params(nominal, sweep_data):
    with pytest.raises(ValueError):
        fit(sweep_data, nominal, [])


def test_fit_recovers_parameters_noise_free(nominal, sweep_data):
    free = ("C_alpha_s", "sigma_s")
    p0 = nominal.replace(**{n: 1.2 * getattr(nominal, n) for n in free})
    rep = fit(sweep_data, p0, free)
    assert rep.status in CONVERGED
    for n in free:
        assert abs(getattr(rep.p_hat, n) / getattr(nominal, n) - 1.0) < 1e-3
    assert min(rep.fit.values()) >= 95.0
    assert rep.V_final <= rep.V_init
    accepted = [e["V"] for e in rep.iterations if e["accepted"]]
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))
    data = json.loads(rep.to_json())
    assert data["status"] == rep.status and set(data["estimates"]) == set(free)


def test_unidentifiable_parameter_left_at_initial_value(nominal):
    ds = _straight_dataset(nominal, n=150, outputs=("v_x", "v_y", "phi_s"))
    p0 = nominal.replace(C_alpha_s=1.2 * nominal.C_alpha_s, m_s=1.05 * nominal.m_s)
    rep = fit(ds, p0, ("C_alpha_s", "m_s"))
    assert rep.unidentifiable == ("C_alpha_s",)
    assert rep.p_hat.C_alpha_s == p0.C_alpha_s
    assert rep.V_final <= rep.V_init


def test_fit_stalled_or_max_iter_is_not_an_exception(nominal, sweep_data):
    p0 = nominal.replace(sigma_s=1.2 * nominal.sigma_s)
    rep = fit(sweep_data, p0, ("sigma_s",), FitOptions(max_iter=1))
    assert rep.status in ("max_iter", "gtol", "xtol", "stalled")
    assert rep.V_final <= rep.V_init
