"""Prediction-error estimation of vehicle parameters.

The predictor is the noise-free model driven by the recorded inputs; the
loss is the sum of squared output errors, optionally weighted per output
by the inverse noise level. Parameters are fitted by
Levenberg-Marquardt in log coordinates (which keeps them positive), with
the output Jacobian taken from forward sensitivities.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import model
from .control import InputLog, closed_loop, replay
from .integrator import IntegrationError, IntegratorConfig, write_csv
from .params import ParameterSet
from .scenarios import Scenario
from .sensitivity import sensitivities_along

DEFAULT_OUTPUTS: tuple[str, ...] = ("v_x", "v_y", "dpsi_t", "dpsi_s", "phi_t", "phi_s")


@dataclasses.dataclass
class Dataset:
    """Sampled inputs and measured outputs.

    ``inputs[k]`` is held from ``times[k]`` to ``times[k+1]``. ``x0`` is the
    initial state of the predictor; when absent, straight driving at the
    first measured ``v_x`` is assumed.
    """
    times: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    output_names: tuple
    x0: np.ndarray | None = None
    noise_std: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(self.times.size, -1)
        self.output_names = tuple(self.output_names)
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(self.times.size, len(self.output_names))
        if self.times.size < 2 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("dataset times must be strictly increasing (at least two samples)")
        if self.inputs.shape != (self.times.size, model.N_INPUTS):
            raise ValueError("inputs must have one (delta_f, kappa) row per sample")
        for name in self.output_names:
            if name not in model.STATE_INDEX:
                raise KeyError(f"unknown output {name!r}; outputs are state names")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)

    @property
    def output_index(self) -> np.ndarray:
        return np.array([model.STATE_INDEX[n] for n in self.output_names], dtype=np.int64)

    def initial_state(self) -> np.ndarray:
        if self.x0 is not None:
            return self.x0
        if "v_x" not in self.output_names:
            raise ValueError("dataset has no initial state and no measured v_x")
        return model.straight_state(float(self.outputs[0, self.output_names.index("v_x")]))

    def input_log(self) -> InputLog:
        return InputLog(self.times, self.inputs[:, 0], self.inputs[:, 1])

    def to_csv(self, path) -> None:
        header = ["t", "u_delta_f", "u_kappa", *self.output_names]
        write_csv(path, header, np.column_stack((self.times, self.inputs, self.outputs)))

    @classmethod
    def from_csv(cls, path, x0=None) -> "Dataset":
        """Read ``t,u_delta_f,u_kappa,<outputs...>``; malformed rows raise naming the line."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["t", "u_delta_f", "u_kappa"]:
            raise ValueError(f"{path}: header must start with t,u_delta_f,u_kappa")
        header = rows[0]
        data = []
        for line, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
            try:
                data.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}: line {line}: {exc}") from None
        arr = np.array(data, dtype=float).reshape(-1, len(header))
        return cls(arr[:, 0], arr[:, 1:3], arr[:, 3:], tuple(header[3:]), x0)


def synthetic_dataset(scenario: Scenario, p_true: ParameterSet | None = None, outputs=DEFAULT_OUTPUTS,
                      noise: float = 0.0, seed: int | None = None,
                      config: IntegratorConfig | None = None) -> Dataset:
    """Closed-loop run at ``p_true``; outputs sampled at the control ticks.

    ``noise`` is the standard deviation of additive Gaussian noise as a
    fraction of each output's range.
    """
    p_true = p_true or ParameterSet()
    res = closed_loop(scenario, p_true, integrator_config=config)
    log = res.inputs
    idx = np.array([model.STATE_INDEX[n] for n in outputs], dtype=np.int64)
    traj = res.trajectory
    y = traj.states[: log.times.size, idx].copy()
    std = None
    if noise > 0.0:
        std = noise * (y.max(axis=0) - y.min(axis=0))
        rng = np.random.default_rng(seed)
        y = y + rng.standard_normal(y.shape) * std
    return Dataset(log.times, np.column_stack((log.delta_f, log.kappa)), y, tuple(outputs),
                   traj.states[0].copy(), std)


def _span(dataset: Dataset):
    return float(dataset.times[0]), float(dataset.times[-1])


def predict_outputs(p: ParameterSet, dataset: Dataset, config: IntegratorConfig | None = None) -> np.ndarray:
    """Noise-free predictor outputs at the dataset times, shape ``(n_times, n_outputs)``."""
    if not dataset.output_names:
        return np.empty((dataset.times.size, 0))
    try:
        traj = replay(dataset.initial_state(), dataset.input_log(), p, _span(dataset), config, dataset.times)
    except IntegrationError as exc:
        raise IntegrationError(f"{exc} (parameters {p.to_dict()})", exc.t, exc.status) from exc
    return traj.states[:, dataset.output_index]


def loss(p: ParameterSet, dataset: Dataset, config: IntegratorConfig | None = None, weights=None) -> float:
    """``V_N = sum_t ||W (y(t) - yhat(t))||^2`` with per-output weights ``W`` (default 1)."""
    e = dataset.outputs - predict_outputs(p, dataset, config)
    if weights is not None:
        e = e * np.asarray(weights, dtype=float)
    return float(np.sum(e * e))


def output_weights(dataset: Dataset, weighting="auto") -> np.ndarray:
    """Per-output residual weights.

    ``"none"`` gives the plain loss; ``"noise"`` divides each output by its
    declared noise standard deviation (maximum-likelihood weighting for
    independent Gaussian noise); ``"auto"`` uses the noise description when
    the dataset has one. An array is taken as the weights themselves.
    """
    m = len(dataset.output_names)
    if isinstance(weighting, str):
        if weighting not in ("auto", "none", "noise"):
            raise ValueError("weighting must be 'auto', 'none', 'noise' or an array")
        if weighting == "none" or (weighting == "auto" and dataset.noise_std is None):
            return np.ones(m)
        if dataset.noise_std is None:
            raise ValueError("noise weighting needs a dataset noise description")
        std = np.asarray(dataset.noise_std, dtype=float)
        if std.shape != (m,) or np.any(std <= 0.0):
            raise ValueError("noise_std must hold one positive value per output")
        return 1.0 / std
    w = np.asarray(weighting, dtype=float)
    if w.shape != (m,) or np.any(w <= 0.0):
        raise ValueError("weights must hold one positive value per output")
    return w


def fit_percent(y, yhat) -> np.ndarray:
    """Normalized-RMSE fit ``100 (1 - ||y - yhat|| / ||y - mean(y)||)`` per output column."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    num = np.linalg.norm(y - yhat, axis=0)
    den = np.linalg.norm(y - y.mean(axis=0), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0.0, 100.0 * (1.0 - num / den), np.where(num == 0.0, 100.0, -np.inf))


# fit statuses that count as convergence
CONVERGED = ("gtol", "xtol")


@dataclasses.dataclass
class FitOptions:
    gtol: float = 1e-6          # cosine between residual and Jacobian columns
    xtol: float = 1e-6          # step in log-parameters (relative parameter change)
    max_iter: int = 50
    max_retries: int = 10       # consecutive rejected steps before "stalled"
    lambda0: float = 1e-3
    ident_tol: float = 1e-8     # relative Jacobian column norm below which a parameter is unidentifiable
    weighting: object = "auto"  # see ``output_weights``
    integrator: IntegratorConfig = dataclasses.field(default_factory=lambda: IntegratorConfig(rtol=1e-8, atol=1e-10))


@dataclasses.dataclass
class FitReport:
    p_hat: ParameterSet
    free_params: tuple
    V_init: float
    V_final: float
    fit: dict
    status: str
    iterations: list
    unidentifiable: tuple = ()
    elapsed: float = 0.0
    weights: list | None = None

    def estimates(self) -> dict:
        return {n: getattr(self.p_hat, n) for n in self.free_params}

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "free_params": list(self.free_params),
            "estimates": self.estimates(),
            "unidentifiable": list(self.unidentifiable),
            "weights": self.weights,
            "V_init": self.V_init,
            "V_final": self.V_final,
            "fit_percent": self.fit,
            "iterations": self.iterations,
            "elapsed_s": self.elapsed,
            "p_hat": self.p_hat.to_dict(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _residual_and_jacobian(p: ParameterSet, dataset: Dataset, free, config, weights):
    """Weighted residual ``W (y - yhat)`` (flattened) and ``W d yhat / d log p``."""
    res = sensitivities_along(dataset.initial_state(), dataset.input_log(), p, free, _span(dataset),
                              config, t_eval=dataset.times)
    idx = dataset.output_index
    yhat = res.states[:, idx]
    r = ((dataset.outputs - yhat) * weights).ravel()
    # d yhat / d log p_i = p_i d yhat / d p_i
    J = (res.sens[:, idx, :] * res.nominal[None, None, :] * weights[None, :, None]).reshape(-1, len(free))
    return r, J, yhat


def fit(dataset: Dataset, p_init: ParameterSet, free_params, options: FitOptions | None = None) -> FitReport:
    """Levenberg-Marquardt prediction-error fit of ``free_params``.

    Damping ``lambda`` scales the diagonal of ``J^T J``; it starts at
    ``lambda0``, grows by 10 on a rejected step and shrinks by 10 on an
    accepted one. The minimized loss (reported as ``V_init``/``V_final``)
    uses the weights selected by ``options.weighting``.
    """
    opts = options or FitOptions()
    free = tuple(free_params)
    if not free:
        raise ValueError("free_params must not be empty")
    for name in free:
        if getattr(p_init, name) <= 0.0:
            raise ValueError(f"{name} must be positive to be estimated")
    if not dataset.output_names:
        raise ValueError("dataset has no outputs")
    t_start = time.perf_counter()
    cfg = opts.integrator
    w = output_weights(dataset, opts.weighting)
    p = p_init
    r, J, _ = _residual_and_jacobian(p, dataset, free, cfg, w)
    V = float(r @ r)
    V_init = V
    col = np.linalg.norm(J, axis=0)
    scale_ref = max(np.linalg.norm(dataset.outputs * w), 1e-300)
    active = col > opts.ident_tol * scale_ref
    unident = tuple(n for n, a in zip(free, active) if not a)
    log = [{"iter": 0, "V": V, "lambda": opts.lambda0, "accepted": True, "params": _params_of(p, free)}]
    lam = opts.lambda0
    status = "max_iter"
    retries = 0
    theta = np.log([getattr(p, n) for n in free])
    it = 0
    if not np.any(active):
        status = "unidentifiable"
    while status == "max_iter" and it < opts.max_iter:
        it += 1
        Ja = J[:, active]
        g = Ja.T @ r
        rn = np.sqrt(V)
        cn = np.linalg.norm(Ja, axis=0)
        if rn == 0.0 or np.max(np.abs(g) / (cn * rn)) < opts.gtol:
            status = "gtol"
            break
        A = Ja.T @ Ja
        accepted = False
        while not accepted:
            step = np.linalg.solve(A + lam * np.diag(np.diag(A)), g)
            theta_new = theta.copy()
            theta_new[active] += step
            # unidentifiable parameters keep their exact initial values
            p_new = p.replace(**{n: float(np.exp(v)) for n, v, a in zip(free, theta_new, active) if a})
            try:
                r_new, J_new, _ = _residual_and_jacobian(p_new, dataset, free, cfg, w)
                V_new = float(r_new @ r_new)
            except (IntegrationError, ValueError):
                V_new = np.inf
            if V_new < V:
                accepted = True
                retries = 0
                theta, p, r, J, V = theta_new, p_new, r_new, J_new, V_new
                lam = max(lam / 10.0, 1e-12)
            else:
                retries += 1
                lam *= 10.0
                if np.max(np.abs(step)) < opts.xtol:
                    # no resolvable improvement left at this step length
                    status = "xtol"
            log.append({"iter": it, "V": V_new if np.isfinite(V_new) else None, "lambda": lam,
                        "accepted": accepted, "params": _params_of(p_new, free)})
            if status == "xtol":
                break
            if not accepted and retries >= opts.max_retries:
                status = "stalled"
                break
        if status != "max_iter":
            break
        if np.max(np.abs(step)) < opts.xtol:
            status = "xtol"
    yhat = predict_outputs(p, dataset, cfg)
    fits = fit_percent(dataset.outputs, yhat)
    return FitReport(p, free, V_init, V, {n: float(f) for n, f in zip(dataset.output_names, fits)},
                     status, log, unident, time.perf_counter() - t_start, [float(v) for v in w])


def _params_of(p: ParameterSet, free) -> dict:
    return {n: getattr(p, n) for n in free}
