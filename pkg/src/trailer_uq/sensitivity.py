"""Forward parameter sensitivities of the vehicle model.

For ``F(x, x', u, p) = 0`` the sensitivities ``s_i = dx/dp_i`` obey the
linear system ``F_x s_i + F_x' s_i' + F_p_i = 0`` along the state
trajectory. The integrator solves the state and all sensitivity blocks
jointly in one step; each block's residual is evaluated exactly by a
complex-step perturbation of ``(x, x', p_i)``.

Closed-loop scenarios are treated in two passes: the controllers run once at
the nominal parameters, and the sensitivities are then integrated open-loop
along the logged input sequence, so ``dx/dp`` describes the plant alone.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import model
from .control import ControllerConfig, InputLog, closed_loop
from .integrator import IntegratorConfig, ResidualSystem, integrate, write_csv
from .params import FIELDS, TABLE2_PARAMS, ParameterSet, param_indices
from .scenarios import Scenario


def augment(system: ResidualSystem, selected_params, error_control: bool = True) -> ResidualSystem:
    """Stack one sensitivity block per selected parameter onto ``system``.

    Parameters
    ----------
    system : base system following the ``args = (p,)`` convention.
    selected_params : parameter names (resolved against the vehicle
        parameter set) or integer positions in ``args[0]``.
    error_control : include the sensitivity blocks in the step error norm.

    Returns
    -------
    ResidualSystem with ``n_base * (1 + n_p)`` states.
    """
    if system.nblocks != 1:
        raise ValueError("system is already augmented")
    sel = list(selected_params)
    if not sel:
        raise ValueError("select at least one parameter")
    if all(isinstance(s, str) for s in sel):
        idx = param_indices(sel)
        labels = tuple(sel)
    else:
        idx = np.asarray(sel, dtype=np.int64)
        labels = tuple(f"p{i}" for i in idx)
    p = np.asarray(system.args[0], dtype=float)
    if np.any(idx < 0) or np.any(idx >= p.size):
        raise ValueError("parameter index out of range")
    nb = system.n_base
    base = system.names or tuple(f"y{i}" for i in range(nb))
    names = list(base)
    for lab in labels:
        names += [f"d{s}_d{lab}" for s in base]
    # absolute tolerance of s_i in units of (state / parameter): a state-level
    # tolerance divided by the parameter magnitude
    scale = np.ones(nb * (1 + len(idx)))
    base_scale = np.ones(nb) if system.atol_scale is None else np.asarray(system.atol_scale, dtype=float)
    scale[:nb] = base_scale
    for k, i in enumerate(idx):
        scale[nb * (k + 1): nb * (k + 2)] = base_scale / max(abs(p[i]), 1e-300)
    return dataclasses.replace(system, nblocks=1 + len(idx), names=tuple(names),
                               n_err=None if error_control else nb, atol_scale=scale,
                               sens_idx=np.ascontiguousarray(idx))


@dataclasses.dataclass
class SensitivityResult:
    """State trajectory and sensitivities ``sens[t, state, param]``.

    ``scaled`` marks sensitivities multiplied by the nominal parameter value
    (response to a 100 % perturbation under linearization).
    """
    times: np.ndarray
    states: np.ndarray
    sens: np.ndarray
    state_names: tuple
    param_names: tuple
    nominal: np.ndarray
    scaled: bool = False
    inputs: InputLog | None = None

    def __post_init__(self):
        nt, n = self.states.shape
        if self.sens.shape != (nt, n, len(self.param_names)):
            raise ValueError("sensitivity array must be n_times x n_states x n_params")

    def sensitivity(self, state: str, param: str) -> np.ndarray:
        return self.sens[:, self.state_names.index(state), self.param_names.index(param)]

    def as_scaled(self) -> "SensitivityResult":
        """Sensitivities multiplied by the nominal parameter values."""
        if self.scaled:
            return self
        return dataclasses.replace(self, sens=self.sens * self.nominal[None, None, :], scaled=True)

    def as_unscaled(self) -> "SensitivityResult":
        if not self.scaled:
            return self
        return dataclasses.replace(self, sens=self.sens / self.nominal[None, None, :], scaled=False)

    def columns(self) -> list[str]:
        return ["t", *self.state_names] + [f"d{s}_d{q}" for q in self.param_names for s in self.state_names]

    def to_csv(self, path) -> None:
        """``t,<state>,d<state>_d<param>`` (parameter-major column order)."""
        nt = self.times.size
        sens = np.transpose(self.sens, (0, 2, 1)).reshape(nt, -1)
        write_csv(path, self.columns(), np.hstack((self.times[:, None], self.states, sens)))


def resolve_params(selected) -> tuple[str, ...]:
    """Expand the ``all_table2`` shortcut and check names."""
    if isinstance(selected, str):
        selected = [s for s in selected.split(",") if s]
    out = []
    for s in selected:
        if s == "all_table2":
            out += [q for q in TABLE2_PARAMS if q not in out]
        elif s not in FIELDS:
            raise KeyError(f"unknown parameter {s!r}")
        elif s not in out:
            out.append(s)
    if not out:
        raise ValueError("select at least one parameter")
    return tuple(out)


def sensitivities_along(x0, inputs: InputLog, p: ParameterSet, selected_params, t_span=None,
                        config: IntegratorConfig | None = None, error_control: bool = True,
                        t_eval=None) -> SensitivityResult:
    """Open-loop state and sensitivities driven by a stored input log."""
    names = resolve_params(selected_params)
    base = model.vehicle_system(p)
    aug = augment(base, names, error_control)
    nb = base.n_base
    if t_span is None:
        t_span = (float(inputs.times[0]), float(inputs.times[-1]))
    t0, t1 = t_span
    if t_eval is None:
        t_eval = inputs.times[(inputs.times >= t0) & (inputs.times <= t1)]
        if t_eval[-1] < t1:
            t_eval = np.append(t_eval, t1)
    y0 = np.zeros(aug.n)
    y0[:nb] = x0
    traj = integrate(aug, y0, (t0, t1), inputs.schedule(), config, t_eval=t_eval, dense=False)
    nt = traj.times.size
    sens = traj.states[:, nb:].reshape(nt, len(names), nb).transpose(0, 2, 1).copy()
    pv = p.to_array()
    return SensitivityResult(traj.times, traj.states[:, :nb].copy(), sens, model.STATE_NAMES, names,
                             pv[param_indices(names)], False, inputs)


def run_sensitivity(scenario: Scenario, selected_params, p: ParameterSet | None = None,
                    config: IntegratorConfig | None = None, controller: ControllerConfig | None = None,
                    scaled: bool = False, error_control: bool = True) -> SensitivityResult:
    """Sensitivities along ``scenario`` at parameters ``p``.

    The scenario is first run closed-loop at ``p`` to fix the input sequence;
    state and sensitivities are then integrated jointly along it.
    """
    p = p or ParameterSet()
    nominal = closed_loop(scenario, p, controller, config)
    res = sensitivities_along(nominal.trajectory.states[0], nominal.inputs, p, selected_params,
                              (0.0, scenario.duration), config, error_control)
    return res.as_scaled() if scaled else res


def finite_difference(x0, inputs: InputLog, p: ParameterSet, name: str, rel_step: float = 1e-4,
                      t_span=None, config: IntegratorConfig | None = None, t_eval=None) -> np.ndarray:
    """Central-difference ``dx/dp`` from two open-loop replays at ``p (1 +- rel_step)``."""
    from .control import replay

    if t_span is None:
        t_span = (float(inputs.times[0]), float(inputs.times[-1]))
    v = getattr(p, name)
    dp = rel_step * abs(v)
    if dp == 0.0:
        raise ValueError(f"parameter {name} is zero; relative step undefined")
    hi = replay(x0, inputs, p.replace(**{name: v + dp}), t_span, config, t_eval)
    lo = replay(x0, inputs, p.replace(**{name: v - dp}), t_span, config, t_eval)
    return (hi.states - lo.states) / (2.0 * dp)
