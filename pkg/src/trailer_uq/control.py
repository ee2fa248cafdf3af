"""Closed-loop drivers: pure-pursuit steering and a PI slip-ratio speed loop.

The controller samples the plant at a fixed rate and holds its command
until the next tick. Every command is logged, so a run can be replayed
open-loop from the log; with the same parameters the replay reproduces the
closed-loop trajectory bit for bit (same kernel calls, same breakpoints).
"""
from __future__ import annotations

import copy
import csv
import dataclasses
from pathlib import Path

import numpy as np

from . import model
from .integrator import BDFIntegrator, InputSchedule, IntegratorConfig, Trajectory, integrate, write_csv
from .params import ParameterSet
from .scenarios import EndOfPath, ReferencePath, Scenario


@dataclasses.dataclass
class ControllerConfig:
    K_p: float = 0.05       # [1/(m/s)]
    K_i: float = 0.02       # [1/m]
    I_max: float = 5.0      # [m]
    L0: float = 2.0         # [m]
    k_v: float = 0.5        # [s]
    L_min: float = 5.0      # [m]
    L_max: float = 30.0     # [m]
    rate_hz: float = 50.0
    delta_max: float = model.DELTA_MAX
    kappa_max: float = model.KAPPA_MAX
    reference_point: str = "front_axle"
    # start the integral at the slip that balances the resistances at t0
    warm_start: bool = True

    def __post_init__(self):
        if self.reference_point not in ("front_axle", "hitch"):
            raise ValueError("reference_point must be 'front_axle' or 'hitch'")
        if not (self.rate_hz > 0 and self.I_max >= 0 and self.L_min <= self.L_max):
            raise ValueError("invalid controller configuration")


@dataclasses.dataclass
class ControllerState:
    config: ControllerConfig
    integral: float = 0.0
    last_command: tuple = (0.0, 0.0)


def lookahead_distance(v_target: float, config: ControllerConfig | None = None) -> float:
    """Speed-dependent lookahead ``clamp(L0 + k_v v, L_min, L_max)``."""
    c = config or ControllerConfig()
    if v_target < 0.0:
        raise ValueError("v_target must be >= 0")
    return float(min(max(c.L0 + c.k_v * v_target, c.L_min), c.L_max))


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def pure_pursuit(pose, path: ReferencePath, L_d: float, wheelbase: float,
                 delta_max: float = model.DELTA_MAX, hint: int = 0, window: int | None = None):
    """Steering toward the path point ``L_d`` ahead of the pose's projection.

    Parameters
    ----------
    pose : (x, y, psi) of the reference point and heading.
    path : reference polyline.
    L_d : lookahead distance [m].
    wheelbase : tractor wheelbase [m].

    Returns
    -------
    delta_f, s_proj, segment index
    """
    x, y, psi = pose
    s_proj, seg, _ = path.project((x, y), hint, window)
    s_goal = s_proj + L_d
    if s_goal > path.length:
        raise EndOfPath(f"lookahead point s = {s_goal:.1f} m beyond path end {path.length:.1f} m")
    gx, gy = path.point_at(s_goal)
    eta = _wrap(np.arctan2(gy - y, gx - x) - psi)
    gamma = 2.0 * np.sin(eta) / L_d
    delta = float(np.clip(np.arctan(wheelbase * gamma), -delta_max, delta_max))
    return delta, s_proj, seg


def pi_slip(e: float, dt: float, state: ControllerState) -> float:
    """One PI update on the speed error ``e`` with a clamped integral (anti-windup)."""
    if not dt > 0.0:
        raise ValueError("dt must be > 0")
    c = state.config
    state.integral = float(np.clip(state.integral + e * dt, -c.I_max, c.I_max))
    return float(np.clip(c.K_p * e + c.K_i * state.integral, -c.kappa_max, c.kappa_max))


def feedforward_slip(x, p: ParameterSet) -> float:
    """Drive slip that balances the longitudinal resistances in state ``x`` (straight driving)."""
    f0 = model.rhs(x, np.zeros(2), p)[0]
    f1 = model.rhs(x, np.array([0.0, 1.0]), p)[0]
    # the drive force is linear in the commanded slip
    return float(-f0 / (f1 - f0))


@dataclasses.dataclass
class InputLog:
    times: np.ndarray
    delta_f: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.delta_f = np.asarray(self.delta_f, dtype=float)
        self.kappa = np.asarray(self.kappa, dtype=float)
        if not (self.times.shape == self.delta_f.shape == self.kappa.shape):
            raise ValueError("input log columns must have equal length")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("input log times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def schedule(self) -> InputSchedule:
        return InputSchedule(self.times, np.column_stack((self.delta_f, self.kappa)))

    def to_csv(self, path) -> None:
        write_csv(path, ["t", "delta_f", "kappa"], np.column_stack((self.times, self.delta_f, self.kappa)))

    @classmethod
    def from_csv(cls, path) -> "InputLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t", "delta_f", "kappa"]:
            raise ValueError(f"{path}: expected header t,delta_f,kappa")
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, 0], data[:, 1], data[:, 2])


@dataclasses.dataclass
class ClosedLoopResult:
    trajectory: Trajectory
    inputs: InputLog
    v_target: np.ndarray
    cross_track: np.ndarray
    speed_reduction: np.ndarray


class ClosedLoopSimulator:
    """Fixed-rate sampled controller around the implicit plant model.

    The target speed is the path speed at the projection minus
    ``speed_reduction`` (set externally by the mitigation loop), floored at
    ``v_floor``.
    """

    def __init__(self, scenario: Scenario, p: ParameterSet, config: ControllerConfig | None = None,
                 integrator_config: IntegratorConfig | None = None, x0=None):
        self.scenario = scenario
        self.p = p
        self.config = config = config or ControllerConfig()
        self.integrator_config = integrator_config or IntegratorConfig()
        self.system = model.vehicle_system(p)
        x0 = scenario.x0 if x0 is None else np.asarray(x0, dtype=float)
        self.solver = BDFIntegrator(self.system, 0.0, x0, self.integrator_config)
        self.ctrl = ControllerState(config)
        pi_active = scenario.schedule is None or scenario.schedule.shape[1] == 2
        if config.warm_start and pi_active and config.K_i > 0.0:
            kff = feedforward_slip(x0, p)
            self.ctrl.integral = float(np.clip(kff / config.K_i, -config.I_max, config.I_max))
        self.wheelbase = p.a_f - p.a_r
        self.n_ticks = int(round(scenario.duration * config.rate_hz))
        self.k = 0
        self.hint = 0
        self.speed_reduction = 0.0
        self.v_floor = 0.0
        self._t = [0.0]
        self._x = [x0.copy()]
        self._u = []
        self._vt = []
        self._cte = []
        self._red = []

    @property
    def t(self) -> float:
        return self.k / self.config.rate_hz

    @property
    def state(self) -> np.ndarray:
        return self._x[-1]

    def _reference_pose(self, x):
        psi = x[12]
        if self.config.reference_point == "front_axle":
            return (x[2] + self.p.a_f * np.cos(psi), x[3] + self.p.a_f * np.sin(psi), psi)
        return (x[2], x[3], psi)

    def command(self, x, t: float):
        """Control law at sample time ``t``; updates the PI state."""
        c = self.config
        dt = 1.0 / c.rate_hz
        pose = self._reference_pose(x)
        path = self.scenario.path
        s_hitch, seg, cte = path.project((x[2], x[3]), self.hint, 400)
        self.hint = seg
        v_path = path.speed_at(s_hitch)
        v_target = max(v_path - self.speed_reduction, min(self.v_floor, v_path))
        sched = self.scenario.schedule
        if sched is None:
            L_d = lookahead_distance(v_target, c)
            delta, _, _ = pure_pursuit(pose, path, L_d, self.wheelbase, c.delta_max, self.hint, 400)
        else:
            delta = float(np.clip(self.scenario.steering_at(t), -c.delta_max, c.delta_max))
        if sched is not None and sched.shape[1] == 3:
            k = max(int(np.searchsorted(sched[:, 0], t, side="right")) - 1, 0)
            kappa = float(np.clip(sched[k, 2], -c.kappa_max, c.kappa_max))
        else:
            kappa = pi_slip(v_target - x[0], dt, self.ctrl)
        self.ctrl.last_command = (delta, kappa)
        return delta, kappa, v_target, cte

    def clone(self) -> "ClosedLoopSimulator":
        """Independent copy at the current tick (shares the scenario, parameters and compiled system)."""
        new = copy.copy(self)
        new.solver = copy.copy(self.solver)
        for name, val in vars(self.solver).items():
            if isinstance(val, np.ndarray):
                setattr(new.solver, name, val.copy())
        new.ctrl = dataclasses.replace(self.ctrl)
        for name in ("_t", "_x", "_u", "_vt", "_cte", "_red"):
            setattr(new, name, list(getattr(self, name)))
        return new

    def tick(self) -> None:
        x = self._x[-1]
        t = self.t
        delta, kappa, v_target, cte = self.command(x, t)
        self._u.append((delta, kappa))
        self._vt.append(v_target)
        self._cte.append(cte)
        self._red.append(self.speed_reduction)
        t_next = (self.k + 1) / self.config.rate_hz
        self.solver.advance(t_next, [delta, kappa])
        self.k += 1
        self._t.append(t_next)
        self._x.append(self.solver.y)

    def run_until(self, t_stop: float) -> None:
        k_stop = min(int(round(t_stop * self.config.rate_hz)), self.n_ticks)
        while self.k < k_stop:
            self.tick()

    def run(self) -> ClosedLoopResult:
        self.run_until(self.scenario.duration)
        return self.result()

    def result(self) -> ClosedLoopResult:
        n = len(self._u)
        times = np.array(self._t)
        u = np.array(self._u).reshape(n, 2)
        traj = Trajectory(times, np.array(self._x), model.STATE_NAMES, stats=self.solver.stats)
        log = InputLog(times[:n], u[:, 0], u[:, 1])
        return ClosedLoopResult(traj, log, np.array(self._vt), np.array(self._cte), np.array(self._red))


def closed_loop(scenario: Scenario, p: ParameterSet | None = None, config: ControllerConfig | None = None,
                integrator_config: IntegratorConfig | None = None) -> ClosedLoopResult:
    """Run ``scenario`` with the sampled controllers at parameters ``p``."""
    return ClosedLoopSimulator(scenario, p or ParameterSet(), config, integrator_config).run()


def replay(x0, inputs: InputLog, p: ParameterSet, t_span, integrator_config: IntegratorConfig | None = None,
           t_eval=None) -> Trajectory:
    """Open-loop simulation driven by a stored input log (zero-order hold)."""
    schedule = inputs.schedule()
    t0, t1 = t_span
    if t_eval is None:
        t_eval = inputs.times[(inputs.times >= t0) & (inputs.times <= t1)]
        if t_eval[-1] < t1:
            t_eval = np.append(t_eval, t1)
    return integrate(model.vehicle_system(p), x0, (t0, t1), schedule, integrator_config, t_eval=t_eval, dense=False)


def write_trajectory_csv(path, result: ClosedLoopResult | Trajectory) -> None:
    traj = result.trajectory if isinstance(result, ClosedLoopResult) else result
    traj.to_csv(Path(path))
