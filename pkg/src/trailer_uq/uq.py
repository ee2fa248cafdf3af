"""Ensemble prediction under trailer-parameter uncertainty.

Protocol: the scenario is run once closed-loop with nominal parameters and
its commands are logged. At every re-initialization time ``t0`` each
ensemble member (a perturbed parameter vector) is started from the nominal
state at ``t0`` and simulated open-loop over the horizon with the logged
commands. Pointwise order statistics over the members give the envelope;
warnings are raised when members cross the rollover or lane limits.

Members draw ``u ~ U(-1, 1)`` once per (member, parameter) and scale it by
``epsilon * mu``, so ensembles for different ``epsilon`` share random
numbers and their spreads are ordered.
"""
from __future__ import annotations

import dataclasses
import json
import multiprocessing
from pathlib import Path

import numpy as np

from . import model
from .control import ClosedLoopResult, ClosedLoopSimulator, ControllerConfig, InputLog
from .integrator import BDFIntegrator, IntegrationError, IntegratorConfig, write_csv
from .params import FIELDS, TABLE2_PARAMS, ParameterSet
from .scenarios import KMH, ReferencePath, Scenario

ROLLOVER_THRESHOLD = np.deg2rad(4.0)
VEHICLE_HALF_WIDTH = 1.25   # [m]
SIGNALS: tuple[str, ...] = ("x_s", "y_s", "lat_s", "phi_s", "phi_t", "v_x", "v_y", "dpsi_s")
QUANTILES = ("min", "q05", "median", "q95", "max")


@dataclasses.dataclass(frozen=True)
class PerturbationSpec:
    """Uniform relative perturbation ``mu (1 + epsilon u)``, ``u ~ U(-1, 1)``."""
    names: tuple = TABLE2_PARAMS
    epsilon: float = 0.15
    n: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.names:
            raise ValueError("select at least one parameter")
        for name in self.names:
            if name not in FIELDS:
                raise KeyError(f"unknown parameter {name!r}")

    def unit_draws(self) -> np.ndarray:
        """Common random numbers ``u[member, parameter]`` in ``[-1, 1)``."""
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-1.0, 1.0, size=(self.n, len(self.names)))


def sample_parameters(nominal: ParameterSet, spec: PerturbationSpec) -> list[ParameterSet]:
    """``spec.n`` members, each selected field drawn independently in ``mu (1 +- epsilon)``."""
    u = spec.unit_draws()
    mu = np.array([getattr(nominal, n) for n in spec.names])
    vals = mu[None, :] * (1.0 + spec.epsilon * u)
    return [nominal.replace(**{n: float(v) for n, v in zip(spec.names, row)}) for row in vals]


# --------------------------------------------------------------------------
# replay

@dataclasses.dataclass
class WindowPrediction:
    """Member predictions of one re-initialization window.

    ``values[member, k, signal]`` at ``times[k]``; rows of diverged members are NaN.
    """
    t0: float
    times: np.ndarray
    values: np.ndarray
    diverged: np.ndarray
    signals: tuple = SIGNALS

    def signal(self, name: str) -> np.ndarray:
        return self.values[:, :, self.signals.index(name)]


def _signals_of(states: np.ndarray, p: ParameterSet, path: ReferencePath | None) -> np.ndarray:
    cog = model.cog_positions(states, p)
    lat = path.lateral_deviation(cog[:, 2:], tracked=True) if path is not None else np.zeros(states.shape[0])
    idx = model.STATE_INDEX
    return np.column_stack((cog[:, 2], cog[:, 3], lat, states[:, idx["phi_s"]], states[:, idx["phi_t"]],
                            states[:, idx["v_x"]], states[:, idx["v_y"]], states[:, idx["dpsi_s"]]))


def _predict_member(x0, log: InputLog, p: ParameterSet, t0: float, times: np.ndarray,
                    config: IntegratorConfig | None):
    """Open-loop prediction over ``times`` (``times[0] == t0``); ``None`` on failure."""
    sched = log.schedule()
    seg_t, seg_u = sched.segments(t0, float(times[-1]))
    solver = BDFIntegrator(model.vehicle_system(p), t0, x0, config)
    try:
        status, y_out, k, _ = solver._run(seg_t, seg_u, times)
    except (IntegrationError, ValueError, np.linalg.LinAlgError):
        return None
    if status != 0 or k != times.size or not np.all(np.isfinite(y_out)):
        return None
    return y_out


def _window_times(log: InputLog, t0: float, horizon: float) -> np.ndarray:
    t1 = t0 + horizon
    sel = log.times[(log.times >= t0) & (log.times <= t1 + 1e-9)]
    if sel.size == 0 or sel[0] != t0:
        sel = np.concatenate(([t0], sel[sel > t0]))
    if sel[-1] < t1 - 1e-9:
        sel = np.append(sel, t1)
    return sel


def predict_window(x0, log: InputLog, members, t0: float, horizon: float,
                   path: ReferencePath | None = None, config: IntegratorConfig | None = None) -> WindowPrediction:
    """All members from state ``x0`` at ``t0`` over ``[t0, t0 + horizon]``."""
    times = _window_times(log, t0, horizon)
    values = np.full((len(members), times.size, len(SIGNALS)), np.nan)
    diverged = np.zeros(len(members), dtype=bool)
    for m, p in enumerate(members):
        y = _predict_member(x0, log, p, t0, times, config)
        if y is None:
            diverged[m] = True
            continue
        values[m] = _signals_of(y, p, path)
    return WindowPrediction(t0, times, values, diverged)


# state shared with forked workers (set before the pool starts)
_JOB: dict = {}


def _window_task(w: int) -> WindowPrediction:
    j = _JOB
    t0 = j["t0s"][w]
    return predict_window(j["x0s"][w], j["log"], j["members"], t0, j["horizon"], j["path"], j["config"])


def reinit_times(duration: float, reinit: float, horizon: float) -> np.ndarray:
    """Re-initialization times ``0, reinit, 2 reinit, ...`` whose horizon fits in ``duration``."""
    if not (reinit > 0.0 and horizon > 0.0):
        raise ValueError("reinit interval and horizon must be > 0")
    n = int(np.floor((duration - horizon) / reinit + 1e-9)) + 1
    if n < 1:
        raise ValueError("input log shorter than one horizon")
    return reinit * np.arange(n)


def replay_ensemble(nominal: ClosedLoopResult, members, reinit: float = 1.0, horizon: float = 5.0,
                    path: ReferencePath | None = None, config: IntegratorConfig | None = None,
                    jobs: int = 1, t0s=None) -> list[WindowPrediction]:
    """Re-initialized open-loop predictions of every member along a nominal run.

    Windows run in a process pool when ``jobs > 1``; results are collected
    in window order, so the output does not depend on ``jobs``.
    """
    log = nominal.inputs
    traj = nominal.trajectory
    duration = float(traj.times[-1])
    if t0s is None:
        t0s = reinit_times(duration, reinit, horizon)
    t0s = np.asarray(t0s, dtype=float)
    if np.any(t0s + horizon > duration + 1e-9):
        raise ValueError("input log does not cover every prediction window")
    x0s = [traj(t0) for t0 in t0s]
    _JOB.update(t0s=t0s, x0s=x0s, log=log, members=list(members), horizon=horizon, path=path, config=config)
    try:
        if jobs > 1 and len(t0s) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(min(jobs, len(t0s))) as pool:
                return pool.map(_window_task, range(len(t0s)), chunksize=1)
        return [_window_task(w) for w in range(len(t0s))]
    finally:
        _JOB.clear()


# --------------------------------------------------------------------------
# envelopes and warnings

@dataclasses.dataclass
class UncertaintyEnvelope:
    """Pointwise order statistics of one window: ``stats[signal]`` has rows min, q05, median, q95, max."""
    t0: float
    times: np.ndarray
    stats: dict
    n_members: int
    n_diverged: int
    terminal: dict
    nominal: dict | None = None

    def half_width(self, signal: str) -> np.ndarray:
        s = self.stats[signal]
        return 0.5 * (s[4] - s[0])

    def width(self, signal: str) -> np.ndarray:
        s = self.stats[signal]
        return s[4] - s[0]

    def rows(self):
        for name, s in self.stats.items():
            for k, t in enumerate(self.times):
                yield [t, name, *s[:, k]]

    def to_csv(self, path) -> None:
        """``t,signal,min,q05,median,q95,max``; 17 significant digits."""
        with open(Path(path), "w", newline="") as fh:
            fh.write("t,signal,min,q05,median,q95,max\n")
            for t, name, *vals in self.rows():
                fh.write(",".join([format(float(t), ".17g"), name] + [format(float(v), ".17g") for v in vals]))
                fh.write("\n")


def envelope(pred: WindowPrediction, nominal: WindowPrediction | None = None) -> UncertaintyEnvelope:
    """Order statistics over the non-diverged members (linear-interpolation percentiles)."""
    ok = ~pred.diverged
    if not np.any(ok):
        raise RuntimeError(f"all {pred.diverged.size} members diverged in the window at t0 = {pred.t0:g} s")
    vals = pred.values[ok]
    q = np.quantile(vals, [0.0, 0.05, 0.5, 0.95, 1.0], axis=0, method="linear")
    # exact extremes (the interpolated quantiles already are, but keep min/max literal)
    q[0] = vals.min(axis=0)
    q[4] = vals.max(axis=0)
    stats = {name: q[:, :, i] for i, name in enumerate(pred.signals)}
    terminal = {name: vals[:, -1, i] for i, name in enumerate(pred.signals)}
    nom = None
    if nominal is not None:
        nom = {name: nominal.values[0, :, i] for i, name in enumerate(nominal.signals)}
    return UncertaintyEnvelope(pred.t0, pred.times, stats, int(ok.sum()), int(pred.diverged.sum()), terminal, nom)


@dataclasses.dataclass
class WarningFlag:
    type: str
    raised: bool
    first_crossing_time: float | None
    member_fraction: float
    t0: float | None = None

    def to_dict(self) -> dict:
        return {"type": self.type, "raised": self.raised, "first_crossing_time": self.first_crossing_time,
                "member_fraction": self.member_fraction, "t0": self.t0}


def _crossing(pred: WindowPrediction, signal: str, limit: float, kind: str) -> WarningFlag:
    ok = ~pred.diverged
    vals = np.abs(pred.signal(signal)[ok])
    over = vals > limit
    members = np.any(over, axis=1)
    frac = float(members.mean()) if members.size else 0.0
    first = None
    if np.any(over):
        k = int(np.min(np.argmax(over[members], axis=1)))
        first = float(pred.times[k])
    return WarningFlag(kind, bool(np.any(members)), first, frac, pred.t0)


def rollover_warning(pred: WindowPrediction, threshold: float = ROLLOVER_THRESHOLD) -> WarningFlag:
    """Raised when any member's ``|phi_s|`` exceeds ``threshold`` [rad] within the horizon."""
    return _crossing(pred, "phi_s", threshold, "rollover")


def lane_departure_warning(pred: WindowPrediction, lane_half_width: float = 1.75,
                           vehicle_half_width: float = VEHICLE_HALF_WIDTH) -> WarningFlag:
    """Raised when a member's trailer-COG lateral offset exceeds ``lane_half_width - vehicle_half_width``."""
    return _crossing(pred, "lat_s", lane_half_width - vehicle_half_width, "lane_departure")


def summarize_warnings(warnings) -> list[dict]:
    """One record per warning type: earliest crossing and the largest member fraction over windows."""
    out = []
    for kind in ("rollover", "lane_departure"):
        ws = [w for w in warnings if w.type == kind]
        if not ws:
            continue
        raised = [w for w in ws if w.raised]
        first = min((w.first_crossing_time for w in raised), default=None)
        frac = max((w.member_fraction for w in ws), default=0.0)
        out.append({"type": kind, "first_crossing_time": first, "member_fraction": frac})
    return out


# --------------------------------------------------------------------------
# full protocol

@dataclasses.dataclass
class UQResult:
    nominal: ClosedLoopResult
    spec: PerturbationSpec
    members: list
    windows: list
    envelopes: list
    warnings: list

    def max_abs(self, signal: str) -> float:
        return float(max(np.nanmax(np.abs(w.signal(signal))) for w in self.windows))

    def n_diverged(self) -> int:
        return int(sum(w.diverged.sum() for w in self.windows))

    def write(self, out_dir, svg: bool = False) -> list[Path]:
        """Per-window envelope CSVs, the warnings JSON and (optionally) SVG plots."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for env in self.envelopes:
            f = out / f"envelope_t0_{env.t0:06.2f}.csv"
            env.to_csv(f)
            files.append(f)
        f = out / "warnings.json"
        f.write_text(json.dumps(summarize_warnings(self.warnings), indent=2) + "\n")
        files.append(f)
        if svg:
            for sig in ("phi_s", "lat_s"):
                f = out / f"envelope_{sig}.svg"
                f.write_text(envelope_svg(self.envelopes, sig))
                files.append(f)
        return files


def run_uq(scenario: Scenario, spec: PerturbationSpec, p: ParameterSet | None = None, reinit: float = 1.0,
           horizon: float = 5.0, jobs: int = 1, config: IntegratorConfig | None = None,
           controller: ControllerConfig | None = None, rollover_threshold: float = ROLLOVER_THRESHOLD,
           vehicle_half_width: float = VEHICLE_HALF_WIDTH, nominal: ClosedLoopResult | None = None) -> UQResult:
    """Nominal closed-loop run, re-initialized ensemble replay, envelopes and warnings."""
    p = p or ParameterSet()
    if nominal is None:
        nominal = ClosedLoopSimulator(scenario, p, controller, config).run()
    members = sample_parameters(p, spec)
    windows = replay_ensemble(nominal, members, reinit, horizon, scenario.path, config, jobs)
    nominal_windows = replay_ensemble(nominal, [p], reinit, horizon, scenario.path, config, 1,
                                      t0s=[w.t0 for w in windows])
    envs = [envelope(w, nw) for w, nw in zip(windows, nominal_windows)]
    warns = []
    for w in windows:
        warns.append(rollover_warning(w, rollover_threshold))
        warns.append(lane_departure_warning(w, scenario.path.lane_half_width, vehicle_half_width))
    return UQResult(nominal, spec, members, windows, envs, warns)


# --------------------------------------------------------------------------
# mitigation

@dataclasses.dataclass
class MitigationConfig:
    roll_limit: float = np.deg2rad(3.0)   # [rad]
    k_dec: float = 60.0                   # [(m/s)/rad], about 1 m/s per degree
    v_min: float = 20.0 * KMH             # [m/s]


@dataclasses.dataclass
class MitigationResult:
    mitigated: ClosedLoopResult
    unmitigated: ClosedLoopResult
    interventions: list          # (t0, predicted max |phi_s|, speed reduction after the update)
    config: MitigationConfig

    @property
    def first_intervention(self) -> float | None:
        return self.interventions[0][0] if self.interventions else None


def _lookahead(sim: ClosedLoopSimulator, horizon: float) -> ClosedLoopResult:
    """Nominal closed-loop continuation from the simulator's current tick (the simulator is not advanced)."""
    ahead = sim.clone()
    ahead.run_until(sim.t + horizon)
    return ahead.result()


def speed_adaptation_loop(scenario: Scenario, spec: PerturbationSpec, mitigation: MitigationConfig | None = None,
                          p: ParameterSet | None = None, reinit: float = 1.0, horizon: float = 5.0,
                          jobs: int = 1, config: IntegratorConfig | None = None,
                          controller: ControllerConfig | None = None,
                          unmitigated: ClosedLoopResult | None = None) -> MitigationResult:
    """Closed-loop run that lowers its target speed when the ensemble predicts excessive roll.

    At every re-initialization time the nominal controller is run ahead over
    the horizon to obtain the command sequence, the ensemble is replayed
    along it from the current state, and when the predicted
    ``max |phi_s|`` exceeds ``roll_limit`` the target-speed reduction grows
    by ``k_dec (max |phi_s| - roll_limit)``. The reduction is held for the
    rest of the run, and the target never drops below ``v_min``.
    """
    cfg = mitigation or MitigationConfig()
    p = p or ParameterSet()
    members = sample_parameters(p, spec)
    sim = ClosedLoopSimulator(scenario, p, controller, config)
    sim.v_floor = cfg.v_min
    interventions = []
    rate = sim.config.rate_hz
    step = int(round(reinit * rate))
    while sim.k < sim.n_ticks:
        if sim.k % step == 0 and sim.t + horizon <= scenario.duration + 1e-9 and cfg.k_dec > 0.0:
            ahead = _lookahead(sim, horizon)
            wins = replay_ensemble(ahead, members, reinit, horizon, None, config, jobs, t0s=[sim.t])
            roll = wins[0].signal("phi_s")
            peak = float(np.nanmax(np.abs(roll))) if np.any(~wins[0].diverged) else np.inf
            if peak > cfg.roll_limit:
                sim.speed_reduction += cfg.k_dec * (peak - cfg.roll_limit)
                interventions.append((sim.t, peak, sim.speed_reduction))
        sim.tick()
    if unmitigated is None:
        unmitigated = ClosedLoopSimulator(scenario, p, controller, config).run()
    return MitigationResult(sim.result(), unmitigated, interventions, cfg)


# --------------------------------------------------------------------------
# plotting

def envelope_svg(envelopes, signal: str, width: int = 900, height: int = 360) -> str:
    """Minimal SVG of the min-max and 5-95 % bands of ``signal`` for every window."""
    t_all = np.concatenate([e.times for e in envelopes])
    v_all = np.concatenate([e.stats[signal].ravel() for e in envelopes])
    t_lo, t_hi = float(t_all.min()), float(t_all.max())
    v_lo, v_hi = float(v_all.min()), float(v_all.max())
    if v_hi == v_lo:
        v_hi = v_lo + 1.0
    pad = 40

    def xy(t, v):
        x = pad + (t - t_lo) / max(t_hi - t_lo, 1e-12) * (width - 2 * pad)
        y = height - pad - (v - v_lo) / (v_hi - v_lo) * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{signal}: min-max (light), 5-95 % (dark), median</text>']
    for e in envelopes:
        s = e.stats[signal]
        for lo, hi, colour in ((0, 4, "#c6dbef"), (1, 3, "#6baed6")):
            pts = [xy(t, v) for t, v in zip(e.times, s[hi])] + [xy(t, v) for t, v in zip(e.times[::-1], s[lo][::-1])]
            parts.append(f'<polygon points="{" ".join(pts)}" fill="{colour}" fill-opacity="0.35" stroke="none"/>')
        parts.append('<polyline points="{}" fill="none" stroke="#08306b" stroke-width="0.8"/>'.format(
            " ".join(xy(t, v) for t, v in zip(e.times, s[2]))))
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="12">t = {t_lo:g} .. {t_hi:g} s, '
                 f'range {v_lo:.4g} .. {v_hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
