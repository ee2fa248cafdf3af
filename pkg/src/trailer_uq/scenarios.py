"""Reference paths and the named driving experiments.

Paths are dense polylines (spacing at most 1 m) carrying a target speed per
waypoint. Scenario files follow a small JSON schema::

    {"name": ..., "waypoints": [[x, y, v], ...], "lane_half_width": ...,
     "duration": ..., "mode": "open_loop" | "closed_loop",
     "schedule": [[t, delta_f], ...] | [[t, delta_f, kappa], ...]}

The initial state is derived from the path: the hitch sits on the first
waypoint, aligned with the first segment, at the first waypoint's speed.
An open-loop schedule with two columns leaves speed to the PI loop; with
three columns both inputs are prescribed.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from numba import njit

from .model import straight_state

KMH = 1.0 / 3.6
MAX_SPACING = 1.0
BUILTIN = ("ramp_steer", "ic", "ot", "sweep")


class EndOfPath(RuntimeError):
    """The lookahead point ran past the end of the reference path."""


@dataclasses.dataclass(frozen=True)
class ReferencePath:
    xy: np.ndarray
    v: np.ndarray
    lane_half_width: float = 1.75
    s: np.ndarray = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        xy = np.ascontiguousarray(self.xy, dtype=float)
        v = np.ascontiguousarray(self.v, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
            raise ValueError("waypoints must be an (N >= 2, 2) array")
        if v.shape != (xy.shape[0],):
            raise ValueError("one target speed per waypoint is required")
        ds = np.hypot(*np.diff(xy, axis=0).T)
        if np.any(ds <= 0.0):
            raise ValueError("arclength must be strictly increasing")
        if np.any(ds > MAX_SPACING + 1e-9):
            raise ValueError(f"waypoint spacing exceeds {MAX_SPACING} m")
        if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("target speeds must be > 0")
        if not self.lane_half_width >= 0.0:
            raise ValueError("lane_half_width must be >= 0")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "s", np.concatenate(([0.0], np.cumsum(ds))))

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def headings(self) -> np.ndarray:
        d = np.diff(self.xy, axis=0)
        return np.arctan2(d[:, 1], d[:, 0])

    def curvature(self) -> np.ndarray:
        """Discrete curvature per interior waypoint (heading change over mean spacing)."""
        dpsi = np.diff(np.unwrap(self.headings()))
        ds = np.diff(self.s)
        return dpsi / (0.5 * (ds[:-1] + ds[1:]))

    def point_at(self, s: float) -> np.ndarray:
        return np.array([np.interp(s, self.s, self.xy[:, 0]), np.interp(s, self.s, self.xy[:, 1])])

    def speed_at(self, s: float) -> float:
        return float(np.interp(s, self.s, self.v))

    def project(self, point, hint: int = 0, window: int | None = None):
        """Closest point on the polyline.

        Returns ``(s, index, lateral)`` with ``lateral`` the signed offset
        (left of the direction of travel positive). Beyond the end points the
        first/last segment is extended as a straight line. ``hint``/``window``
        restrict the search to segments ``hint - 2 .. hint + window``.
        """
        px, py = float(point[0]), float(point[1])
        nseg = self.xy.shape[0] - 1
        lo, hi = 0, nseg
        if window is not None:
            lo = max(0, hint - 2)
            hi = min(nseg, hint + window)
        a = self.xy[lo:hi]
        d = self.xy[lo + 1:hi + 1] - a
        L2 = np.einsum("ij,ij->i", d, d)
        w = np.column_stack((px - a[:, 0], py - a[:, 1]))
        tau = np.einsum("ij,ij->i", w, d) / L2
        tau_c = np.clip(tau, 0.0, 1.0)
        if lo == 0:
            tau_c[0] = min(tau[0], 1.0)
        if hi == nseg:
            tau_c[-1] = max(tau[-1], 0.0)
        dist2 = (w[:, 0] - tau_c * d[:, 0]) ** 2 + (w[:, 1] - tau_c * d[:, 1]) ** 2
        k = int(np.argmin(dist2))
        seg = lo + k
        L = np.sqrt(L2[k])
        s = self.s[seg] + tau_c[k] * L
        lateral = (d[k, 0] * w[k, 1] - d[k, 1] * w[k, 0]) / L
        return float(s), seg, float(lateral)

    def lateral_deviation(self, points, tracked: bool = False) -> np.ndarray:
        """Signed lateral offsets of many points.

        With ``tracked`` the points are taken as consecutive samples of one
        trajectory and each search starts from the previous segment (fast);
        otherwise every point is projected globally.
        """
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        if tracked:
            out = np.empty(pts.shape[0])
            _project_tracked(self.xy, pts, out)
            return out
        return np.array([self.project(p)[2] for p in pts])

    def resample(self, spacing: float) -> "ReferencePath":
        n = int(np.ceil(self.length / spacing)) + 1
        s_new = np.linspace(0.0, self.length, n)
        xy = np.column_stack((np.interp(s_new, self.s, self.xy[:, 0]), np.interp(s_new, self.s, self.xy[:, 1])))
        return ReferencePath(xy, np.interp(s_new, self.s, self.v), self.lane_half_width)


@njit(cache=True)
def _nearest_segment(xy, px, py, lo, hi):
    nseg = xy.shape[0] - 1
    best = np.inf
    best_k = lo
    best_lat = 0.0
    for k in range(lo, hi):
        dx = xy[k + 1, 0] - xy[k, 0]
        dy = xy[k + 1, 1] - xy[k, 1]
        L2 = dx * dx + dy * dy
        wx = px - xy[k, 0]
        wy = py - xy[k, 1]
        tau = (wx * dx + wy * dy) / L2
        lo_t = -np.inf if k == 0 else 0.0
        hi_t = np.inf if k == nseg - 1 else 1.0
        tau = min(max(tau, lo_t), hi_t)
        ex = wx - tau * dx
        ey = wy - tau * dy
        d2 = ex * ex + ey * ey
        if d2 < best:
            best = d2
            best_k = k
            best_lat = (dx * wy - dy * wx) / np.sqrt(L2)
    return best_k, best_lat


@njit(cache=True)
def _project_tracked(xy, pts, out):
    """Lateral offsets of consecutive trajectory points, searching near the previous segment."""
    nseg = xy.shape[0] - 1
    seg, lat = _nearest_segment(xy, pts[0, 0], pts[0, 1], 0, nseg)
    out[0] = lat
    for i in range(1, pts.shape[0]):
        lo = max(0, seg - 20)
        hi = min(nseg, seg + 40)
        seg, lat = _nearest_segment(xy, pts[i, 0], pts[i, 1], lo, hi)
        out[i] = lat


@dataclasses.dataclass(frozen=True)
class Scenario:
    name: str
    path: ReferencePath
    duration: float
    mode: str = "closed_loop"
    schedule: np.ndarray | None = None

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("duration must be > 0")
        if self.mode not in ("open_loop", "closed_loop"):
            raise ValueError("mode must be 'open_loop' or 'closed_loop'")
        if (self.mode == "open_loop") != (self.schedule is not None):
            raise ValueError("an open-loop scenario needs a schedule; a closed-loop one must not have one")
        if self.schedule is not None:
            sched = np.ascontiguousarray(self.schedule, dtype=float)
            if sched.ndim != 2 or sched.shape[1] not in (2, 3) or sched.shape[0] < 1:
                raise ValueError("schedule rows must be [t, delta_f] or [t, delta_f, kappa]")
            if np.any(np.diff(sched[:, 0]) <= 0.0):
                raise ValueError("schedule times must be strictly increasing")
            object.__setattr__(self, "schedule", sched)

    @property
    def x0(self) -> np.ndarray:
        psi = float(self.path.headings()[0])
        X, Y = self.path.xy[0]
        return straight_state(float(self.path.v[0]), X, Y, psi)

    def steering_at(self, t: float) -> float:
        """Open-loop steering (zero-order hold over the schedule rows)."""
        k = max(int(np.searchsorted(self.schedule[:, 0], t, side="right")) - 1, 0)
        return float(self.schedule[k, 1])

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "waypoints": np.column_stack((self.path.xy, self.path.v)).tolist(),
            "lane_half_width": self.path.lane_half_width,
            "duration": self.duration,
            "mode": self.mode,
        }
        if self.schedule is not None:
            out["schedule"] = self.schedule.tolist()
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        allowed = {"name", "waypoints", "lane_half_width", "duration", "mode", "schedule"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown scenario key(s): {sorted(unknown)}")
        missing = {"name", "waypoints", "duration", "mode"} - set(data)
        if missing:
            raise ValueError(f"missing scenario key(s): {sorted(missing)}")
        wp = np.asarray(data["waypoints"], dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3:
            raise ValueError("waypoints must be [[x, y, v], ...]")
        path = ReferencePath(wp[:, :2], wp[:, 2], float(data.get("lane_half_width", 1.75)))
        sched = data.get("schedule")
        return cls(str(data["name"]), path, float(data["duration"]), str(data["mode"]),
                   None if sched is None else np.asarray(sched, dtype=float))

    @classmethod
    def from_json(cls, source) -> "Scenario":
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


# --------------------------------------------------------------------------
# path construction

def path_from_curvature(segments, v, spacing: float = 0.5, lane_half_width: float = 1.75,
                        start=(0.0, 0.0), heading: float = 0.0) -> ReferencePath:
    """Integrate piecewise-linear curvature ``[(length, k_start, k_end), ...]`` into a polyline.

    ``v`` is a constant speed or a callable of arclength.
    """
    total = sum(seg[0] for seg in segments)
    fine = 0.01
    n_fine = int(round(total / fine))
    s_f = np.linspace(0.0, total, n_fine + 1)
    kappa = np.zeros_like(s_f)
    s0 = 0.0
    for length, k0, k1 in segments:
        m = (s_f >= s0) & (s_f <= s0 + length)
        kappa[m] = k0 + (k1 - k0) * (s_f[m] - s0) / length
        s0 += length
    # heading and position by the trapezoidal rule on the fine grid
    psi = heading + np.concatenate(([0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s_f))))
    x = start[0] + np.concatenate(([0.0], np.cumsum(0.5 * (np.cos(psi[1:]) + np.cos(psi[:-1])) * np.diff(s_f))))
    y = start[1] + np.concatenate(([0.0], np.cumsum(0.5 * (np.sin(psi[1:]) + np.sin(psi[:-1])) * np.diff(s_f))))
    n = int(np.ceil(total / spacing)) + 1
    s = np.linspace(0.0, total, n)
    xy = np.column_stack((np.interp(s, s_f, x), np.interp(s, s_f, y)))
    speeds = v(s) if callable(v) else np.full(n, float(v))
    return ReferencePath(xy, speeds, lane_half_width)


def _smoothstep5(xi):
    xi = np.clip(xi, 0.0, 1.0)
    return xi ** 3 * (10.0 - 15.0 * xi + 6.0 * xi * xi)


def double_lane_change_path(offset: float = 3.5, lead_in: float = 80.0, change: float = 100.0,
                            hold: float = 80.0, tail: float = 150.0, v_start: float = 65 * KMH,
                            v_end: float = 85 * KMH, spacing: float = 0.5,
                            lane_half_width: float = 1.75) -> ReferencePath:
    """Lateral offset ``offset`` out over ``change`` m, ``hold`` m in the adjacent lane, ``change`` m back.

    The target speed ramps linearly from ``v_start`` to ``v_end`` between the
    start of the first and the end of the second lane change.
    """
    x_end = lead_in + 2.0 * change + hold + tail
    x_f = np.linspace(0.0, x_end, int(round(x_end / 0.01)) + 1)
    x1 = lead_in
    x2 = lead_in + change + hold
    y_f = offset * (_smoothstep5((x_f - x1) / change) - _smoothstep5((x_f - x2) / change))
    s_f = np.concatenate(([0.0], np.cumsum(np.hypot(np.diff(x_f), np.diff(y_f)))))
    n = int(np.ceil(s_f[-1] / spacing)) + 1
    s = np.linspace(0.0, s_f[-1], n)
    x = np.interp(s, s_f, x_f)
    y = np.interp(s, s_f, y_f)
    ramp = np.clip((x - x1) / (x2 + change - x1), 0.0, 1.0)
    v = v_start + (v_end - v_start) * ramp
    return ReferencePath(np.column_stack((x, y)), v, lane_half_width)


# --------------------------------------------------------------------------
# named experiments

RAMP_SPEED = 50 * KMH
RAMP_DELTA_END = np.deg2rad(8.0)
RAMP_DURATION = 5.0
CONTROL_RATE = 50.0


def ramp_steer_scenario(rate_hz: float = CONTROL_RATE) -> Scenario:
    """Constant 50 km/h, steering ramped linearly 0 -> 8 deg over 5 s."""
    path = path_from_curvature([(200.0, 0.0, 0.0)], RAMP_SPEED)
    t = np.arange(0.0, RAMP_DURATION + 0.5 / rate_hz, 1.0 / rate_hz)
    schedule = np.column_stack((t, RAMP_DELTA_END * t / RAMP_DURATION))
    return Scenario("ramp_steer", path, RAMP_DURATION, "open_loop", schedule)


def ramp_steer_angle(t):
    """Continuous steering law of the ramp-steer run [rad]."""
    return RAMP_DELTA_END * np.clip(np.asarray(t, dtype=float), 0.0, RAMP_DURATION) / RAMP_DURATION


IC_SPEED = 45 * KMH
IC_STRAIGHT = 100.0
IC_RAMP = 300.0
IC_ARC = 120.0
IC_CURVATURE = 1.0 / 60.0
IC_DURATION = 36.0


def ic_scenario(curvature: float = IC_CURVATURE, straight: float = IC_STRAIGHT, ramp: float = IC_RAMP,
                arc: float = IC_ARC, speed: float = IC_SPEED, duration: float = IC_DURATION) -> Scenario:
    """Increasing curve: straight lead-in, clothoid 0 -> ``curvature``, then a constant arc."""
    path = path_from_curvature([(straight, 0.0, 0.0), (ramp, 0.0, curvature), (arc, curvature, curvature)], speed)
    return Scenario("ic", path, duration)


OT_DURATION = 20.0


def ot_scenario(duration: float = OT_DURATION, **path_kw) -> Scenario:
    """Overtake: 3.5 m double lane change while accelerating 65 -> 85 km/h."""
    return Scenario("ot", double_lane_change_path(**path_kw), duration)


SWEEP_SPEED = 25 * KMH
SWEEP_AMPLITUDE = np.deg2rad(2.0)
SWEEP_F0 = 0.2      # [Hz]
SWEEP_F1 = 2.0      # [Hz]
SWEEP_DURATION = 15.0


def sweep_scenario(amplitude: float = SWEEP_AMPLITUDE, f0: float = SWEEP_F0, f1: float = SWEEP_F1,
                   duration: float = SWEEP_DURATION, rate_hz: float = CONTROL_RATE) -> Scenario:
    """Identification run: linear steering chirp ``f0 -> f1`` at 25 km/h, PI speed hold.

    The frequency content reaches the tyre relaxation and roll dynamics,
    which the slow path-following experiments barely excite; the low speed
    stretches the relaxation time constant ``sigma / v``.
    """
    path = path_from_curvature([(SWEEP_SPEED * duration + 60.0, 0.0, 0.0)], SWEEP_SPEED)
    t = np.arange(0.0, duration + 0.5 / rate_hz, 1.0 / rate_hz)
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration * t * t)
    return Scenario("sweep", path, duration, "open_loop", np.column_stack((t, amplitude * np.sin(phase))))


def builtin(name: str) -> Scenario:
    factories = {"ramp_steer": ramp_steer_scenario, "ic": ic_scenario, "ot": ot_scenario,
                 "sweep": sweep_scenario}
    if name not in factories:
        raise KeyError(f"unknown scenario {name!r}; built-in names: {', '.join(BUILTIN)}")
    return factories[name]()


def load_scenario(name_or_path) -> Scenario:
    """A built-in name or a path to a scenario JSON file."""
    if str(name_or_path) in BUILTIN:
        return builtin(str(name_or_path))
    path = Path(name_or_path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return Scenario.from_json(path)
