"""Command-line front end: ``trailer-uq <command> [flags]``.

Commands: simulate, sensitivity, estimate, uq, mitigate. Each resolved
setting (CLI flag > ``--config`` JSON file > built-in default) is written to
``<out>/resolved_config.json``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 estimation did not converge (report still written).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import control, estimation, sensitivity, uq
from .integrator import IntegrationError, IntegratorConfig, write_csv
from .params import FIELDS, TABLE2_PARAMS, ParameterSet
from .scenarios import EndOfPath, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_NOT_CONVERGED = 3

EMIT_KINDS = ("csv", "svg", "json")

# built-in defaults per command; a ``None`` here means "required"
_COMMON = {"scenario": "ic", "params_file": None, "out": "out", "emit": "csv,json", "rtol": 1e-6, "atol": 1e-8}
_DEFAULTS = {
    "simulate": {},
    "sensitivity": {"scenario": "ramp_steer", "params": "all_table2", "scaled": False},
    # synthesis and fit share the fit's tight tolerance so the data is reproducible by the predictor
    "estimate": {"rtol": 1e-8, "atol": 1e-10, "scenario": "sweep", "dataset": None, "free_params": "C_alpha_s,sigma_s,k_roll_s",
                 "init_offset": 0.2, "noise": 0.0, "seed": 0, "max_iter": 50},
    "uq": {"epsilon": 0.15, "n": 100, "seed": None, "horizon": 5.0, "reinit": 1.0, "jobs": None,
           "rollover_threshold": 4.0},
    "mitigate": {"epsilon": 0.15, "n": 100, "seed": None, "horizon": 5.0, "reinit": 1.0, "jobs": None,
                 "rollover_threshold": 4.0, "roll_limit": 3.0, "k_dec": uq.MitigationConfig().k_dec,
                 "v_min": uq.MitigationConfig().v_min * 3.6},
}


class ConfigError(Exception):
    pass


def _add_common(sp: argparse.ArgumentParser, rtol: str = "1e-6", atol: str = "1e-8") -> None:
    sp.add_argument("--config", help="JSON file with default values for any flag (keys as flag names)")
    sp.add_argument("--scenario", help="built-in scenario (ramp_steer, ic, ot, sweep) or scenario JSON path")
    sp.add_argument("--params-file", help="JSON parameter file (SI units); unspecified fields keep defaults")
    sp.add_argument("--out", help="output directory (default: out)")
    sp.add_argument("--emit", help="comma-separated artifacts to write: csv, svg, json (default: csv,json)")
    sp.add_argument("--rtol", type=float, help=f"integrator relative tolerance [-] (default {rtol})")
    sp.add_argument("--atol", type=float, help=f"integrator absolute tolerance [state units] (default {atol})")


def _add_ensemble(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--epsilon", type=float, help="relative perturbation half-range [-] (default 0.15)")
    sp.add_argument("--n", type=int, help="ensemble size [-] (default 100)")
    sp.add_argument("--seed", type=int, help="random seed [-] (mandatory)")
    sp.add_argument("--horizon", type=float, help="prediction horizon [s] (default 5)")
    sp.add_argument("--reinit", type=float, help="re-initialization interval [s] (default 1)")
    sp.add_argument("--jobs", type=int, help="worker processes [-] (default: available cores)")
    sp.add_argument("--rollover-threshold", type=float, help="trailer roll warning threshold [deg] (default 4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trailer-uq", description=__doc__.splitlines()[0],
                                     argument_default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="closed- or open-loop scenario run at nominal parameters")
    _add_common(sp)

    sp = sub.add_parser("sensitivity", help="forward parameter sensitivities along a scenario")
    _add_common(sp)
    sp.add_argument("--params", help="comma-separated parameter names or all_table2 [-] (default all_table2)")
    sp.add_argument("--scaled", action="store_const", const=True,
                    help="report peak sensitivities scaled by the nominal values [state units]")

    sp = sub.add_parser("estimate", help="prediction-error fit of selected parameters")
    _add_common(sp, "1e-8", "1e-10")
    sp.add_argument("--dataset", help="CSV with t [s], u_delta_f [rad], u_kappa [-] and output columns "
                                      "(default: synthesize one from --scenario)")
    sp.add_argument("--free-params", help="comma-separated parameters to estimate [-]")
    sp.add_argument("--init-offset", type=float,
                    help="relative offset of the initial guess on the free parameters [-] (default 0.2)")
    sp.add_argument("--noise", type=float,
                    help="synthetic output noise std as a fraction of each output's range [-] (default 0)")
    sp.add_argument("--seed", type=int, help="seed of the synthetic noise [-] (default 0)")
    sp.add_argument("--max-iter", type=int, help="Levenberg-Marquardt iteration limit [-] (default 50)")

    sp = sub.add_parser("uq", help="ensemble envelopes and warnings under parameter uncertainty")
    _add_common(sp)
    _add_ensemble(sp)

    sp = sub.add_parser("mitigate", help="speed adaptation driven by the ensemble roll prediction")
    _add_common(sp)
    _add_ensemble(sp)
    sp.add_argument("--roll-limit", type=float, help="predicted roll that triggers slowing down [deg] (default 3)")
    sp.add_argument("--k-dec", type=float, help="speed reduction gain [(m/s)/rad] (default 60)")
    sp.add_argument("--v-min", type=float, help="lowest target speed [km/h] (default 20)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flag values over the config file over the built-in defaults."""
    cmd = args.command
    resolved = dict(_COMMON)
    resolved.update(_DEFAULTS[cmd])
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in resolved:
                raise ConfigError(f"config file {path}: unknown key {key!r} for command {cmd}")
            resolved[key] = value
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    resolved["command"] = cmd
    return resolved


def _emit_set(cfg: dict) -> set:
    kinds = {k.strip() for k in str(cfg["emit"]).split(",") if k.strip()}
    bad = kinds - set(EMIT_KINDS)
    if bad:
        raise ConfigError(f"unknown --emit kind(s) {sorted(bad)}; choose from {', '.join(EMIT_KINDS)}")
    return kinds


def _load_params(cfg: dict) -> ParameterSet:
    if cfg["params_file"] is None:
        return ParameterSet()
    path = Path(cfg["params_file"])
    if not path.is_file():
        raise ConfigError(f"parameter file not found: {path}")
    try:
        return ParameterSet.from_json(path)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid parameter file {path}: {exc}") from exc


def _load_scenario(cfg: dict):
    try:
        return load_scenario(cfg["scenario"])
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _integrator(cfg: dict) -> IntegratorConfig:
    try:
        return IntegratorConfig(rtol=float(cfg["rtol"]), atol=float(cfg["atol"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory not writable: {out}")
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _spec(cfg: dict) -> uq.PerturbationSpec:
    if cfg["seed"] is None:
        raise ConfigError("--seed is mandatory for ensemble commands")
    try:
        return uq.PerturbationSpec(TABLE2_PARAMS, float(cfg["epsilon"]), int(cfg["n"]), int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _jobs(cfg: dict) -> int:
    jobs = cfg["jobs"] if cfg["jobs"] is not None else (os.cpu_count() or 1)
    if int(jobs) < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg["jobs"] = int(jobs)
    return int(jobs)


# --------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: dict) -> int:
    p = _load_params(cfg)
    scenario = _load_scenario(cfg)
    emit = _emit_set(cfg)
    icfg = _integrator(cfg)
    out = _out_dir(cfg)
    _write_json(out / "resolved_config.json", cfg)
    res = control.closed_loop(scenario, p, integrator_config=icfg)
    if "csv" in emit:
        control.write_trajectory_csv(out / f"{scenario.name}_trajectory.csv", res)
        res.inputs.to_csv(out / f"{scenario.name}_inputs.csv")
    if "json" in emit:
        traj = res.trajectory
        _write_json(out / f"{scenario.name}_summary.json", {
            "scenario": scenario.name,
            "duration_s": float(traj.times[-1]),
            "max_abs_phi_s_deg": float(np.rad2deg(np.abs(traj.column("phi_s")).max())),
            "max_abs_cross_track_m": float(np.abs(res.cross_track).max()) if res.cross_track.size else 0.0,
            "final_v_x_m_s": float(traj.column("v_x")[-1]),
            "solver_stats": traj.stats,
        })
    return EXIT_OK


def cmd_sensitivity(cfg: dict) -> int:
    p = _load_params(cfg)
    scenario = _load_scenario(cfg)
    emit = _emit_set(cfg)
    icfg = _integrator(cfg)
    try:
        names = sensitivity.resolve_params(cfg["params"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{exc}; valid names: all_table2, {', '.join(FIELDS)}") from exc
    cfg["params"] = ",".join(names)
    out = _out_dir(cfg)
    _write_json(out / "resolved_config.json", cfg)
    res = sensitivity.run_sensitivity(scenario, names, p, icfg)
    scaled = res.as_scaled()
    if "csv" in emit:
        res.to_csv(out / f"{scenario.name}_sensitivity.csv")
        scaled.to_csv(out / f"{scenario.name}_sensitivity_scaled.csv")
    if "json" in emit:
        shown = scaled if cfg["scaled"] else res
        _write_json(out / f"{scenario.name}_sensitivity_summary.json", {
            "scenario": scenario.name,
            "scaled": bool(cfg["scaled"]),
            "params": list(names),
            "nominal": dict(zip(names, res.nominal.tolist())),
            "peak_abs": {q: {s: float(np.abs(shown.sensitivity(s, q)).max()) for s in res.state_names}
                         for q in names},
        })
    return EXIT_OK


def cmd_estimate(cfg: dict) -> int:
    p = _load_params(cfg)
    emit = _emit_set(cfg)
    icfg = _integrator(cfg)
    free = [s.strip() for s in str(cfg["free_params"]).split(",") if s.strip()]
    if not free:
        raise ConfigError("--free-params is empty; name at least one parameter")
    unknown = [s for s in free if s not in FIELDS]
    if unknown:
        raise ConfigError(f"unknown parameter(s) {unknown}; valid names: {', '.join(FIELDS)}")
    if cfg["dataset"] is not None:
        path = Path(cfg["dataset"])
        if not path.is_file():
            raise ConfigError(f"dataset file not found: {path}")
        try:
            data = estimation.Dataset.from_csv(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg["scenario"] = None
    else:
        scenario = _load_scenario(cfg)
        data = estimation.synthetic_dataset(scenario, p, noise=float(cfg["noise"]), seed=int(cfg["seed"]),
                                            config=icfg)
    out = _out_dir(cfg)
    _write_json(out / "resolved_config.json", cfg)
    if cfg["dataset"] is None and "csv" in emit:
        data.to_csv(out / "dataset.csv")
    k = 1.0 + float(cfg["init_offset"])
    p0 = p.replace(**{n: getattr(p, n) * k for n in free})
    opts = estimation.FitOptions(max_iter=int(cfg["max_iter"]), integrator=icfg)
    report = estimation.fit(data, p0, free, opts)
    report.to_json(out / "fit_report.json")
    print(f"status {report.status}; " + ", ".join(f"{n} = {v:.6g}" for n, v in report.estimates().items()))
    return EXIT_OK if report.status in estimation.CONVERGED else EXIT_NOT_CONVERGED


def _uq_summary(result: uq.UQResult) -> dict:
    return {
        "n_members": len(result.members),
        "n_windows": len(result.windows),
        "n_diverged": result.n_diverged(),
        "max_abs_phi_s_deg": float(np.rad2deg(result.max_abs("phi_s"))),
        "max_lat_half_width_m": float(max(np.nanmax(e.half_width("lat_s")) for e in result.envelopes)),
        "rollover_raised": any(w.raised for w in result.warnings if w.type == "rollover"),
        "lane_departure_raised": any(w.raised for w in result.warnings if w.type == "lane_departure"),
    }


def _all_diverged(result: uq.UQResult) -> bool:
    return all(w.diverged.all() for w in result.windows)


def cmd_uq(cfg: dict) -> int:
    p = _load_params(cfg)
    scenario = _load_scenario(cfg)
    emit = _emit_set(cfg)
    icfg = _integrator(cfg)
    spec = _spec(cfg)
    jobs = _jobs(cfg)
    out = _out_dir(cfg)
    _write_json(out / "resolved_config.json", cfg)
    result = uq.run_uq(scenario, spec, p, float(cfg["reinit"]), float(cfg["horizon"]), jobs, icfg,
                       rollover_threshold=np.deg2rad(float(cfg["rollover_threshold"])))
    if _all_diverged(result):
        print("numerical failure in uq: every ensemble member diverged", file=sys.stderr)
        return EXIT_NUMERICAL
    if "csv" in emit or "svg" in emit:
        files = result.write(out, svg="svg" in emit)
        if "csv" not in emit:
            for f in files:
                if f.suffix == ".csv":
                    f.unlink()
    else:
        _write_json(out / "warnings.json", uq.summarize_warnings(result.warnings))
    if "json" in emit:
        _write_json(out / "uq_summary.json", _uq_summary(result))
    return EXIT_OK


def cmd_mitigate(cfg: dict) -> int:
    p = _load_params(cfg)
    scenario = _load_scenario(cfg)
    emit = _emit_set(cfg)
    icfg = _integrator(cfg)
    spec = _spec(cfg)
    jobs = _jobs(cfg)
    mcfg = uq.MitigationConfig(np.deg2rad(float(cfg["roll_limit"])), float(cfg["k_dec"]), float(cfg["v_min"]) / 3.6)
    out = _out_dir(cfg)
    _write_json(out / "resolved_config.json", cfg)
    reinit, horizon = float(cfg["reinit"]), float(cfg["horizon"])
    mit = uq.speed_adaptation_loop(scenario, spec, mcfg, p, reinit, horizon, jobs, icfg)
    threshold = np.deg2rad(float(cfg["rollover_threshold"]))
    runs = {}
    for label, nominal in (("unmitigated", mit.unmitigated), ("mitigated", mit.mitigated)):
        runs[label] = uq.run_uq(scenario, spec, p, reinit, horizon, jobs, icfg, rollover_threshold=threshold,
                                nominal=nominal)
        if _all_diverged(runs[label]):
            print(f"numerical failure in mitigate ({label} ensemble): every member diverged", file=sys.stderr)
            return EXIT_NUMERICAL
    if "csv" in emit:
        tm = mit.mitigated.trajectory
        tu = mit.unmitigated.trajectory
        n = min(tm.times.size, tu.times.size)
        red = np.append(mit.mitigated.speed_reduction, mit.mitigated.speed_reduction[-1:])[:n]
        write_csv(out / "roll_traces.csv", ["t", "phi_s_unmitigated", "phi_s_mitigated", "v_x_unmitigated",
                                            "v_x_mitigated", "speed_reduction"],
                  np.column_stack((tm.times[:n], tu.column("phi_s")[:n], tm.column("phi_s")[:n],
                                   tu.column("v_x")[:n], tm.column("v_x")[:n], red)))
        for label, res in runs.items():
            res.write(out / label, svg="svg" in emit)
    if "json" in emit:
        first = mit.first_intervention
        after = [w for w in runs["mitigated"].windows if first is not None and w.t0 >= first - 1e-9]
        _write_json(out / "mitigation_summary.json", {
            "unmitigated_max_abs_phi_s_deg": float(np.rad2deg(runs["unmitigated"].max_abs("phi_s"))),
            "mitigated_max_abs_phi_s_deg": float(np.rad2deg(runs["mitigated"].max_abs("phi_s"))),
            "mitigated_max_abs_phi_s_after_first_intervention_deg":
                float(np.rad2deg(max(np.nanmax(np.abs(w.signal("phi_s"))) for w in after))) if after else None,
            "first_intervention_s": first,
            "interventions": [{"t_s": t, "predicted_max_abs_phi_s_deg": float(np.rad2deg(pk)),
                               "speed_reduction_m_s": r} for t, pk, r in mit.interventions],
        })
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sensitivity": cmd_sensitivity, "estimate": cmd_estimate,
            "uq": cmd_uq, "mitigate": cmd_mitigate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"numerical failure in integrator: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EndOfPath as exc:
        print(f"numerical failure in path follower: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
