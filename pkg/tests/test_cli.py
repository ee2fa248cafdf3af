import json
import subprocess
import sys

import pytest

from trailer_uq.cli import build_parser, main
from trailer_uq.params import TABLE2_PARAMS, ParameterSet
from trailer_uq.scenarios import Scenario, builtin


@pytest.fixture(scope="module")
def short_ot_file(tmp_path_factory):
    sc = builtin("ot")
    f = tmp_path_factory.mktemp("sc") / "ot_short.json"
    Scenario("ot_short", sc.path, 7.0).to_json(f)
    return str(f)


@pytest.fixture(scope="module")
def short_ic_file(tmp_path_factory):
    sc = builtin("ic")
    f = tmp_path_factory.mktemp("sc") / "ic_short.json"
    Scenario("ic_short", sc.path, 10.0).to_json(f)
    return str(f)


def _run(*argv):
    return main([str(a) for a in argv])


def test_simulate_outputs_and_byte_identical_rerun(tmp_path, short_ic_file):
    for d in ("a", "b"):
        assert _run("simulate", "--scenario", short_ic_file, "--out", tmp_path / d) == 0
    for name in ("ic_short_trajectory.csv", "ic_short_inputs.csv", "ic_short_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "ic_short_inputs.csv").read_text().splitlines()
    assert lines[0] == "t,delta_f,kappa" and len(lines) == 10 * 50 + 1
    assert "\r" not in (tmp_path / "a" / "ic_short_trajectory.csv").read_text()
    cfg = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert cfg["command"] == "simulate" and cfg["scenario"] == short_ic_file


def test_simulate_builtin_ic_names(tmp_path):
    assert _run("simulate", "--scenario", "ic", "--out", tmp_path, "--emit", "csv") == 0
    assert (tmp_path / "ic_trajectory.csv").is_file() and (tmp_path / "ic_inputs.csv").is_file()
    assert not (tmp_path / "ic_summary.json").exists()


def test_missing_params_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert _run("simulate", "--params-file", missing, "--out", tmp_path) == 1
    assert str(missing) in capsys.readouterr().err


def test_params_file_and_config_precedence(tmp_path, short_ic_file):
    pf = tmp_path / "p.json"
    pf.write_text(json.dumps({"m_s": 30000.0}))
    cf = tmp_path / "c.json"
    cf.write_text(json.dumps({"rtol": 1e-5, "scenario": short_ic_file, "params_file": str(pf)}))
    assert _run("simulate", "--config", cf, "--rtol", "1e-7", "--out", tmp_path / "o") == 0
    cfg = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert cfg["rtol"] == 1e-7 and cfg["scenario"] == short_ic_file and cfg["params_file"] == str(pf)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert _run("simulate", "--config", bad, "--out", tmp_path / "o") == 1
    pbad = tmp_path / "pbad.json"
    pbad.write_text(json.dumps({"mass": 1.0}))
    assert _run("simulate", "--params-file", pbad, "--out", tmp_path / "o") == 1


def test_unknown_scenario(tmp_path):
    assert _run("simulate", "--scenario", "nowhere", "--out", tmp_path) == 1


def test_sensitivity_columns_and_unknown_param(tmp_path, capsys):
    assert _run("sensitivity", "--params", "C_alpha_s", "--out", tmp_path) == 0
    header = (tmp_path / "ramp_steer_sensitivity.csv").read_text().splitlines()[0].split(",")
    assert "dX_h_dC_alpha_s" in header and "dphi_s_dC_alpha_s" in header
    rows = [r.split(",") for r in (tmp_path / "ramp_steer_sensitivity.csv").read_text().splitlines()[100:103]]
    scaled = [r.split(",") for r in
              (tmp_path / "ramp_steer_sensitivity_scaled.csv").read_text().splitlines()[100:103]]
    k = header.index("dY_h_dC_alpha_s")
    for r, s in zip(rows, scaled):
        assert float(s[k]) == pytest.approx(float(r[k]) * ParameterSet().C_alpha_s, rel=1e-15)
    capsys.readouterr()
    assert _run("sensitivity", "--params", "wheel_colour", "--out", tmp_path) == 1
    assert "C_alpha_s" in capsys.readouterr().err


def test_sensitivity_all_table2_expansion(tmp_path):
    assert _run("sensitivity", "--params", "all_table2", "--emit", "json", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "ramp_steer_sensitivity_summary.json").read_text())
    assert summary["params"] == list(TABLE2_PARAMS)
    cfg = json.loads((tmp_path / "resolved_config.json").read_text())
    assert cfg["params"] == ",".join(TABLE2_PARAMS)


def test_estimate_self_generated_dataset(tmp_path):
    assert _run("estimate", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "fit_report.json").read_text())
    assert report["status"] in ("gtol", "xtol")
    assert min(report["fit_percent"].values()) >= 99.9
    assert (tmp_path / "dataset.csv").is_file()


def test_estimate_errors(tmp_path, capsys):
    assert _run("estimate", "--free-params", "", "--out", tmp_path) == 1
    ds = tmp_path / "d.csv"
    ds.write_text("t,u_delta_f,u_kappa,v_x\n0,0,0,10\n0.02,0,0\n")
    capsys.readouterr()
    assert _run("estimate", "--dataset", ds, "--out", tmp_path) == 1
    assert "line 3" in capsys.readouterr().err
    assert _run("estimate", "--dataset", tmp_path / "none.csv", "--out", tmp_path) == 1


def test_estimate_not_converged_exit_code(tmp_path):
    assert _run("estimate", "--max-iter", "1", "--out", tmp_path) == 3
    assert (tmp_path / "fit_report.json").is_file()


def test_uq_requires_seed(tmp_path, short_ot_file):
    assert _run("uq", "--scenario", short_ot_file, "--out", tmp_path) == 1


def test_uq_smoke_and_determinism_across_jobs(tmp_path, short_ot_file):
    common = ["uq", "--scenario", short_ot_file, "--epsilon", "0.15", "--n", "5", "--seed", "7", "--emit",
              "csv,json,svg"]
    assert _run(*common, "--jobs", "1", "--out", tmp_path / "a") == 0
    assert _run(*common, "--jobs", "2", "--out", tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "warnings.json" in files and "uq_summary.json" in files and "envelope_phi_s.svg" in files
    assert sum(f.startswith("envelope_t0_") for f in files) == 3
    for name in files:
        if name == "resolved_config.json":
            continue
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    warnings = json.loads((tmp_path / "a" / "warnings.json").read_text())
    assert {w["type"] for w in warnings} == {"rollover", "lane_departure"}
    assert set(warnings[0]) == {"type", "first_crossing_time", "member_fraction"}


def test_mitigate_smoke(tmp_path, short_ot_file):
    assert _run("mitigate", "--scenario", short_ot_file, "--n", "3", "--seed", "1", "--jobs", "1",
                "--roll-limit", "0.2", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "mitigation_summary.json").read_text())
    assert summary["first_intervention_s"] is not None
    assert (tmp_path / "roll_traces.csv").read_text().splitlines()[0].startswith("t,phi_s_unmitigated")
    assert (tmp_path / "mitigated" / "warnings.json").is_file()


@pytest.mark.parametrize("command", ["simulate", "sensitivity", "estimate", "uq", "mitigate"])
def test_help_lists_units(command):
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        if action.type in (int, float):
            assert "[" in action.help and "]" in action.help, action.dest


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "trailer_uq.cli", "uq", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "--seed" in out and "[deg]" in out
