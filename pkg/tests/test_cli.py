import json

import numpy as np
import pytest

from robustsmp import checks, cli
from robustsmp.fbsde import picard_solve
from robustsmp.meanfield import read_measure_csv
from robustsmp.scenarios import portfolio, portfolio_oracle
from robustsmp.simulate import read_trajectory_csv

FAST = ["--M", "2000", "--N", "20"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text())


def test_solve_portfolio_writes_artifacts(tmp_path):
    out = tmp_path / "pf"
    assert run("solve", "portfolio", *FAST, "--out", out) == cli.EXIT_OK
    report = load(out / "report.json")
    assert report["converged"] and report["scenario"] == "portfolio"
    assert sorted(p.name for p in out.iterdir()) == report["artifacts"] == ["plot.csv", "report.json", "solution.csv"]
    assert report["solution"]["oracle"]["psi"] == pytest.approx(portfolio_oracle()["psi"], abs=1e-12)
    assert np.max(np.abs(np.array(report["solution"]["control_profile"]) - portfolio_oracle()["psi"])) <= 1e-3
    assert report["solution"]["density_positive"] and report["solution"]["mass_bound_holds"]


def test_identical_command_lines_give_identical_reports(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("solve", "gibbs-linear", *FAST, "--seed", 4, "--out", a) == 0
    assert run("solve", "gibbs-linear", *FAST, "--seed", 4, "--out", b, "--workers", 3) == 0
    for name in ("report.json", "solution.csv", "plot.csv"):
        left = (a / name).read_bytes().replace(str(a).encode(), b"")
        right = (b / name).read_bytes().replace(str(b).encode(), b"")
        assert left == right, name


def test_solution_csv_round_trip(tmp_path):
    out = tmp_path / "rt"
    assert run("solve", "portfolio", *FAST, "--seed", 1, "--dump-paths", 5, "--out", out) == 0
    sol = picard_solve(portfolio(), 2000, 20, 1)
    data = read_trajectory_csv(out / "solution.csv")
    assert sorted(set(data["path"].astype(int))) == list(range(5))
    rows = data["path"] == 4
    assert np.array_equal(data["Y"][rows], sol.controls.Y[4])
    assert np.array_equal(data["psi_1"][rows][:-1], sol.controls.psi[4, :, 0])


def test_plot_csv_round_trip(tmp_path):
    sol = picard_solve(portfolio(), 2000, 20, 1)
    path = cli.write_plot_csv(tmp_path / "plot.csv", sol)
    cols, table = cli.read_plot_csv(path)
    assert cols == cli.plot_columns(1)
    assert np.array_equal(table[:, 1:], cli.plot_table(sol)[:, 1:], equal_nan=True)
    assert np.array_equal(table[:, 0], sol.ensemble.times)


def test_emit_plots_only_writes_plot_data(tmp_path):
    out = tmp_path / "pl"
    assert run("emit-plots", "gibbs-linear", *FAST, "--out", out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["plot.csv", "report.json"]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(target))
    assert run("solve", "portfolio", *FAST) == 0
    assert (target / "report.json").exists()


def test_systemic_risk_reports_every_agent(tmp_path):
    out = tmp_path / "sr"
    assert run("solve", "systemic-risk", "--Nagents", 3, *FAST, "--out", out) == 0
    report = load(out / "report.json")
    assert len(report["solution"]["agents"]) == 3
    assert report["solution"]["report"]["residual"] <= report["solution"]["report"]["solver"]["tol_residual"]


def test_meanfield_solve_writes_measure(tmp_path):
    out = tmp_path / "mf"
    assert run("solve", "mfc-quadratic", *FAST, "--out", out) == 0
    mu = read_measure_csv(out / "measure.csv")
    assert mu.size == 2000
    assert load(out / "report.json")["measure"]["mass"] == pytest.approx(mu.mass, rel=1e-12)


def test_not_converged_exit_code(tmp_path):
    assert run("solve", "portfolio", *FAST, "--max-iters", 1, "--out", tmp_path) == cli.EXIT_NOT_CONVERGED
    assert load(tmp_path / "report.json")["converged"] is False


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenario": "portfolio", "params": {"c": 0.2}, "run": {"M": 1500, "N": 10, "seed": 2}}))
    out = tmp_path / "cfg"
    assert run("solve", "portfolio", "--config", cfg, "--N", 12, "--out", out) == 0
    report = load(out / "report.json")
    assert report["run"]["M"] == 1500 and report["run"]["N"] == 12 and report["run"]["seed"] == 2
    assert report["params"]["c"] == 0.2


def test_config_parse_error_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "run": {"M": 10,}\n}\n')
    assert run("solve", "portfolio", "--config", cfg, "--out", tmp_path) == cli.EXIT_ERROR
    assert "line 2" in capsys.readouterr().err


def test_config_unknown_key_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"run": {"paths": 10}}))
    assert run("solve", "portfolio", "--config", cfg, "--out", tmp_path) == cli.EXIT_ERROR
    assert "paths" in capsys.readouterr().err


def test_custom_scenario_from_spec_config(tmp_path):
    cfg = tmp_path / "custom.json"
    cfg.write_text(json.dumps({"spec": {
        "dims": {"n": 1, "d": 1, "r": 1}, "horizon": 1.0, "x0": [1.0],
        "coefficients": {"c": [[0.1]], "sigma": [[[0.2]]]},
        "driver": {"family": "quadratic-z", "beta": 1.0, "L": 1.0},
        "running": {"M": [[1.0]], "m": [0.0]},
        "terminal": {"variant": "linear", "g": {"kind": "affine", "w": [1.0]}}}}))
    out = tmp_path / "custom"
    assert run("solve", "custom", "--config", cfg, *FAST, "--out", out) == 0
    profile = np.array(load(out / "report.json")["solution"]["control_profile"])
    assert np.max(np.abs(profile - portfolio_oracle()["psi"])) <= 1e-3


def test_custom_scenario_without_spec_fails(tmp_path):
    assert run("solve", "custom", *FAST, "--out", tmp_path) == cli.EXIT_ERROR


def test_check_duality_passes(tmp_path, capsys):
    assert run("check", "duality", "--out", tmp_path) == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] and summary["checks"]
    assert all({"name", "tolerance", "observed", "passed"} <= set(c) for c in summary["checks"])
    assert load(tmp_path / "check-duality.json") == summary


def test_check_donsker_varadhan_exact(capsys):
    assert run("check", "donsker-varadhan") == 0
    summary = json.loads(capsys.readouterr().out)
    assert all(c["observed"] <= 1e-12 for c in summary["checks"] if c["tolerance"] == 1e-12)


def test_check_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setitem(checks.SUITES, "duality", lambda seed=0: [checks.at_most("broken", 1.0, 0.5)])
    assert run("check", "duality") == cli.EXIT_CHECK_FAILED
    summary = json.loads(capsys.readouterr().out)
    assert not summary["passed"]


def test_compare_reports_gaps(tmp_path):
    out = tmp_path / "cmp"
    code = run("compare", "--M", 2000, "--N", 20, "--out", out)
    report = load(out / "report.json")
    assert code == (cli.EXIT_OK if report["within_tolerance"] else cli.EXIT_CHECK_FAILED)
    assert {"d1", "control_sup_gap", "mfc", "mfg_agent"} <= set(report)
    assert read_measure_csv(out / "measure_mfg.csv").size == 2000


def test_compare_tight_tolerance_fails(tmp_path):
    assert run("compare", "--M", 2000, "--N", 20, "--tol-d1", 1e-12, "--out", tmp_path) == cli.EXIT_CHECK_FAILED


def test_bad_arguments_exit_nonzero():
    with pytest.raises(SystemExit) as exc:
        run("solve", "no-such-scenario")
    assert exc.value.code != 0
