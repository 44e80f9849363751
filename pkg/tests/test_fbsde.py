import json
import math

import numpy as np
import pytest

from oracles import portfolio_control_by_grid, portfolio_value_by_ode
from robustsmp.fbsde import (RegressionBasis, SolverConfig, backward_nature, backward_planner, conjugacy_gap,
                             isaac_details, nature_update, picard_solve, planner_update, random_perturbations,
                             saddle_probe, solution_columns, write_report, write_solution_csv)
from robustsmp.model import Coefficients, Driver, ProblemSpec, RunningCost, TerminalCost
from robustsmp.scenarios import gibbs_linear, portfolio, portfolio_oracle, zero_cost
from robustsmp.simulate import TiltField, make_ensemble, read_trajectory_csv, simulate_density, simulate_state


def brownian_spec(terminal, driver=None, b=0.0, nu=1.0, x0=0.0):
    co = Coefficients.build(n=1, d=1, r=0, b=[[b]], c=[[1.0]], nu=[[nu]])
    return ProblemSpec(coefficients=co, driver=driver or Driver("quadratic-z", beta=0.0),
                       running=RunningCost.half_square(1), terminal=terminal, T=1.0, x0=np.array([x0]))


def node_rms(err):
    """Largest over grid nodes of the root-mean-square error across paths."""
    return float(np.sqrt(np.mean(err ** 2, axis=0)).max())


def prepared(spec, M=20_000, N=50, seed=0, psi=0.0, tilt=None):
    ens = make_ensemble(spec, M, N, seed)
    simulate_state(ens, spec, np.array([psi]))
    simulate_density(ens, spec, tilt or TiltField.null())
    return ens


# -- oracles ----------------------------------------------------------------


def test_portfolio_control_oracle_matches_grid_search():
    assert portfolio_control_by_grid() == pytest.approx(-0.1 / 1.04, abs=1e-8)
    assert portfolio_oracle()["psi"] == pytest.approx(-0.096154, abs=1e-6)


def test_portfolio_value_oracle_matches_ode():
    psi = portfolio_oracle()["psi"]
    assert portfolio_oracle()["Y0"] == pytest.approx(portfolio_value_by_ode(psi), abs=1e-10)


# -- backward sweeps ---------------------------------------------------------


def test_nature_sweep_recovers_martingale():
    spec = brownian_spec(TerminalCost.affine([1.0]), x0=0.5)
    ens = prepared(spec, M=100_000, N=20)
    Y, Z = backward_nature(ens, spec, np.zeros(1))
    assert node_rms(Y - ens.X[:, :, 0]) <= 0.02
    assert node_rms(Z[:, :, 0] - 1.0) <= 0.02


def test_nature_sweep_constant_terminal():
    spec = brownian_spec(TerminalCost.affine([0.0], c0=1.0))
    ens = prepared(spec, M=2000, N=20)
    Y, Z = backward_nature(ens, spec, np.zeros(1))
    assert np.max(np.abs(Y - 1.0)) <= 1e-10
    assert np.max(np.abs(Z)) <= 1e-10


def test_nature_sweep_portfolio_value():
    spec = portfolio()
    psi = portfolio_oracle()["psi"]
    ens = prepared(spec, M=50_000, N=50, seed=2, psi=psi)
    Y, _ = backward_nature(ens, spec, np.array([psi]))
    assert abs(float(np.mean(Y[:, 0])) - portfolio_value_by_ode(psi)) <= 0.02


def test_planner_sweep_reproduces_density():
    spec = gibbs_linear(0.5)
    tilt = TiltField.constant(0.0, 0.5)
    ens = prepared(spec, M=20_000, N=50, psi=-0.5, tilt=tilt)
    p, k = backward_planner(ens, spec, tilt=tilt, q=ens.q)
    # terminal slope is beta, so p_T = beta q_T and the martingale closure keeps p = beta q
    assert node_rms(p[:, :, 0] - 0.5 * ens.q) <= 0.02
    assert abs(float(np.mean(p[:, 0, 0])) - 0.5) <= 0.02


def test_planner_sweep_linear_growth():
    spec = brownian_spec(TerminalCost.affine([1.0]), b=0.3)
    ens = prepared(spec, M=500, N=40)
    p, k = backward_planner(ens, spec, q=ens.q)
    expected = np.exp(0.3 * (1.0 - ens.times))
    assert np.max(np.abs(p[:, :, 0] - expected)) <= 1e-6
    assert np.max(np.abs(k)) <= 1e-6


def test_planner_sweep_zero_terminal():
    spec = brownian_spec(TerminalCost.zero(1))
    ens = prepared(spec, M=500, N=10)
    p, k = backward_planner(ens, spec, q=ens.q)
    assert np.all(p == 0.0) and np.all(k == 0.0)


# -- best responses -----------------------------------------------------------


def test_nature_update_quadratic_and_logcosh():
    Y = np.array([[0.3, -0.2, 0.0]])
    Z = np.array([[[1.5], [-0.4]]])
    tilt = nature_update(Driver("quadratic-z", beta=1.0), Y, Z)
    assert np.all(tilt.Ystar == 0.0) and np.array_equal(tilt.Zstar, Z)
    lam = 2.5
    tilt = nature_update(Driver("quadratic-z", beta=lam), Y, Z)
    assert np.allclose(tilt.Zstar, lam * Z)
    tilt = nature_update(Driver("smoothed-y-quadratic-z", alpha=0.7, beta=1.0), np.zeros((1, 3)), Z)
    assert np.all(tilt.Ystar == 0.0)


def test_planner_update_arithmetic():
    spec = brownian_spec(TerminalCost.zero(1))
    ens = make_ensemble(spec, 3, 2, 0)
    q = np.full((3, 3), 2.0)
    p = np.full((3, 3, 1), 4.0)
    k = np.zeros((3, 2, 1, 1))
    assert np.allclose(planner_update(spec, ens, p, k, q), -2.0)
    assert np.all(planner_update(spec, ens, np.zeros_like(p), k, q) == 0.0)


def test_planner_update_portfolio_relation():
    spec = portfolio(c=0.3, sigma=0.4)
    ens = make_ensemble(spec, 4, 3, 0)
    rng = np.random.default_rng(0)
    q = rng.uniform(0.5, 2.0, (4, 4))
    p = rng.normal(size=(4, 4, 1))
    k = rng.normal(size=(4, 3, 1, 1))
    psi = planner_update(spec, ens, p, k, q)
    expected = -(p[:, :3, 0] * 0.3 + 0.4 * k[:, :, 0, 0]) / q[:, :3]
    assert np.allclose(psi[:, :, 0], expected, atol=1e-14)


# -- Picard iteration -----------------------------------------------------------


def test_gibbs_saddle(gibbs_small):
    assert gibbs_small.converged
    assert np.max(np.abs(gibbs_small.control_profile() + 0.5)) <= 0.02
    # pointwise tilt noise is ~ sqrt(2 * 4 / M); its node averages carry only the bias
    assert np.max(np.abs(gibbs_small.controls.tilt.Zstar[:, :, 0].mean(axis=0) - 0.5)) <= 0.02


def test_portfolio_saddle(portfolio_small):
    assert portfolio_small.converged
    assert np.max(np.abs(portfolio_small.control_profile() - portfolio_oracle()["psi"])) <= 1e-3


def test_zero_cost_saddle():
    sol = picard_solve(zero_cost(), 2000, 20, 0)
    assert sol.converged
    assert np.max(np.abs(sol.controls.psi)) <= 1e-12
    assert np.max(np.abs(sol.controls.tilt.Zstar)) <= 1e-12
    assert sol.J.value == pytest.approx(0.0, abs=1e-12)


def test_backward_values_are_fixed_by_their_projection(gibbs_small, portfolio_small):
    for sol in (gibbs_small, portfolio_small):
        basis = sol.config.basis
        for k in (1, sol.ensemble.N // 2, sol.ensemble.N - 1):
            des = basis.design(sol.ensemble.X[:, k])
            Y = sol.controls.Y[:, k]
            assert np.max(np.abs(des.project(Y) - Y)) <= 1e-10


def test_solver_is_deterministic():
    a = picard_solve(gibbs_linear(0.5), 3000, 20, 9)
    b = picard_solve(gibbs_linear(0.5), 3000, 20, 9)
    for name in ("psi", "Y", "Z", "P", "K", "q"):
        assert getattr(a.controls, name).tobytes() == getattr(b.controls, name).tobytes(), name
    assert a.report() == b.report()


def test_cost_standard_error_scales_with_paths(gibbs_small):
    big = picard_solve(gibbs_linear(0.5, 1.0), 20_000, 50, 11)
    ratio = gibbs_small.costs.J.std_error / big.costs.J.std_error
    assert 1.3 <= ratio <= 1.55


def test_residual_history_decreases_overall(portfolio_small):
    hist = portfolio_small.residual_history
    assert hist[-1] <= portfolio_small.config.tol_residual
    assert hist[-1] < hist[0]


def test_planner_first_order_reaches_same_saddle(gibbs_small):
    cfg = SolverConfig(order="planner-first")
    sol = picard_solve(gibbs_linear(0.5), 10_000, 50, 11, config=cfg)
    assert sol.converged
    assert np.max(np.abs(sol.control_profile() - gibbs_small.control_profile())) <= 1e-4


def test_solver_is_worker_invariant():
    a = picard_solve(portfolio(), 3000, 20, 5, workers=1)
    b = picard_solve(portfolio(), 3000, 20, 5, workers=3)
    assert np.array_equal(a.controls.psi, b.controls.psi)
    assert a.report() == b.report()


def test_non_convergence_is_reported():
    sol = picard_solve(portfolio(), 2000, 20, 0, config=SolverConfig(max_iters=1))
    assert not sol.converged
    assert sol.iterations == 1


def test_piecewise_constant_basis_on_gibbs():
    cfg = SolverConfig(basis=RegressionBasis("piecewise-constant"))
    sol = picard_solve(gibbs_linear(0.5), 5000, 20, 1, config=cfg)
    assert sol.converged
    assert np.max(np.abs(sol.control_profile() + 0.5)) <= 0.02


# -- diagnostics -------------------------------------------------------------


def test_isaac_gap_at_converged_solutions(gibbs_small, portfolio_small):
    for sol in (gibbs_small, portfolio_small):
        assert isaac_details(sol.spec, sol, 1000)["max_gap"] <= 1e-6


def test_isaac_gap_is_one_sided_away_from_saddle():
    sol = picard_solve(portfolio(), 2000, 20, 0, config=SolverConfig(max_iters=1))
    sol.controls.psi = sol.controls.psi + 0.3
    details = isaac_details(sol.spec, sol, 500)
    assert details["min_gap"] >= -1e-12
    assert details["max_gap"] > 1e-6


def test_conjugacy_gap_at_saddle(gibbs_small):
    assert conjugacy_gap(gibbs_small.spec, gibbs_small) <= 1e-10


def test_zero_perturbation_gives_exact_equality(gibbs_small):
    sol = gibbs_small
    zero = [("control", np.zeros((1, sol.ensemble.N, 1))), ("tilt", (0.0, np.zeros((1, sol.ensemble.N, 1))))]
    report = saddle_probe(sol.spec, sol.ensemble, sol, zero)
    assert all(r.delta == 0.0 for r in report.results)


def test_gibbs_probes_have_no_violations(gibbs_small):
    sol = gibbs_small
    perts = random_perturbations(sol.ensemble.times, 1, 1, 10, 10, 0.1, seed=3)
    report = saddle_probe(sol.spec, sol.ensemble, sol, perts)
    assert len(report.results) == 20
    assert not report.violations


# -- dumps ------------------------------------------------------------------


def test_solution_csv_round_trip(tmp_path, gibbs_small):
    path = write_solution_csv(tmp_path / "sol.csv", gibbs_small, paths=[0, 7])
    data = read_trajectory_csv(path)
    assert list(data) == solution_columns(1, 1)
    rows = data["path"] == 7
    cf = gibbs_small.controls
    assert np.array_equal(data["Y"][rows], cf.Y[7])
    assert np.array_equal(data["p_1"][rows], cf.p[7, :, 0])
    assert np.array_equal(data["Z_1"][rows][:-1], cf.Z[7, :, 0])


def test_report_is_json_and_deterministic(tmp_path, gibbs_small):
    a = write_report(tmp_path / "a.json", gibbs_small.report()).read_text()
    b = write_report(tmp_path / "b.json", gibbs_small.report()).read_text()
    assert a == b
    data = json.loads(a)
    assert data["converged"] is True and data["M"] == 10_000
    assert math.isfinite(data["isaac_residual"])
