import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustsmp.model import (Coefficients, ConfigError, Driver, ModelError, ProblemSpec, RunningCost,
                             TerminalCost, gamma_constant, gamma_formula, load_spec, resolvent, smallness_check,
                             smallness_value, spec_from_config, validate_assumptions)
from robustsmp.scenarios import gibbs_linear


def unit_spec(sigma=0.0, r=0, T=1.0, beta=1.0, nu=1.0, b=0.0):
    co = Coefficients.build(n=1, d=1, r=r, b=[[b]], c=[[1.0]], nu=[[nu]], sigma=[[[sigma]]])
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=beta, L=1.0),
                       running=RunningCost.half_square(1), terminal=TerminalCost.zero(1), T=T, x0=np.zeros(1))


# -- resolvent ---------------------------------------------------------------


def test_resolvent_zero_generator_is_identity():
    for t in (0.0, 0.3, 1.0):
        res = resolvent(unit_spec(), t)
        assert np.array_equal(res.matrix, np.eye(1))


def test_resolvent_scalar_exponential():
    res = resolvent(unit_spec(b=0.3), 1.0)
    assert res.matrix[0, 0] == pytest.approx(math.exp(0.3), abs=1e-12)
    assert res.inverse[0, 0] == pytest.approx(math.exp(-0.3), abs=1e-12)


def test_resolvent_inverse_random_2x2():
    rng = np.random.default_rng(4)
    co = Coefficients.build(n=2, d=1, r=0, b=rng.normal(size=(2, 2)))
    res = resolvent(co, 0.7)
    assert np.allclose(res.matrix @ res.inverse, np.eye(2), atol=1e-10)


def test_resolvent_semigroup_constant_b():
    rng = np.random.default_rng(5)
    co = Coefficients.build(n=3, d=1, r=0, b=rng.normal(size=(3, 3)) * 0.5)
    whole = resolvent(co, 0.9).matrix
    parts = resolvent(co, 0.4).matrix @ resolvent(co, 0.5).matrix
    assert np.allclose(whole, parts, atol=1e-10)


def test_resolvent_time_dependent_matches_product_integral():
    # piecewise-constant b: the product integral is exact on the grid
    co = Coefficients.build(n=1, d=1, r=0, b={"profile": "piecewise", "times": [0.0, 0.5], "values": [[[0.2]], [[-0.4]]]},
                            horizon=1.0)
    res = resolvent(co, 1.0, n_grid=100, T=1.0)
    assert res.matrix[0, 0] == pytest.approx(math.exp(0.5 * 0.2 - 0.5 * 0.4), rel=1e-10)


def test_resolvent_rejects_time_outside_horizon():
    with pytest.raises(ModelError):
        resolvent(unit_spec(), 2.0)


# -- gamma and smallness ----------------------------------------------------


def test_gamma_without_control_volatility():
    assert gamma_constant(unit_spec(sigma=0.0)) == 8.0


def test_gamma_with_unit_control_volatility():
    assert gamma_constant(unit_spec(sigma=1.0, r=1)) == 104.0


def test_gamma_zero_growth_is_degenerate():
    spec = unit_spec(beta=0.0)
    assert spec.gamma == 0.0
    assert spec.degenerate


def test_smallness_boundary():
    assert smallness_value(unit_spec(T=0.2)) == pytest.approx(0.8, abs=1e-15)
    assert smallness_check(unit_spec(T=0.2))
    assert smallness_value(unit_spec(T=0.25)) == 1.0
    assert not smallness_check(unit_spec(T=0.25))


def test_smallness_vacuous_with_controlled_volatility():
    assert smallness_check(unit_spec(sigma=1.0, r=1, T=50.0, nu=3.0))


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0.1, 3), L=st.floats(0.1, 3), nu=st.floats(0, 3), sig=st.floats(0, 3), T=st.floats(0.1, 3),
       bump=st.floats(0.01, 1.0), which=st.integers(0, 4))
def test_gamma_monotone_in_each_bound(beta, L, nu, sig, T, bump, which):
    base = dict(beta=beta, L=L, alpha=0.5, T=T, gamma_norm=1.2, gamma_inv_norm=1.1, nu_norm=nu, sigma_norm=sig)
    key = ("beta", "L", "nu_norm", "sigma_norm", "T")[which]
    bumped = dict(base, **{key: base[key] + bump})
    assert gamma_formula(**bumped) >= gamma_formula(**base)


# -- driver -------------------------------------------------------------------


DRIVERS = [Driver("quadratic-z", alpha=0.5, beta=1.3, a_y=0.3, f0=0.1),
           Driver("smoothed-y-quadratic-z", alpha=0.8, beta=0.7)]


@pytest.mark.parametrize("drv", DRIVERS, ids=lambda d: d.family)
def test_driver_joint_convexity_along_segments(drv):
    rng = np.random.default_rng(0)
    y0, y1 = rng.normal(scale=3, size=(2, 1000))
    z0, z1 = rng.normal(scale=3, size=(2, 1000, 2))
    mid = drv.value(0.0, 0.5 * (y0 + y1), 0.5 * (z0 + z1))
    avg = 0.5 * (drv.value(0.0, y0, z0) + drv.value(0.0, y1, z1))
    assert np.all(mid <= avg + 1e-12)


@pytest.mark.parametrize("drv", DRIVERS, ids=lambda d: d.family)
def test_driver_gradient_matches_central_differences(drv):
    rng = np.random.default_rng(1)
    y = rng.normal(size=200)
    z = rng.normal(size=(200, 2))
    h = 1e-5
    dy, dz = drv.grad(0.0, y, z)
    fd_y = (drv.value(0.0, y + h, z) - drv.value(0.0, y - h, z)) / (2 * h)
    assert np.allclose(fd_y, dy, rtol=1e-6, atol=1e-8)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd_z = (drv.value(0.0, y, z + e) - drv.value(0.0, y, z - e)) / (2 * h)
        assert np.allclose(fd_z, dz[:, j], rtol=1e-6, atol=1e-8)


def test_driver_rejects_negative_growth():
    with pytest.raises(ModelError):
        Driver("quadratic-z", beta=-1.0)
    with pytest.raises(ModelError):
        Driver("cubic")


# -- running and terminal costs -----------------------------------------------


def test_running_cost_minimizer_is_stationary():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 3))
    rc = RunningCost(M=A @ A.T + np.eye(3), m=rng.normal(size=3))
    w = rng.normal(size=(5, 3))
    psi = rc.minimizer(w)
    assert np.allclose(rc.grad(psi) + w, 0.0, atol=1e-12)


def test_running_cost_rejects_asymmetric_weight():
    with pytest.raises(ModelError):
        RunningCost(M=[[1.0, 1.0], [0.0, 1.0]], m=[0.0, 0.0])


def test_softplus_gradient():
    tc = TerminalCost.softplus_sum(1.0, 0.2)
    x = np.linspace(-1, 3, 9)[:, None] * np.ones((1, 3))
    h = 1e-6
    fd = (tc.g(x + h) - tc.g(x - h)) / (2 * h) / 3
    assert np.allclose(fd, tc.grad_g(x)[:, 0], atol=1e-8)


# -- validation -------------------------------------------------------------


def test_gibbs_spec_passes_validation():
    report = validate_assumptions(gibbs_linear())
    assert report.passed, [c.to_dict() for c in report.failures()]


def test_singular_running_cost_fails_strong_convexity():
    spec = gibbs_linear().replace(running=RunningCost(M=np.zeros((1, 1)), m=np.zeros(1)))
    failed = {c.name for c in validate_assumptions(spec).failures()}
    assert "running_strong_convexity" in failed


def test_excess_y_slope_fails_growth_check():
    spec = gibbs_linear().replace(driver=Driver("quadratic-z", alpha=0.25, a_y=0.5, beta=1.0))
    report = validate_assumptions(spec)
    check = report["driver_y_growth"]
    assert not check.passed
    assert check.witness is not None


def test_volatility_flag_mismatch_is_reported():
    spec = unit_spec(sigma=0.5, r=0)
    assert not validate_assumptions(spec)["volatility_flag"].passed


# -- config -------------------------------------------------------------------


CONFIG = {"dims": {"n": 1, "d": 1, "r": 1}, "horizon": 1.0, "x0": [1.0],
          "coefficients": {"c": [[0.1]], "sigma": [[[0.2]]]},
          "driver": {"family": "quadratic-z", "beta": 1.0, "L": 1.0},
          "running": {"M": [[1.0]], "m": [0.0]},
          "terminal": {"variant": "linear", "g": {"kind": "affine", "w": [1.0]}}}


def test_config_round_trip_matches_builder():
    spec = spec_from_config(CONFIG)
    assert spec.n == 1 and spec.r == 1
    assert spec.gamma == pytest.approx(8 * (12 * 0.2))
    assert float(spec.terminal.g(np.array([[2.5]]))[0]) == 2.5


def test_config_rejects_unknown_keys():
    bad = dict(CONFIG, extra=1)
    with pytest.raises(ConfigError, match="extra"):
        spec_from_config(bad)
    bad = dict(CONFIG, driver={"family": "quadratic-z", "gamma": 2})
    with pytest.raises(ConfigError, match="gamma"):
        spec_from_config(bad)


def test_config_parse_error_reports_line(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text('{\n  "dims": {"n": 1,\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_spec(path)


def test_load_spec_from_text_and_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(CONFIG))
    a, b = load_spec(path), load_spec(json.dumps(CONFIG))
    assert a.gamma == b.gamma
