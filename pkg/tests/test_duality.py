import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustsmp.duality import (DiscreteDistribution, DomainError, donsker_varadhan, dual_lower_bound,
                               dv_objective, entropic_risk, entropy_duality_gap, entropy_h, fenchel_dual,
                               fenchel_gap, perspective_dual, relative_entropy)
from robustsmp.model import Driver

QUAD = Driver("quadratic-z", alpha=0.0, beta=1.0)
LOGCOSH = Driver("smoothed-y-quadratic-z", alpha=1.0, beta=1.0)


# -- scalar entropy -----------------------------------------------------------


@pytest.mark.parametrize("x, expected", [(1.0, -1.0), (math.e, 0.0), (0.0, 0.0)])
def test_entropy_h_values(x, expected):
    assert entropy_h(x) == pytest.approx(expected, abs=1e-15)


def test_entropy_h_rejects_negative():
    with pytest.raises(DomainError):
        entropy_h(-0.1)


def test_entropy_duality_gap_equality_and_positivity():
    assert entropy_duality_gap(0.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(0)
    xs, x = rng.normal(size=1000), rng.uniform(0, 5, 1000)
    assert np.all(entropy_duality_gap(xs, x) >= -1e-12)


def test_entropy_duality_gap_vanishes_only_on_exponential():
    rng = np.random.default_rng(10)
    xs = rng.normal(scale=2, size=1000)
    assert np.max(np.abs(entropy_duality_gap(xs, np.exp(xs)))) <= 1e-10
    off = np.exp(xs) * rng.choice([0.5, 1.5], size=xs.size)
    assert np.all(entropy_duality_gap(xs, off) > 1e-10)


# -- entropic risk -----------------------------------------------------------


def test_entropic_risk_constant_sample():
    assert entropic_risk(0.7, [3.0] * 10) == pytest.approx(3.0, abs=1e-14)


def test_entropic_risk_gaussian_log_mgf():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(1_000_000)
    theta = 2.0
    e = np.exp(theta * x)
    # delta method for (1/theta) log(mean)
    se = e.std(ddof=1) / math.sqrt(x.size) / e.mean() / theta
    assert abs(entropic_risk(theta, x) - theta / 2) <= 3 * se


def test_entropic_risk_two_point():
    assert entropic_risk(1.0, [0.0, 1.0]) == pytest.approx(math.log((1 + math.e) / 2), abs=1e-14)


def test_entropic_risk_weights_and_errors():
    assert entropic_risk(1.0, [0.0, 1.0], weights=[1, 0]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DomainError):
        entropic_risk(1.0, [])
    with pytest.raises(DomainError):
        entropic_risk(0.0, [1.0])


def test_entropic_risk_monotone_in_theta():
    rng = np.random.default_rng(11)
    x = rng.normal(size=500)
    values = [entropic_risk(theta, x) for theta in np.linspace(0.05, 5, 60)]
    assert np.all(np.diff(values) >= -1e-12)


# -- conjugates -------------------------------------------------------------


def test_quadratic_conjugate_is_self_dual():
    assert fenchel_dual(QUAD, 0.0, 0.0, [1.0]) == pytest.approx(0.5, abs=1e-15)


def test_logcosh_conjugate_closed_form_against_grid_maximisation():
    ys = 0.5
    y = np.linspace(-30, 30, 2_000_001)
    logcosh = np.abs(y) + np.log1p(np.exp(-2 * np.abs(y))) - math.log(2)
    grid = float(np.max(ys * y - logcosh))
    closed = 0.5 * math.atanh(0.5) + 0.5 * math.log(0.75)
    assert closed == pytest.approx(0.1308, abs=1e-4)
    assert fenchel_dual(LOGCOSH, 0.0, ys, [0.0]) == pytest.approx(closed, abs=1e-14)
    assert grid == pytest.approx(closed, abs=1e-9)


def test_logcosh_conjugate_outside_ball_is_infinite():
    assert fenchel_dual(LOGCOSH, 0.0, 1.5, [0.0]) == math.inf


def test_quadratic_conjugate_off_slope_is_infinite():
    drv = Driver("quadratic-z", alpha=0.5, a_y=0.2, beta=1.0)
    assert fenchel_dual(drv, 0.0, 0.3, [0.0]) == math.inf
    assert fenchel_dual(drv, 0.0, 0.2, [0.0]) == 0.0


def test_conjugate_boundary_of_ball_is_finite():
    assert fenchel_dual(LOGCOSH, 0.0, 1.0, [0.0]) == pytest.approx(math.log(2), abs=1e-14)


@pytest.mark.parametrize("drv", [QUAD, LOGCOSH, Driver("quadratic-z", alpha=0.4, a_y=-0.3, beta=2.0, f0=0.5),
                                 Driver("smoothed-y-quadratic-z", alpha=0.3, beta=0.5, f0=-0.2)],
                         ids=["quad", "logcosh", "quad-shift", "logcosh-shift"])
def test_gap_vanishes_on_gradient(drv):
    rng = np.random.default_rng(2)
    y, z = rng.normal(scale=2, size=500), rng.normal(scale=2, size=(500, 3))
    gy, gz = drv.grad(0.0, y, z)
    assert np.max(np.abs(fenchel_gap(drv, 0.0, y, z, gy, gz))) <= 1e-10


def test_gap_positive_off_gradient():
    rng = np.random.default_rng(3)
    y, z = rng.normal(size=100), rng.normal(size=(100, 2))
    gy, gz = LOGCOSH.grad(0.0, y, z)
    off = fenchel_gap(LOGCOSH, 0.0, y, z, 0.5 * gy, gz + 0.3)
    assert np.all(off > 0)


def test_dual_lower_bound_is_pointwise_minorant():
    rng = np.random.default_rng(4)
    for drv in (LOGCOSH, Driver("smoothed-y-quadratic-z", alpha=2.0, beta=0.3, f0=1.0)):
        ys = rng.uniform(-1.2 * drv.alpha, 1.2 * drv.alpha, 2000)
        zs = rng.normal(size=(2000, 2))
        lb, fs = dual_lower_bound(drv, 0.0, ys, zs), fenchel_dual(drv, 0.0, ys, zs)
        finite = np.isfinite(fs)
        assert np.all(lb[finite] <= fs[finite])
        assert np.all(np.isinf(lb[~finite]))


@settings(max_examples=200, deadline=None)
@given(y=st.floats(-20, 20), z=st.floats(-20, 20), ys=st.floats(-0.999, 0.999), zs=st.floats(-20, 20),
       alpha=st.floats(0.05, 3), beta=st.floats(0.05, 3))
def test_fenchel_young_inequality(y, z, ys, zs, alpha, beta):
    drv = Driver("smoothed-y-quadratic-z", alpha=alpha, beta=beta)
    assert fenchel_gap(drv, 0.0, y, [z], ys * alpha, [zs]) >= -1e-12 * (1 + abs(y * ys * alpha) + abs(z * zs))


# -- perspective --------------------------------------------------------------


def test_perspective_homogeneity():
    assert perspective_dual(QUAD, 0.0, 2.0, 0.0, [2.0]) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("drv", [QUAD, LOGCOSH], ids=["quad", "logcosh"])
def test_perspective_positive_homogeneity(drv):
    rng = np.random.default_rng(12)
    for _ in range(200):
        q = rng.uniform(0.1, 5)
        ys = rng.uniform(-0.9, 0.9) * drv.alpha
        zs = rng.normal(size=2)
        lhs = perspective_dual(drv, 0.0, q, q * ys, q * zs)
        assert lhs == pytest.approx(q * fenchel_dual(drv, 0.0, ys, zs), abs=1e-12, rel=1e-12)


def test_perspective_origin_and_recession():
    assert perspective_dual(QUAD, 0.0, 0.0, 0.0, [0.0]) == 0.0
    assert perspective_dual(QUAD, 0.0, 0.0, 0.0, [1.0]) == math.inf
    assert perspective_dual(QUAD, 0.0, -1.0, 0.0, [0.0]) == math.inf


# -- Donsker-Varadhan ---------------------------------------------------------


def test_dv_constant_potential():
    mu = DiscreteDistribution(["a", "b", "c"], [0.2, 0.3, 0.5])
    value, opt = donsker_varadhan(mu, [1.7, 1.7, 1.7])
    assert value == pytest.approx(1.7, abs=1e-14)
    assert np.allclose(opt.probs, mu.probs, atol=1e-15)


def test_dv_two_point_value():
    mu = DiscreteDistribution.uniform([0, 1])
    value, _ = donsker_varadhan(mu, lambda x: float(x))
    assert value == pytest.approx(-math.log((1 + math.exp(-1)) / 2), abs=1e-14)
    assert value == pytest.approx(0.3799, abs=1e-4)


def test_dv_matches_simplex_grid_search():
    mu = DiscreteDistribution([0, 1, 2], [0.5, 0.3, 0.2])
    k = np.array([0.4, -0.3, 1.1])

    def objective(a, b):
        c = 1.0 - a - b
        m = np.stack([a, b, c])
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(m > 0, m * np.log(m / mu.probs[:, None]), 0.0)
        return np.where(c >= 0, ent.sum(axis=0) + k @ m, np.inf)

    a, b = np.meshgrid(np.linspace(0, 1, 401), np.linspace(0, 1, 401))
    vals = objective(a.ravel(), b.ravel())
    i = int(np.argmin(vals))
    a0, b0 = a.ravel()[i], b.ravel()[i]
    fine = np.linspace(-0.005, 0.005, 1001)
    fa, fb = np.meshgrid(a0 + fine, b0 + fine)
    best = float(np.min(objective(fa.ravel(), fb.ravel())))
    value, _ = donsker_varadhan(mu, k)
    assert best == pytest.approx(value, abs=1e-6)
    assert best >= value - 1e-12


def test_dv_identity_and_minimality_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        size = int(rng.integers(1, 11))
        mu = DiscreteDistribution(range(size), rng.dirichlet(np.ones(size)))
        k = rng.normal(scale=3, size=size)
        value, opt = donsker_varadhan(mu, k)
        direct = float(np.sum(opt.probs * np.log(opt.probs / mu.probs)) + opt.probs @ k)
        assert abs(value - direct) <= 1e-12
        for _ in range(20):
            m = DiscreteDistribution(range(size), rng.dirichlet(np.ones(size)))
            assert value <= dv_objective(m, mu, k) + 1e-12


def test_dv_null_atoms_are_ignored():
    mu = DiscreteDistribution([0, 1, 2], [0.5, 0.5, 0.0])
    value, opt = donsker_varadhan(mu, [0.0, 1.0, -50.0])
    assert opt.probs[2] == 0.0
    assert value == pytest.approx(-math.log(0.5 + 0.5 * math.exp(-1)), abs=1e-14)


# -- relative entropy -------------------------------------------------------


def test_relative_entropy_cases():
    mu = DiscreteDistribution.uniform(range(4))
    assert relative_entropy(mu, mu) == 0.0
    point = DiscreteDistribution(range(4), [1.0, 0.0, 0.0, 0.0])
    assert relative_entropy(point, mu) == pytest.approx(math.log(4), abs=1e-15)
    nul = DiscreteDistribution(range(4), [0.5, 0.5, 0.0, 0.0])
    m = DiscreteDistribution(range(4), [0.0, 0.0, 1.0, 0.0])
    assert relative_entropy(m, nul) == math.inf


def test_distribution_validation():
    with pytest.raises(DomainError):
        DiscreteDistribution([0, 1], [0.6, 0.6])
    with pytest.raises(DomainError):
        DiscreteDistribution([0, 1], [-0.1, 1.1])
