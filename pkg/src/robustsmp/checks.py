"""Invariant suites behind ``robustsmp check``.

Every check yields a :class:`Check` row with the observed value and the
tolerance it is held to, so a suite run doubles as a machine-readable audit.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import duality as du
from . import meanfield as mf
from .model import Coefficients, Driver, ProblemSpec, RunningCost, TerminalCost, gamma_constant, smallness_check


@dataclass
class Check:
    name: str
    tolerance: float
    observed: float
    passed: bool
    relation: str = "<="

    def to_dict(self) -> dict:
        obs = self.observed
        if isinstance(obs, float) and not math.isfinite(obs):
            obs = repr(obs)
        return {"name": self.name, "tolerance": self.tolerance, "observed": obs,
                "relation": self.relation, "passed": bool(self.passed)}


def at_most(name: str, observed: float, tol: float) -> Check:
    return Check(name, tol, float(observed), bool(observed <= tol), "<=")


def at_least(name: str, observed: float, tol: float) -> Check:
    return Check(name, tol, float(observed), bool(observed >= tol), ">=")


def equals(name: str, observed: float, target: float) -> Check:
    return Check(name, target, float(observed), bool(observed == target), "==")


# ---------------------------------------------------------------------------
# duality


def _driver_families() -> dict[str, Driver]:
    return {"quadratic-z": Driver("quadratic-z", alpha=0.5, beta=1.3, a_y=0.3, f0=0.2),
            "smoothed-y-quadratic-z": Driver("smoothed-y-quadratic-z", alpha=0.7, beta=0.8, f0=-0.1)}


def fenchel_checks(n_points: int = 10_000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for label, drv in _driver_families().items():
        y = rng.normal(scale=3.0, size=n_points)
        z = rng.normal(scale=2.0, size=(n_points, 2))
        if drv.smoothed:
            ys = rng.uniform(-drv.alpha, drv.alpha, n_points)
        else:
            ys = np.full(n_points, drv.a_y)
        zs = rng.normal(scale=2.0, size=(n_points, 2))
        gap = du.fenchel_gap(drv, 0.0, y, z, ys, zs)
        out.append(at_least(f"fenchel_gap_nonnegative[{label}]", float(np.min(gap)), -1e-12))
        gy, gz = drv.grad(0.0, y, z)
        on = du.fenchel_gap(drv, 0.0, y, z, gy, gz)
        out.append(at_most(f"fenchel_gap_on_gradient[{label}]", float(np.max(np.abs(on))), 1e-10))
        excess = du.dual_lower_bound(drv, 0.0, ys, zs) - du.fenchel_dual(drv, 0.0, ys, zs)
        out.append(at_most(f"dual_lower_bound_pointwise[{label}]", float(np.max(excess)), 0.0))
    x = rng.uniform(0.0, 5.0, n_points)
    xs = rng.normal(scale=2.0, size=n_points)
    out.append(at_least("entropy_duality_gap_nonnegative", float(np.min(du.entropy_duality_gap(xs, x))), -1e-12))
    return out


def dv_checks(instances: int = 50, competitors: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_exact = 0.0
    worst_excess = -math.inf
    for _ in range(instances):
        size = int(rng.integers(1, 11))
        mu = du.DiscreteDistribution(range(size), rng.dirichlet(np.ones(size)))
        k = rng.normal(scale=2.0, size=size)
        value, opt = du.donsker_varadhan(mu, k)
        worst_exact = max(worst_exact, abs(value - du.dv_objective(opt, mu, k)))
        for _ in range(competitors):
            m = du.DiscreteDistribution(range(size), rng.dirichlet(np.full(size, 0.5)))
            worst_excess = max(worst_excess, value - du.dv_objective(m, mu, k))
    return [at_most("donsker_varadhan_exact", worst_exact, 1e-12),
            at_most("donsker_varadhan_minimal", worst_excess, 1e-12)]


def duality_suite(seed: int = 0) -> list[Check]:
    return fenchel_checks(seed=seed) + dv_checks(seed=seed)


# ---------------------------------------------------------------------------
# simulate


def entropy_identity_checks(zstar: float = 0.8, T: float = 1.0, M: int = 100_000, N: int = 100,
                            seed: int = 0) -> list[Check]:
    from .scenarios import zero_cost
    from .simulate import entropy_identity_check, make_ensemble
    ens = make_ensemble(zero_cost(T), M, N, seed)
    res = entropy_identity_check(ens, zstar)
    target = 0.5 * zstar ** 2 * T
    se = res["se_pooled"]
    return [at_most("entropy_identity_lhs_rhs", abs(res["diff"]), 3 * se),
            at_most("entropy_identity_lhs_closed_form", abs(res["lhs"] - target), 3 * se),
            at_most("entropy_identity_rhs_closed_form", abs(res["rhs"] - target), 3 * se)]


def simulate_suite(M: int = 100_000, N: int = 100, seed: int = 0) -> list[Check]:
    from .scenarios import gibbs_linear, zero_cost
    from .simulate import TiltField, doleans_mean, make_ensemble, mass_bound_holds, simulate_density, simulate_state
    out = []
    ens = make_ensemble(zero_cost(1.0), M, N, seed)
    for z in (0.3, 0.8, 1.5):
        est = doleans_mean(ens, z)
        out.append(at_most(f"doleans_mean[Z*={z}]", abs(est.value - 1.0), 3 * est.std_error))
        q = simulate_density(ens, None, TiltField.constant(0.0, z))
        out.append(at_least(f"density_positive_fraction[Z*={z}]", float(np.mean(q > 0)), 1.0))
        out.append(equals(f"mass_bound[Z*={z}]", float(mass_bound_holds(q[:, -1], 0.0, 1.0)), 1.0))
    out += entropy_identity_checks(0.8, 1.0, M, N, seed)
    spec = gibbs_linear()
    small = min(M, 5000)
    a = make_ensemble(spec, small, 20, seed, workers=1)
    b = make_ensemble(spec, small, 20, seed, workers=3)
    simulate_state(a, spec, np.full(spec.n, -0.5))
    simulate_state(b, spec, np.full(spec.n, -0.5))
    out.append(at_most("worker_invariance", float(np.max(np.abs(a.X - b.X))), 0.0))
    return out


# ---------------------------------------------------------------------------
# meanfield


def _random_measure(rng, size: int, n: int = 1, mass: float | None = None) -> mf.WeightedMeasure:
    w = rng.dirichlet(np.ones(size)) * (mass if mass is not None else rng.uniform(0.5, 1.5))
    return mf.WeightedMeasure(rng.normal(size=(size, n)), w)


def random_functionals(n: int = 1) -> list[mf.MeanFieldFunctional]:
    return [mf.Gquad(2.0), mf.Gquad(0.7),
            mf.G1(mf.sqrt1p_potential(1.5, n)),
            mf.G2(mf.neg_half_square(0.8), mf.gauss_potential(1.2, n=n)),
            mf.G2(mf.neg_exp(0.5), mf.tanh_potential(np.full(n, 0.7))),
            mf.G1(mf.quadratic_potential(0.5, n)) + mf.G2(mf.neg_half_square(0.3), mf.sqrt1p_potential(1.0, n))]


def derivative_checks(triples: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    funcs = random_functionals()
    flat_gap = lions_gap = 0.0
    for _ in range(triples):
        G = funcs[int(rng.integers(len(funcs)))]
        mu = _random_measure(rng, int(rng.integers(1, 8)))
        x = rng.normal(size=1)
        flat_gap = max(flat_gap, mf.flat_fd_check(G, mu, x))
        lions_gap = max(lions_gap, mf.lions_fd_check(G, mu, x))
    flat_exp = lions_exp = 0.0
    for i in range(20):
        G = funcs[i % len(funcs)]
        K = int(rng.integers(2, 12))
        X = rng.normal(size=(K, 1))
        q, qp = rng.uniform(0.2, 2.0, K), rng.uniform(0.2, 2.0, K)
        flat_exp = max(flat_exp, mf.flat_expansion_gap(G, X, q, qp))
        lions_exp = max(lions_exp, mf.lions_expansion_gap(G, X, X + rng.normal(scale=0.5, size=X.shape), q))
    return [at_most("flat_derivative_richardson", flat_gap, 1e-8),
            at_most("lions_vs_flat_gradient", lions_gap, 1e-6),
            at_most("flat_theta_expansion", flat_exp, 1e-6),
            at_most("lions_theta_expansion", lions_exp, 1e-6)]


def _peel(basis, K: int, L: int, wx, wy):
    """Basic solution on a set of cells by leaf peeling; ``None`` if the cells contain a cycle."""
    rx, ry = list(wx), list(wy)
    left = set(basis)
    flow = {}
    while left:
        for i, j in left:
            if sum(a == i for a, _ in left) == 1:
                m = rx[i]
                break
            if sum(b == j for _, b in left) == 1:
                m = ry[j]
                break
        else:
            return None
        flow[(i, j)] = m
        rx[i] -= m
        ry[j] -= m
        left.discard((i, j))
    if any(rx) or any(ry):
        return None
    return flow


def transport_by_vertices(x, wx, y, wy, p: float = 1.0) -> float:
    """Exact optimal transport cost by scanning every basic feasible coupling.

    Weights are handled as exact rationals, so the result is exact whenever
    the inputs are dyadic.
    """
    x, y = [float(v) for v in np.ravel(x)], [float(v) for v in np.ravel(y)]
    wx = [Fraction(float(v)) for v in np.ravel(wx)]
    wy = [Fraction(float(v)) for v in np.ravel(wy)]
    K, L = len(x), len(y)
    cells = [(i, j) for i in range(K) for j in range(L)]
    best = None
    for basis in itertools.combinations(cells, K + L - 1):
        flow = _peel(basis, K, L, wx, wy)
        if flow is None or min(flow.values()) < 0:
            continue
        cost = sum(m * Fraction(abs(x[i] - y[j]) ** p) for (i, j), m in flow.items())
        best = cost if best is None else min(best, cost)
    return float(best)


def metric_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_tri = -math.inf
    for _ in range(100):
        p = float(rng.choice([1.0, 2.0]))
        a, b, c = (_random_measure(rng, int(rng.integers(1, 6))) for _ in range(3))
        worst_tri = max(worst_tri, mf.d_p(a, c, p) - mf.d_p(a, b, p) - mf.d_p(b, c, p))
    worst_w = 0.0
    for K, L in itertools.product(range(1, 5), repeat=2):
        for _ in range(2):
            # dyadic weights and integer atoms keep both sides exact
            wx = rng.multinomial(8, np.ones(K) / K) + 1.0
            wy = rng.multinomial(8 + K - L, np.ones(L) / L) + 1.0
            x, y = rng.integers(-4, 5, K).astype(float), rng.integers(-4, 5, L).astype(float)
            mu, nu = mf.WeightedMeasure(x[:, None], wx / 16), mf.WeightedMeasure(y[:, None], wy / 16)
            for p in (1.0, 2.0):
                oracle = transport_by_vertices(x, wx / 16, y, wy / 16, p)
                worst_w = max(worst_w, abs(mf.w_p(mu, nu, p) - oracle))
    return [at_most("d_p_triangle", worst_tri, 1e-12), at_most("w_p_quantile_vs_enumeration", worst_w, 0.0)]


def convexity_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    concave = [mf.Gquad(2.0), mf.G2(mf.neg_half_square(0.8), mf.gauss_potential(1.2)),
               mf.G2(mf.neg_exp(0.5), mf.tanh_potential([0.7]))]
    worst_flat = -math.inf
    worst_disp = math.inf
    for _ in range(50):
        G = concave[int(rng.integers(len(concave)))]
        mass = float(rng.uniform(0.5, 1.0))
        mu, nu = _random_measure(rng, 4, mass=mass), _random_measure(rng, 5, mass=mass)
        worst_flat = max(worst_flat, mf.flat_monotonicity(G, mu, nu))
        w = rng.dirichlet(np.ones(6))
        a, b = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
        worst_disp = min(worst_disp, mf.displacement_monotonicity(mf.Gquad(2.0), a, b, w))
    return [at_most("flat_concavity", worst_flat, 1e-10), at_least("displacement_monotonicity", worst_disp, -1e-10)]


def meanfield_suite(seed: int = 0) -> list[Check]:
    out = derivative_checks(seed=seed) + metric_checks(seed=seed) + convexity_checks(seed=seed)
    mu = mf.WeightedMeasure(np.linspace(-2, 2, 41)[:, None], np.full(41, 1 / 41))
    demo = mf.feynman_kac_demo(mu, seed=seed)
    out.append(equals("particle_gap_decreasing", float(demo["monotone"]), 1.0))
    return out


# ---------------------------------------------------------------------------
# fbsde and model constants


def _constant_spec(sigma: float, r: int, T: float = 1.0) -> ProblemSpec:
    co = Coefficients.build(n=1, d=1, r=r, c=[[1.0]], nu=[[1.0]], sigma=[[[sigma]]])
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=1.0, L=1.0),
                       running=RunningCost.half_square(1), terminal=TerminalCost.zero(1), T=T,
                       x0=np.zeros(1), name="constants")


def constant_checks() -> list[Check]:
    return [equals("gamma[sigma=0]", gamma_constant(_constant_spec(0.0, 0)), 8.0),
            equals("gamma[sigma=1,r=1]", gamma_constant(_constant_spec(1.0, 1)), 104.0),
            equals("smallness[T=0.2]", float(smallness_check(_constant_spec(0.0, 0, 0.2))), 1.0),
            equals("smallness[T=0.25]", float(smallness_check(_constant_spec(0.0, 0, 0.25))), 0.0)]


def fbsde_suite(M: int = 20_000, N: int = 50, seed: int = 7) -> list[Check]:
    from .fbsde import picard_solve, saddle_probe
    from .scenarios import gibbs_linear, portfolio, portfolio_oracle
    out = constant_checks()
    gibbs = picard_solve(gibbs_linear(), M, N, seed)
    out.append(equals("gibbs_converged", float(gibbs.converged), 1.0))
    out.append(at_most("gibbs_control_sup_gap", float(np.max(np.abs(gibbs.control_profile() + 0.5))), 0.02))
    out.append(at_most("gibbs_isaac", gibbs.isaac_residual, 1e-6))
    port = picard_solve(portfolio(), M, N, seed)
    oracle = portfolio_oracle()
    out.append(equals("portfolio_converged", float(port.converged), 1.0))
    out.append(at_most("portfolio_control_sup_gap",
                       float(np.max(np.abs(port.control_profile() - oracle["psi"]))), 1e-3))
    out.append(at_most("portfolio_Y0_gap", abs(float(np.mean(port.controls.Y[:, 0])) - oracle["Y0"]), 0.02))
    out.append(at_most("portfolio_isaac", port.isaac_residual, 1e-6))
    for label, sol in (("gibbs", gibbs), ("portfolio", port)):
        probe = saddle_probe(sol.spec, sol.ensemble, sol)
        out.append(at_most(f"saddle_probe_violations[{label}]", float(len(probe.violations)), 0.0))
    return out


# ---------------------------------------------------------------------------
# registry


SUITES: dict[str, Callable[..., list[Check]]] = {
    "duality": duality_suite,
    "simulate": simulate_suite,
    "meanfield": meanfield_suite,
    "fbsde": fbsde_suite,
}


def summarize(selector: str, checks: Iterable[Check]) -> dict:
    rows = [c.to_dict() for c in checks]
    return {"selector": selector, "passed": all(r["passed"] for r in rows),
            "n_checks": len(rows), "n_failed": sum(not r["passed"] for r in rows), "checks": rows}
