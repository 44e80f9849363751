"""Registry of ready-made problem instances."""
from __future__ import annotations

import math

import numpy as np

from .model import Coefficients, Driver, ProblemSpec, RunningCost, TerminalCost


def gibbs_linear(beta: float = 0.5, T: float = 1.0) -> ProblemSpec:
    """``dX = psi dt + dW``, ``X_0 = 0``, terminal ``g(x) = beta x``, ``f = |z|^2/2``.

    Saddle: ``psi = -beta``, ``Z* = beta``.  The terminal cost grows linearly,
    so the spec is declared in the ``r = 1`` growth regime with a zero
    control-volatility tensor.
    """
    co = Coefficients.build(n=1, d=1, r=1, c=[[1.0]], nu=[[1.0]])
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=1.0, L=1.0),
                       running=RunningCost.half_square(1), terminal=TerminalCost.affine([beta]),
                       T=T, x0=np.zeros(1), name="gibbs-linear")


def portfolio(c: float = 0.1, sigma: float = 0.2, lam: float = 1.0, x0: float = 1.0, T: float = 1.0,
              b: float = 0.0) -> ProblemSpec:
    """Risk-averse wealth ``dX = psi c dt + psi sigma dW``, terminal ``g(x) = x``.

    Nature pays ``lam |z*|^2 / 2``, i.e. the driver is ``|z|^2 / (2 lam)``.
    """
    co = Coefficients.build(n=1, d=1, r=1, b=[[b]], c=[[c]], sigma=[[[sigma]]])
    beta = 1.0 / lam
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=beta, L=max(1.0, beta)),
                       running=RunningCost.half_square(1), terminal=TerminalCost.affine([1.0]),
                       T=T, x0=np.array([x0]), name="portfolio")


def portfolio_oracle(c: float = 0.1, sigma: float = 0.2, lam: float = 1.0, x0: float = 1.0,
                     T: float = 1.0) -> dict:
    """Constant saddle control and initial value of the portfolio scenario."""
    psi = -c / (1.0 + sigma ** 2 / lam)
    rate = psi * c + (sigma * psi) ** 2 / (2.0 * lam) + 0.5 * psi ** 2
    return {"psi": psi, "Y0": x0 + T * rate, "Zstar": sigma * psi / lam}


def systemic_risk(n_agents: int = 4, c: float = 0.5, sigma: float = 0.3, lam: float = 1.0,
                  x0: float = 1.0, threshold: float = 1.0, scale: float = 0.2, T: float = 1.0) -> ProblemSpec:
    """``N`` agents ``dX^i = psi^i c dt + psi^i sigma dW^i`` with a smooth hinge loss on each terminal state."""
    n = n_agents
    sig = np.zeros((n, n, n))
    for i in range(n):
        sig[i, i, i] = sigma
    co = Coefficients.build(n=n, d=n, r=1, c=c * np.eye(n), sigma=sig)
    beta = 1.0 / lam
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=beta, L=max(1.0, beta)),
                       running=RunningCost.half_square(n),
                       terminal=TerminalCost.softplus_sum(threshold, scale),
                       T=T, x0=np.full(n, x0), name="systemic-risk")


def mfc_quadratic(lam: float = 2.0, nu: float = 0.4, x0: float = 1.0, T: float = 1.0) -> ProblemSpec:
    """Zero-drift controlled diffusion with the quadratic flat-concave functional ``Gquad``."""
    from .meanfield import Gquad
    co = Coefficients.build(n=1, d=1, r=0, c=[[1.0]], nu=[[nu]])
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", alpha=0.0, beta=1.0, L=1.0),
                       running=RunningCost.half_square(1), terminal=TerminalCost.meanfield(Gquad(lam)),
                       T=T, x0=np.array([x0]), name="mfc-quadratic")


def zero_cost(T: float = 1.0) -> ProblemSpec:
    co = Coefficients.build(n=1, d=1, r=0, c=[[1.0]], nu=[[0.5]])
    return ProblemSpec(coefficients=co, driver=Driver("quadratic-z", beta=1.0),
                       running=RunningCost.half_square(1), terminal=TerminalCost.zero(1),
                       T=T, x0=np.zeros(1), name="zero-cost")


SCENARIOS = {
    "portfolio": portfolio,
    "gibbs-linear": gibbs_linear,
    "systemic-risk": systemic_risk,
    "mfc-quadratic": mfc_quadratic,
    "mfg-potential": mfc_quadratic,
}


def gibbs_normalizer(beta: float, T: float) -> float:
    """Closed-form value ``exp(-T beta^2)`` of the Gibbs normalising constant."""
    return math.exp(-T * beta ** 2)


def gibbs_normalizer_estimate(solution, beta: float):
    """Monte Carlo ``E[exp(beta X_T - int |psi|^2 dt / 2)]`` along the solved paths."""
    from .simulate import mean_and_se
    ens = solution.ensemble
    cost = 0.5 * np.sum(solution.controls.psi ** 2, axis=(1, 2)) * ens.dt
    return mean_and_se(np.exp(beta * ens.X[:, -1, 0] - cost))
