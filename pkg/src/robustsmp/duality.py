"""Entropy, Fenchel and Donsker-Varadhan kernels.

All conjugates are closed form for the two driver families in :mod:`robustsmp.model`,
so these functions are cheap enough to call inside Monte Carlo loops.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .model import Driver


class DomainError(ValueError):
    """Input outside the domain of a kernel."""


# ---------------------------------------------------------------------------
# scalar entropy


def entropy_h(x):
    """``h(x) = x (ln x - 1)`` with ``h(0) = 0``; works elementwise on arrays."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("entropy_h is defined on [0, inf)")
    out = xlogy(arr, arr) - arr
    return float(out) if out.ndim == 0 else out


def entropy_duality_gap(xstar, x):
    """``exp(x*) + h(x) - x* x``: non-negative, zero iff ``x = exp(x*)``."""
    xstar = np.asarray(xstar, dtype=float)
    return np.exp(xstar) + entropy_h(x) - xstar * np.asarray(x, dtype=float)


def entropic_risk(theta: float, samples, weights=None) -> float:
    """Empirical ``(1/theta) ln E[exp(theta X)]`` computed with log-sum-exp."""
    if not theta > 0:
        raise DomainError("theta must be positive")
    xs = np.asarray(samples, dtype=float).ravel()
    if xs.size == 0:
        raise DomainError("entropic_risk needs at least one sample")
    if not np.all(np.isfinite(xs)):
        raise DomainError("samples must be finite")
    if weights is None:
        w = np.full(xs.size, 1.0 / xs.size)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != xs.shape or np.any(w < 0) or w.sum() <= 0:
            raise DomainError("weights must be non-negative, non-zero and match the samples")
        w = w / w.sum()
    return float(logsumexp(theta * xs, b=w) / theta)


# ---------------------------------------------------------------------------
# driver conjugates


def _y_conjugate(driver: Driver, ystar: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """y-part of the conjugate: a finite value or +inf."""
    if not driver.smoothed:
        ok = np.abs(ystar - driver.a_y) <= tol * max(1.0, abs(driver.a_y))
        return np.where(ok, 0.0, np.inf)
    alpha = driver.alpha
    if alpha == 0.0:
        return np.where(ystar == 0.0, 0.0, np.inf)
    u = ystar / alpha
    inside = np.abs(u) <= 1.0
    uc = np.clip(u, -1.0, 1.0)
    # u atanh(u) + ln(1-u^2)/2, rewritten so that |u| = 1 is finite (= ln 2)
    val = alpha * (xlogy(0.5 * (1 + uc), 1 + uc) + xlogy(0.5 * (1 - uc), 1 - uc))
    return np.where(inside, val, np.inf)


def _z_conjugate(driver: Driver, zstar: np.ndarray) -> np.ndarray:
    sq = np.sum(zstar * zstar, axis=-1)
    if driver.beta == 0.0:
        return np.where(sq == 0.0, 0.0, np.inf)
    return sq / (2.0 * driver.beta)


def fenchel_dual(driver: Driver, t: float, ystar, zstar):
    """Closed-form conjugate ``f*(t, y*, z*)``; ``+inf`` outside the effective domain.

    ``zstar`` carries the noise dimension on its last axis.
    """
    ys = np.asarray(ystar, dtype=float)
    zs = np.asarray(zstar, dtype=float)
    if zs.ndim == 0:
        zs = zs.reshape(1)
    val = -float(driver.f0(t)) + _y_conjugate(driver, ys) + _z_conjugate(driver, zs)
    return float(val) if np.ndim(val) == 0 else val


def dual_lower_bound(driver: Driver, t: float, ystar, zstar):
    """``-|f0| + chi_B(y*/alpha) + |z*|^2 / (2 beta)``, a pointwise minorant of ``f*``."""
    ys = np.asarray(ystar, dtype=float)
    zs = np.asarray(zstar, dtype=float)
    if zs.ndim == 0:
        zs = zs.reshape(1)
    if driver.alpha > 0:
        chi = np.where(np.abs(ys) <= driver.alpha, 0.0, np.inf)
    else:
        chi = np.where(ys == 0.0, 0.0, np.inf)
    val = -abs(float(driver.f0(t))) + chi + _z_conjugate(driver, zs)
    return float(val) if np.ndim(val) == 0 else val


def fenchel_gap(driver: Driver, t: float, y, z, ystar, zstar):
    """``f(y,z) + f*(y*,z*) - y y* - z.z*`` (non-negative by Fenchel-Young)."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    ys = np.asarray(ystar, dtype=float)
    zs = np.asarray(zstar, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    if zs.ndim == 0:
        zs = zs.reshape(1)
    fstar = fenchel_dual(driver, t, ys, zs)
    with np.errstate(invalid="ignore"):
        gap = driver.value(t, y, z) + fstar - y * ys - np.sum(z * zs, axis=-1)
    return float(gap) if np.ndim(gap) == 0 else gap


def perspective_dual(driver: Driver, t: float, q, ytil, ztil):
    """Perspective ``q f*(ytil/q, ztil/q)``; 0 at the origin, ``+inf`` elsewhere for ``q <= 0``."""
    q = np.asarray(q, dtype=float)
    yt = np.asarray(ytil, dtype=float)
    zt = np.asarray(ztil, dtype=float)
    if zt.ndim == 0:
        zt = zt.reshape(1)
    pos = q > 0
    qs = np.where(pos, q, 1.0)
    with np.errstate(invalid="ignore"):
        inner = fenchel_dual(driver, t, yt / qs, zt / qs[..., None])
        val = np.where(pos, q * inner, np.inf)
    origin = (q == 0) & (yt == 0) & np.all(zt == 0, axis=-1)
    val = np.where(origin, 0.0, val)
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# finite-support distributions


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector on a finite, explicitly enumerated support."""

    support: tuple
    probs: np.ndarray

    def __init__(self, support: Sequence[Hashable], probs, atol: float = 1e-12):
        p = np.asarray(probs, dtype=float).ravel()
        sup = tuple(support)
        if len(sup) != p.size:
            raise DomainError("support and probs must have the same length")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > atol:
            raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, support) -> "DiscreteDistribution":
        sup = tuple(support)
        return cls(sup, np.full(len(sup), 1.0 / len(sup)))

    def expect(self, fn: Callable | Sequence[float]) -> float:
        vals = self._values(fn)
        return float(np.dot(self.probs, vals))

    def _values(self, fn) -> np.ndarray:
        if callable(fn):
            return np.array([fn(x) for x in self.support], dtype=float)
        vals = np.asarray(fn, dtype=float).ravel()
        if vals.size != len(self.support):
            raise DomainError("value vector must match the support")
        return vals


def _aligned(m: DiscreteDistribution, mu: DiscreteDistribution) -> tuple[np.ndarray, np.ndarray]:
    if m.support == mu.support:
        return m.probs, mu.probs
    index = {x: i for i, x in enumerate(mu.support)}
    pm, pmu = [], []
    for x, p in zip(m.support, m.probs):
        pm.append(p)
        pmu.append(mu.probs[index[x]] if x in index else 0.0)
    return np.asarray(pm), np.asarray(pmu)


def relative_entropy(m: DiscreteDistribution, mu: DiscreteDistribution) -> float:
    """``sum m ln(m / mu)``; ``+inf`` when ``m`` charges a ``mu``-null atom."""
    pm, pmu = _aligned(m, mu)
    if np.any((pm > 0) & (pmu == 0)):
        return float("inf")
    mask = pm > 0
    return float(np.sum(pm[mask] * (np.log(pm[mask]) - np.log(pmu[mask]))))


def donsker_varadhan(mu: DiscreteDistribution, k) -> tuple[float, DiscreteDistribution]:
    """Exact ``inf_m {H(m|mu) + E_m[k]} = -ln E_mu[exp(-k)]`` and its Gibbs minimiser."""
    kv = mu._values(k)
    if not np.all(np.isfinite(kv)):
        raise DomainError("k must be finite on the support")
    charged = mu.probs > 0
    logw = np.full(kv.size, -np.inf)
    logw[charged] = np.log(mu.probs[charged]) - kv[charged]
    lse = logsumexp(logw[charged])
    opt = np.zeros_like(kv)
    opt[charged] = np.exp(logw[charged] - lse)
    opt /= opt.sum()
    return float(-lse), DiscreteDistribution(mu.support, opt)


def dv_objective(m: DiscreteDistribution, mu: DiscreteDistribution, k) -> float:
    """``H(m|mu) + E_m[k]`` for a competitor ``m``."""
    return relative_entropy(m, mu) + m.expect(mu._values(k) if not callable(k) else k)
