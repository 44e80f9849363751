"""Finite-atomic measures, measure metrics and mean-field terminal functionals.

Measures are non-negative and need not have unit mass: a density ``q_T`` with
a discounting rate produces a measure of mass ``E[q_T]``.  Every functional
below exposes the value ``G(mu)``, the flat derivative ``dG/dmu(mu, x)`` and
the Lions derivative ``d_mu G(mu, x)`` in closed form.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .model import ConfigError, ProblemSpec, TerminalCost

MASS_TOL = 1e-9
SMALL_LP_ATOMS = 8


class MeasureError(ValueError):
    """Invalid measure input (negative weights, unequal masses, ...)."""


class CapacityError(MeasureError):
    """Instance too large for the exact solvers."""


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class WeightedMeasure:
    """``sum_i weights[i] * delta_{atoms[i]}`` on R^n."""

    atoms: np.ndarray
    weights: np.ndarray

    def __init__(self, atoms, weights):
        w = np.asarray(weights, dtype=float).ravel()
        a = np.asarray(atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] != w.size:
            raise MeasureError(f"{a.shape[0]} atoms but {w.size} weights")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and non-negative")
        if not np.all(np.isfinite(a)):
            raise MeasureError("atoms must be finite")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> "WeightedMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [mass])

    @classmethod
    def empirical(cls, samples, mass: float = 1.0) -> "WeightedMeasure":
        a = np.asarray(samples, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        return cls(a, np.full(a.shape[0], mass / a.shape[0]))

    @property
    def n(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moment(self, p: float) -> float:
        """``M_p = int |x|^p dmu``."""
        return float(self.weights @ np.linalg.norm(self.atoms, axis=1) ** p)

    def first_moment(self) -> np.ndarray:
        """Unnormalised mean vector ``int x dmu``."""
        return self.weights @ self.atoms

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.weights @ np.asarray(fn(self.atoms), dtype=float))

    def plus_dirac(self, x, eps: float) -> "WeightedMeasure":
        """``mu + eps delta_x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return WeightedMeasure(np.vstack([self.atoms, x]), np.append(self.weights, eps))

    def scaled(self, factor: float) -> "WeightedMeasure":
        return WeightedMeasure(self.atoms, self.weights * factor)

    def mix(self, other: "WeightedMeasure", rho: float) -> "WeightedMeasure":
        """``(1 - rho) self + rho other`` as one atomic measure."""
        return WeightedMeasure(np.vstack([self.atoms, other.atoms]),
                               np.concatenate([(1.0 - rho) * self.weights, rho * other.weights]))

    def pruned(self, rel_tol: float = 1e-14) -> "WeightedMeasure":
        keep = self.weights > rel_tol * max(self.mass, 1e-300)
        return WeightedMeasure(self.atoms[keep], self.weights[keep])

    def merged(self, resolution: float | None = None) -> "WeightedMeasure":
        """Combine coinciding atoms (or atoms in the same grid cell of width ``resolution``)."""
        atoms, weights = _merge(self.atoms, self.weights, resolution)
        return WeightedMeasure(atoms, weights)


def _cells(atoms: np.ndarray, resolution: float | None) -> np.ndarray:
    if resolution is None:
        return atoms
    if not resolution > 0:
        raise MeasureError("resolution must be positive")
    return (np.floor(atoms / resolution) + 0.5) * resolution


def _merge(atoms: np.ndarray, weights: np.ndarray, resolution: float | None):
    keys = _cells(atoms, resolution)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    summed = np.zeros(uniq.shape[0])
    np.add.at(summed, inverse.ravel(), weights)
    return uniq, summed


def measure_from_ensemble(ensemble) -> WeightedMeasure:
    """Terminal law of ``X_T`` under ``q_T P``: atoms ``X_T``, weights ``q_T / M``."""
    ensemble.ensure_density()
    if ensemble.X is None:
        raise MeasureError("ensemble has no simulated state")
    return WeightedMeasure(ensemble.X[:, -1], ensemble.q[:, -1] / ensemble.M)


# ---------------------------------------------------------------------------
# metrics


def d_p(mu: WeightedMeasure, nu: WeightedMeasure, p: float = 1.0, resolution: float | None = None) -> float:
    """``sup_{|phi| <= 1 + |x|^p} int phi d(mu - nu)``, attained by signing each atom.

    With ``resolution`` set, both measures are first pushed onto a common
    grid of that cell width, which compares Monte Carlo laws whose atoms
    never coincide exactly.
    """
    if mu.n != nu.n:
        raise MeasureError("measures live in different dimensions")
    atoms = np.vstack([mu.atoms, nu.atoms])
    signed = np.concatenate([mu.weights, -nu.weights])
    uniq, mass = _merge(atoms, signed, resolution)
    return float(np.sum((1.0 + np.linalg.norm(uniq, axis=1) ** p) * np.abs(mass)))


def _check_isomass(mu: WeightedMeasure, nu: WeightedMeasure) -> float:
    if abs(mu.mass - nu.mass) > MASS_TOL:
        raise MeasureError(f"W_p needs equal masses, got {mu.mass!r} and {nu.mass!r}")
    return mu.mass


def _quantile_coupling(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray):
    """Monotone (north-west corner) coupling of two sorted 1D atomic measures."""
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ox], wx[ox].copy(), y[oy], wy[oy].copy()
    # equalise the masses exactly so the corner walk terminates cleanly
    wy *= wx.sum() / wy.sum() if wy.sum() > 0 else 1.0
    i = j = 0
    pairs = []
    while i < x.size and j < y.size:
        m = min(wx[i], wy[j])
        if m > 0:
            pairs.append((x[i], y[j], m))
        wx[i] -= m
        wy[j] -= m
        if wx[i] <= wy[j]:
            i += 1
        else:
            j += 1
    return pairs


def w_p(mu: WeightedMeasure, nu: WeightedMeasure, p: float = 1.0) -> float:
    """Optimal transport cost ``inf_pi int |x - x'|^p dpi`` (no root) between equal-mass measures.

    Exact in one dimension (monotone coupling, valid for ``p >= 1``) and for
    at most ``SMALL_LP_ATOMS`` atoms per side in any dimension (linear program).
    """
    if mu.n != nu.n:
        raise MeasureError("measures live in different dimensions")
    if p < 1:
        raise MeasureError("w_p needs p >= 1")
    _check_isomass(mu, nu)
    if mu.n == 1:
        pairs = _quantile_coupling(mu.atoms[:, 0], mu.weights, nu.atoms[:, 0], nu.weights)
        return float(sum(m * abs(a - b) ** p for a, b, m in pairs))
    if mu.size <= SMALL_LP_ATOMS and nu.size <= SMALL_LP_ATOMS:
        return transport_lp(mu, nu, p)
    raise CapacityError(f"no exact W_p solver for {mu.size}x{nu.size} atoms in dimension {mu.n}")


def transport_lp(mu: WeightedMeasure, nu: WeightedMeasure, p: float = 1.0) -> float:
    """Transport cost by linear programming over couplings (small instances)."""
    K, L = mu.size, nu.size
    cost = np.linalg.norm(mu.atoms[:, None, :] - nu.atoms[None, :, :], axis=-1) ** p
    rows = np.kron(np.eye(K), np.ones(L))
    cols = np.kron(np.ones(K), np.eye(L))
    target = nu.weights * (mu.mass / nu.mass) if nu.mass > 0 else nu.weights
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([mu.weights, target]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise MeasureError(f"transport linear program failed: {res.message}")
    return float(res.fun)


# ---------------------------------------------------------------------------
# functionals


class MeanFieldFunctional:
    """Base class: value, flat derivative, Lions derivative and Hessian direction.

    ``growth`` is the polynomial growth exponent of the flat derivative in
    ``x``; ``displacement_convex`` certifies the isomass monotonicity of the
    Lions derivative (for masses up to the declared bound).
    """

    growth: int = 2
    displacement_convex: bool = True

    def evaluate(self, mu: WeightedMeasure) -> float:
        raise NotImplementedError

    def flat(self, mu: WeightedMeasure, x) -> np.ndarray:
        raise NotImplementedError

    def lions(self, mu: WeightedMeasure, x) -> np.ndarray:
        raise NotImplementedError

    def hessian_direction(self, mu: WeightedMeasure, beta) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    def __add__(self, other: "MeanFieldFunctional") -> "SumFunctional":
        left = self.parts if isinstance(self, SumFunctional) else (self,)
        right = other.parts if isinstance(other, SumFunctional) else (other,)
        return SumFunctional(left + right)


def _points(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    return np.atleast_2d(arr), single


def _out(values: np.ndarray, single: bool):
    return values[0] if single else values


def _beta_on_atoms(mu: WeightedMeasure, beta) -> np.ndarray:
    vals = beta(mu.atoms) if callable(beta) else beta
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1 and mu.n == 1 and vals.size == mu.size:
        vals = vals[:, None]
    vals = np.broadcast_to(vals, mu.atoms.shape)
    if not np.all(np.isfinite(vals)):
        raise MeasureError("direction must be finite on the atoms")
    return vals


@dataclass(frozen=True)
class Potential:
    """Smooth function on R^n with gradient and Hessian, vectorised over rows."""

    kind: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    params: Mapping[str, Any] = field(default_factory=dict)
    growth: int = 2
    convex: bool = True
    bounded: bool = False

    def describe(self) -> dict:
        return {"kind": self.kind, **{k: _plain(v) for k, v in self.params.items()}}


def _plain(v):
    return v.tolist() if isinstance(v, np.ndarray) else v


def quadratic_potential(lam: float, n: int = 1) -> Potential:
    """``lam |x|^2 / 2``."""
    eye = np.eye(n)
    return Potential("quadratic", lambda x: 0.5 * lam * np.sum(x * x, axis=-1), lambda x: lam * x,
                     lambda x: np.broadcast_to(lam * eye, x.shape + (n,)), {"lam": lam}, growth=2,
                     convex=lam >= 0)


def sqrt1p_potential(lam: float, n: int = 1) -> Potential:
    """``lam sqrt(1 + |x|^2)``: convex with linear growth."""
    def value(x):
        return lam * np.sqrt(1.0 + np.sum(x * x, axis=-1))

    def grad(x):
        return lam * x / np.sqrt(1.0 + np.sum(x * x, axis=-1))[..., None]

    def hess(x):
        s = np.sqrt(1.0 + np.sum(x * x, axis=-1))[..., None, None]
        return lam * (np.eye(n) / s - x[..., :, None] * x[..., None, :] / s ** 3)

    return Potential("sqrt1p", value, grad, hess, {"lam": lam}, growth=1, convex=lam >= 0)


def affine_potential(w, c0: float = 0.0) -> Potential:
    w = np.atleast_1d(np.asarray(w, dtype=float))
    n = w.size
    return Potential("affine", lambda x: x @ w + c0, lambda x: np.broadcast_to(w, x.shape).copy(),
                     lambda x: np.zeros(x.shape + (n,)), {"w": w, "c0": c0},
                     growth=0 if not np.any(w) else 1, convex=True)


def gauss_potential(scale: float = 1.0, center=None, n: int = 1) -> Potential:
    """``exp(-|x - center|^2 / (2 scale^2))``: bounded with bounded derivatives."""
    center = np.zeros(n) if center is None else np.atleast_1d(np.asarray(center, dtype=float))
    s2 = scale * scale

    def value(x):
        u = x - center
        return np.exp(-0.5 * np.sum(u * u, axis=-1) / s2)

    def grad(x):
        return -(x - center) / s2 * value(x)[..., None]

    def hess(x):
        u = x - center
        outer = u[..., :, None] * u[..., None, :] / s2 ** 2
        return (outer - np.eye(n) / s2) * value(x)[..., None, None]

    return Potential("gauss", value, grad, hess, {"scale": scale, "center": center}, growth=0,
                     convex=False, bounded=True)


def tanh_potential(w) -> Potential:
    """``tanh(w . x)``: bounded with bounded derivatives."""
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def grad(x):
        return (1.0 - np.tanh(x @ w) ** 2)[..., None] * w

    def hess(x):
        t = np.tanh(x @ w)
        return (-2.0 * t * (1.0 - t * t))[..., None, None] * np.outer(w, w)

    return Potential("tanh", lambda x: np.tanh(x @ w), grad, hess, {"w": w}, growth=0, convex=False,
                     bounded=True)


@dataclass(frozen=True)
class Outer:
    """Concave scalar map ``phi`` with its first two derivatives."""

    kind: str
    value: Callable[[float], float]
    d1: Callable[[float], float]
    d2: Callable[[float], float]
    params: Mapping[str, Any] = field(default_factory=dict)

    def describe(self) -> dict:
        return {"kind": self.kind, **dict(self.params)}


def neg_half_square(kappa: float = 1.0) -> Outer:
    """``phi(u) = -kappa u^2 / 2``."""
    return Outer("neg-half-square", lambda u: -0.5 * kappa * u * u, lambda u: -kappa * u, lambda u: -kappa,
                 {"kappa": kappa})


def neg_exp(kappa: float = 1.0) -> Outer:
    """``phi(u) = -exp(-kappa u) / kappa``."""
    return Outer("neg-exp", lambda u: -math.exp(-kappa * u) / kappa, lambda u: math.exp(-kappa * u),
                 lambda u: -kappa * math.exp(-kappa * u), {"kappa": kappa})


class LinearFunctional(MeanFieldFunctional):
    """``G1(mu) = int v1 dmu``; the flat derivative is ``v1`` itself."""

    def __init__(self, potential: Potential):
        self.potential = potential
        self.growth = potential.growth
        self.displacement_convex = potential.convex

    def evaluate(self, mu):
        return mu.integrate(self.potential.value)

    def flat(self, mu, x):
        pts, single = _points(x)
        return _out(self.potential.value(pts), single)

    def lions(self, mu, x):
        pts, single = _points(x)
        return _out(self.potential.grad(pts), single)

    def hessian_direction(self, mu, beta):
        b = _beta_on_atoms(mu, beta)
        quad = np.einsum("kij,ki,kj->k", self.potential.hess(mu.atoms), b, b)
        return float(mu.weights @ quad)

    def describe(self):
        return {"family": "G1", "v1": self.potential.describe()}


class ComposedFunctional(MeanFieldFunctional):
    """``G2(mu) = phi(int v2 dmu)`` with ``phi`` concave."""

    def __init__(self, outer: Outer, potential: Potential, mass_bound: float = 1.0):
        self.outer = outer
        self.potential = potential
        self.mass_bound = mass_bound
        self.growth = potential.growth if outer.kind != "neg-half-square" else 2 * potential.growth
        # on its own a G2 term is not certified displacement convex
        self.displacement_convex = potential.kind == "affine"

    def _u(self, mu):
        return mu.integrate(self.potential.value)

    def evaluate(self, mu):
        return float(self.outer.value(self._u(mu)))

    def flat(self, mu, x):
        pts, single = _points(x)
        return _out(self.outer.d1(self._u(mu)) * self.potential.value(pts), single)

    def lions(self, mu, x):
        pts, single = _points(x)
        return _out(self.outer.d1(self._u(mu)) * self.potential.grad(pts), single)

    def hessian_direction(self, mu, beta):
        b = _beta_on_atoms(mu, beta)
        u = self._u(mu)
        cross = mu.weights @ np.sum(self.potential.grad(mu.atoms) * b, axis=-1)
        local = mu.weights @ np.einsum("kij,ki,kj->k", self.potential.hess(mu.atoms), b, b)
        return float(self.outer.d2(u) * cross ** 2 + self.outer.d1(u) * local)

    def hessian_bound(self, mu, beta) -> float:
        """Cauchy-Schwarz majorant ``C(phi, v2, mu) int (|grad v2|^2 + |hess v2|) |beta|^2 dmu``."""
        b = _beta_on_atoms(mu, beta)
        u = self._u(mu)
        const = max(abs(self.outer.d1(u)), max(self.mass_bound, mu.mass) * abs(self.outer.d2(u)))
        g = self.potential.grad(mu.atoms)
        h = np.linalg.norm(self.potential.hess(mu.atoms), ord=2, axis=(-2, -1))
        return float(const * (mu.weights @ ((np.sum(g * g, axis=-1) + h) * np.sum(b * b, axis=-1))))

    def describe(self):
        return {"family": "G2", "phi": self.outer.describe(), "v2": self.potential.describe()}


class QuadraticFunctional(MeanFieldFunctional):
    """``Gquad(mu) = lam/2 int |x|^2 dmu - |int x dmu|^2 / 2``.

    Flat concave for every ``lam``; displacement convex on isomass sets of
    mass at most ``lam``, so the flag compares ``lam`` with ``mass_bound``.
    """

    growth = 2

    def __init__(self, lam: float, mass_bound: float = 1.0):
        self.lam = float(lam)
        self.mass_bound = float(mass_bound)
        self.displacement_convex = self.lam >= self.mass_bound

    def evaluate(self, mu):
        m1 = mu.first_moment()
        return float(0.5 * self.lam * (mu.weights @ np.sum(mu.atoms ** 2, axis=1)) - 0.5 * m1 @ m1)

    def flat(self, mu, x):
        pts, single = _points(x)
        return _out(0.5 * self.lam * np.sum(pts * pts, axis=-1) - pts @ mu.first_moment(), single)

    def lions(self, mu, x):
        pts, single = _points(x)
        return _out(self.lam * pts - mu.first_moment(), single)

    def hessian_direction(self, mu, beta):
        b = _beta_on_atoms(mu, beta)
        mean_b = mu.weights @ b
        return float(self.lam * (mu.weights @ np.sum(b * b, axis=-1)) - mean_b @ mean_b)

    def describe(self):
        return {"family": "Gquad", "lam": self.lam, "mass_bound": self.mass_bound}


def Gquad(lam: float, mass_bound: float = 1.0) -> QuadraticFunctional:
    return QuadraticFunctional(lam, mass_bound)


def G1(potential: Potential) -> LinearFunctional:
    return LinearFunctional(potential)


def G2(outer: Outer, potential: Potential, mass_bound: float = 1.0) -> ComposedFunctional:
    return ComposedFunctional(outer, potential, mass_bound)


class SumFunctional(MeanFieldFunctional):
    """Sum of functionals; derivatives add."""

    def __init__(self, parts: Sequence[MeanFieldFunctional], displacement_convex: bool | None = None):
        if not parts:
            raise MeasureError("a sum needs at least one term")
        self.parts = tuple(parts)
        self.growth = max(p.growth for p in self.parts)
        # a G1 + G2 sum may be convex even if G2 alone is not; callers can certify it
        self.displacement_convex = (all(p.displacement_convex for p in self.parts)
                                    if displacement_convex is None else displacement_convex)

    def evaluate(self, mu):
        return float(sum(p.evaluate(mu) for p in self.parts))

    def flat(self, mu, x):
        return sum(p.flat(mu, x) for p in self.parts)

    def lions(self, mu, x):
        return sum(p.lions(mu, x) for p in self.parts)

    def hessian_direction(self, mu, beta):
        return float(sum(p.hessian_direction(mu, beta) for p in self.parts))

    def describe(self):
        return {"family": "sum", "terms": [p.describe() for p in self.parts],
                "displacement_convex": self.displacement_convex}


ZERO_FUNCTIONAL_NOTE = "G1 with an affine potential of zero slope"


def zero_functional(n: int = 1) -> LinearFunctional:
    return LinearFunctional(affine_potential(np.zeros(n)))


# ---------------------------------------------------------------------------
# configuration


def _potential_from_config(cfg: Mapping, n: int, where: str) -> Potential:
    if not isinstance(cfg, Mapping) or "kind" not in cfg:
        raise ConfigError(f"{where}: expected an object with a 'kind' key")
    kind = cfg["kind"]
    allowed = {"quadratic": {"lam"}, "sqrt1p": {"lam"}, "affine": {"w", "c0"},
               "gauss": {"scale", "center"}, "tanh": {"w"}}
    if kind not in allowed:
        raise ConfigError(f"{where}: unknown potential kind {kind!r} (expected one of {sorted(allowed)})")
    extra = set(cfg) - allowed[kind] - {"kind"}
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        if kind == "quadratic":
            return quadratic_potential(float(cfg.get("lam", 1.0)), n)
        if kind == "sqrt1p":
            return sqrt1p_potential(float(cfg.get("lam", 1.0)), n)
        if kind == "affine":
            return affine_potential(cfg.get("w", np.ones(n)), float(cfg.get("c0", 0.0)))
        if kind == "gauss":
            return gauss_potential(float(cfg.get("scale", 1.0)), cfg.get("center"), n)
        return tanh_potential(cfg.get("w", np.ones(n)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _outer_from_config(cfg: Mapping, where: str) -> Outer:
    if not isinstance(cfg, Mapping) or "kind" not in cfg:
        raise ConfigError(f"{where}: expected an object with a 'kind' key")
    extra = set(cfg) - {"kind", "kappa"}
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kappa = float(cfg.get("kappa", 1.0))
    if cfg["kind"] == "neg-half-square":
        return neg_half_square(kappa)
    if cfg["kind"] == "neg-exp":
        return neg_exp(kappa)
    raise ConfigError(f"{where}: unknown phi kind {cfg['kind']!r}")


def functional_from_config(cfg: Mapping[str, Any], n: int, where: str = "terminal.functional") -> MeanFieldFunctional:
    """Build a functional from ``{"family": "G1"|"G2"|"Gquad"|"sum", ...}``."""
    if not isinstance(cfg, Mapping):
        raise ConfigError(f"{where}: expected an object")
    family = cfg.get("family")
    keys = {"G1": {"v1"}, "G2": {"phi", "v2", "mass_bound"}, "Gquad": {"lam", "mass_bound"},
            "sum": {"terms", "displacement_convex"}}
    if family not in keys:
        raise ConfigError(f"{where}: unknown family {family!r} (expected one of {sorted(keys)})")
    extra = set(cfg) - keys[family] - {"family"}
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    if family == "G1":
        return G1(_potential_from_config(cfg.get("v1", {"kind": "quadratic"}), n, f"{where}.v1"))
    if family == "G2":
        return G2(_outer_from_config(cfg.get("phi", {"kind": "neg-half-square"}), f"{where}.phi"),
                  _potential_from_config(cfg.get("v2", {"kind": "gauss"}), n, f"{where}.v2"),
                  float(cfg.get("mass_bound", 1.0)))
    if family == "Gquad":
        return Gquad(float(cfg.get("lam", 2.0)), float(cfg.get("mass_bound", 1.0)))
    terms = cfg.get("terms")
    if not isinstance(terms, list) or not terms:
        raise ConfigError(f"{where}.terms: expected a non-empty list")
    parts = [functional_from_config(t, n, f"{where}.terms[{i}]") for i, t in enumerate(terms)]
    return SumFunctional(parts, cfg.get("displacement_convex"))


# ---------------------------------------------------------------------------
# derivative checks


def flat_fd_check(functional: MeanFieldFunctional, mu: WeightedMeasure, x, eps: float = 1e-2,
                  levels: int = 3, ratio: float = 10.0) -> float:
    """Gap between the flat derivative and Richardson-extrapolated one-sided quotients.

    Quotients ``(G(mu + e delta_x) - G(mu)) / e`` are taken at
    ``e = eps, eps/ratio, ...`` and the leading error powers are eliminated.
    """
    if not 0 < eps <= 0.1:
        raise MeasureError("eps must lie in (0, 0.1]")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    base = functional.evaluate(mu)
    table = [(functional.evaluate(mu.plus_dirac(x, e)) - base) / e
             for e in eps / ratio ** np.arange(levels)]
    for order in range(1, levels):
        f = ratio ** order
        table = [(f * table[i + 1] - table[i]) / (f - 1.0) for i in range(len(table) - 1)]
    return float(abs(table[0] - float(functional.flat(mu, x))))


def lions_fd_check(functional: MeanFieldFunctional, mu: WeightedMeasure, x, h: float = 1e-5) -> float:
    """Max-norm gap between ``d_mu G(mu, x)`` and the central-difference gradient of the flat derivative."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        grad[i] = (float(functional.flat(mu, x + e)) - float(functional.flat(mu, x - e))) / (2 * h)
    return float(np.max(np.abs(grad - functional.lions(mu, x))))


def hessian_direction(functional: MeanFieldFunctional, mu: WeightedMeasure, beta) -> float:
    """Second-order displacement term ``H_G(beta)`` of ``G`` at ``mu`` along ``beta``."""
    return functional.hessian_direction(mu, beta)


def flat_monotonicity(functional: MeanFieldFunctional, mu: WeightedMeasure, nu: WeightedMeasure) -> float:
    """``int (dG/dmu(mu, .) - dG/dmu(nu, .)) d(mu - nu)``; non-positive for flat-concave ``G``."""
    def diff(x):
        return functional.flat(mu, x) - functional.flat(nu, x)
    return float(mu.weights @ diff(mu.atoms) - nu.weights @ diff(nu.atoms))


def displacement_monotonicity(functional: MeanFieldFunctional, atoms, atoms_prime, weights) -> float:
    """``int (d_mu G(mu, x) - d_mu G(mu', x')) . (x - x') dpi`` for the index coupling ``pi``."""
    w = np.asarray(weights, dtype=float)
    a = np.atleast_2d(np.asarray(atoms, dtype=float))
    b = np.atleast_2d(np.asarray(atoms_prime, dtype=float))
    if a.shape[0] != w.size:
        a, b = a.T, b.T
    mu, nu = WeightedMeasure(a, w), WeightedMeasure(b, w)
    return float(w @ np.sum((functional.lions(mu, a) - functional.lions(nu, b)) * (a - b), axis=-1))


def _gauss_legendre(nodes: int):
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def flat_expansion_gap(functional: MeanFieldFunctional, X, q, q_prime, nodes: int = 32) -> float:
    """Direct ``G((q'P)_X) - G((qP)_X)`` against its theta-integral of the flat derivative.

    The sample space is the finite set of rows of ``X`` with uniform weights.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.size(q) > 1:
        X = X.T
    q, qp = np.asarray(q, dtype=float), np.asarray(q_prime, dtype=float)
    K = q.size
    mu, mup = WeightedMeasure(X, q / K), WeightedMeasure(X, qp / K)
    direct = functional.evaluate(mup) - functional.evaluate(mu)
    thetas, wts = _gauss_legendre(nodes)
    integral = 0.0
    for th, wt in zip(thetas, wts):
        mid = WeightedMeasure(X, (th * qp + (1 - th) * q) / K)
        integral += wt * float(((qp - q) / K) @ functional.flat(mid, X))
    return abs(direct - integral)


def lions_expansion_gap(functional: MeanFieldFunctional, X, X_prime, q, nodes: int = 32) -> float:
    """Direct ``G((qP)_{X'}) - G((qP)_X)`` against the theta-integral of the q-weighted Lions derivative."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xp = np.atleast_2d(np.asarray(X_prime, dtype=float))
    q = np.asarray(q, dtype=float)
    if X.shape[0] != q.size:
        X, Xp = X.T, Xp.T
    w = q / q.size
    direct = functional.evaluate(WeightedMeasure(Xp, w)) - functional.evaluate(WeightedMeasure(X, w))
    thetas, wts = _gauss_legendre(nodes)
    integral = 0.0
    for th, wt in zip(thetas, wts):
        Xt = th * Xp + (1 - th) * X
        integral += wt * float(w @ np.sum(functional.lions(WeightedMeasure(Xt, w), Xt) * (Xp - X), axis=-1))
    return abs(direct - integral)


# ---------------------------------------------------------------------------
# mean-field solvers


def mfc_solve(spec: ProblemSpec, M: int, N: int, seed: int, config=None, ensemble=None, workers: int = 1,
              init=None, probe_points: int = 1000):
    """Robust mean-field control: Picard iteration with terminal data recomputed from the current measure.

    Returns the :class:`SaddleSolution` with ``measure`` set to the terminal
    measure ``(q_T P) o X_T^{-1}``.
    """
    from .fbsde import picard_solve
    if spec.terminal.variant != "meanfield":
        raise MeasureError("mfc_solve needs a meanfield terminal cost")
    sol = picard_solve(spec, M, N, seed, config=config, ensemble=ensemble, workers=workers, init=init,
                       probe_points=probe_points)
    sol.measure = measure_from_ensemble(sol.ensemble)
    return sol


def frozen_terminal(functional: MeanFieldFunctional, mu: WeightedMeasure) -> TerminalCost:
    """Linear terminal ``g(x) = dG/dmu(mu, x)`` with gradient ``d_mu G(mu, x)`` for a frozen ``mu``."""
    return TerminalCost("linear", g=lambda x: functional.flat(mu, x), grad_g=lambda x: functional.lions(mu, x),
                        growth=functional.growth, convex=True,
                        description={"kind": "frozen-flat-derivative", "functional": functional.describe(),
                                     "mass": mu.mass})


@dataclass
class MFGResult:
    measure: WeightedMeasure
    frozen: WeightedMeasure
    agent: Any
    residual: float
    residual_history: list[float]
    outer_iters: int
    converged: bool
    resolution: float | None

    def report(self) -> dict:
        return {"outer_iters": self.outer_iters,
                "d1_residual_history": [float(r) for r in self.residual_history],
                "mass": self.measure.mass, "converged": bool(self.converged), "residual": self.residual,
                "resolution": self.resolution, "agent_report": self.agent.report()}


def mfg_solve(spec: ProblemSpec, M: int, N: int, seed: int, config=None, functional=None,
              damping: float = 0.5, tol_measure: float = 1e-2, max_outer: int = 40,
              resolution: float | None = 1e-2, workers: int = 1, initial: WeightedMeasure | None = None) -> MFGResult:
    """Variational mean-field game: damped fixed point on the terminal measure.

    Each outer step freezes ``mu``, solves the representative agent with the
    linear terminal cost ``dG/dmu(mu, .)``, and compares ``mu`` with the
    agent's terminal measure ``mu'`` in ``d_1`` (on a grid of width
    ``resolution``).  The first step replaces the initial guess outright;
    later steps mix ``mu <- (1 - damping) mu + damping mu'``.
    """
    from .fbsde import initial_tilt, picard_solve
    from .simulate import make_ensemble, simulate_density, simulate_state
    if not 0 < damping <= 1:
        raise MeasureError("damping must lie in (0, 1]")
    if functional is None:
        if spec.terminal.variant != "meanfield":
            raise MeasureError("mfg_solve needs a potential functional")
        functional = spec.terminal.functional
    ens = make_ensemble(spec, M, N, seed, workers=workers)
    if initial is None:
        simulate_state(ens, spec, np.zeros(spec.n))
        simulate_density(ens, spec, initial_tilt(spec, ens.M, ens.N))
        initial = measure_from_ensemble(ens)
    mu = initial
    history: list[float] = []
    init = None
    agent = None
    new = mu
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        agent_spec = spec.replace(terminal=frozen_terminal(functional, mu))
        agent = picard_solve(agent_spec, M, N, seed, config=config, ensemble=ens, init=init)
        init = (agent.controls.psi, agent.controls.tilt)
        new = measure_from_ensemble(ens)
        gap = d_p(mu, new, 1.0, resolution)
        history.append(gap)
        if gap <= tol_measure:
            converged = True
            break
        mu = new if outer == 1 else mu.mix(new, damping).pruned()
    agent.measure = new
    return MFGResult(measure=new, frozen=mu, agent=agent, residual=history[-1], residual_history=history,
                     outer_iters=outer, converged=converged and agent.converged, resolution=resolution)


# ---------------------------------------------------------------------------
# particle-system demo


def pair_interaction_quadratic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``G(x, y) = |x - y|^2 / 2`` on broadcast rows."""
    d = x - y
    return 0.5 * np.sum(d * d, axis=-1)


def lln_discrepancy(mu: WeightedMeasure, N: int, reps: int = 400, seed: int = 0,
                    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = pair_interaction_quadratic) -> tuple[float, float]:
    """Mean and standard error of the particle-system LLN gap for ``N`` particles.

    Particles are i.i.d. from the normalised ``mu``.  The gap compares the
    double empirical average of the pair kernel with the symmetrised
    one-particle average against ``mu``.
    """
    if N < 1:
        raise MeasureError("N must be positive")
    rng = np.random.default_rng(seed)
    probs = mu.weights / mu.mass
    atoms = mu.atoms
    # one-particle field int (G(x, z) + G(z, x)) / 2 dmu(z) / mass, exact over the atoms
    field_vals = np.empty(mu.size)
    for start in range(0, mu.size, 512):
        block = atoms[start:start + 512]
        sym = 0.5 * (kernel(block[:, None, :], atoms[None, :, :]) + kernel(atoms[None, :, :], block[:, None, :]))
        field_vals[start:start + 512] = sym @ probs
    gaps = np.empty(reps)
    for r in range(reps):
        idx = rng.choice(mu.size, size=N, p=probs)
        x = atoms[idx]
        double = float(np.mean(kernel(x[:, None, :], x[None, :, :])))
        gaps[r] = abs(double - float(np.mean(field_vals[idx])))
    return float(gaps.mean()), float(gaps.std(ddof=1) / math.sqrt(reps))


def feynman_kac_demo(mu: WeightedMeasure, sizes: Sequence[int] = (8, 32, 128), reps: int = 400,
                     seed: int = 0) -> dict:
    """LLN gap for each particle count; decreasing in ``N`` up to Monte Carlo noise."""
    rows = {int(N): lln_discrepancy(mu, int(N), reps, seed + i) for i, N in enumerate(sizes)}
    means = [rows[int(N)][0] for N in sizes]
    ses = [rows[int(N)][1] for N in sizes]
    monotone = all(means[i + 1] <= means[i] + 3 * math.hypot(ses[i], ses[i + 1]) for i in range(len(means) - 1))
    return {"sizes": [int(N) for N in sizes], "mean": means, "std_error": ses, "monotone": monotone}


# ---------------------------------------------------------------------------
# CSV


def measure_columns(n: int) -> list[str]:
    return [f"atom_{i + 1}" for i in range(n)] + ["weight"]


def write_measure_csv(path, mu: WeightedMeasure) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(measure_columns(mu.n))
        for a, w in zip(mu.atoms, mu.weights):
            writer.writerow([repr(float(v)) for v in a] + [repr(float(w))])
    return path


def read_measure_csv(path) -> WeightedMeasure:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 1
        if header != measure_columns(n):
            raise MeasureError(f"unexpected measure header {header}")
        rows = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, n + 1)
    return WeightedMeasure(rows[:, :n], rows[:, n])
