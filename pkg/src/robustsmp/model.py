"""Problem instances for robust linear-state control with entropic ambiguity.

A :class:`ProblemSpec` bundles the linear state coefficients, Nature's driver,
the planner's quadratic running cost, the terminal cost and the horizon.  The
derived penalty weight ``gamma`` and the resolvent of the drift ODE live here
too, along with a sampled validator for the standing structural assumptions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from scipy.linalg import expm


class ModelError(ValueError):
    """Raised for malformed or non-finite problem data."""


class ConfigError(ModelError):
    """Raised when a configuration document cannot be turned into a spec."""


DEFAULT_NORM_GRID = 200


# ---------------------------------------------------------------------------
# time profiles


class TimeProfile:
    """A deterministic function of time with a fixed output shape.

    ``is_constant`` lets the simulator use closed-form propagators.
    """

    def __init__(self, fn: Callable[[float], Any], shape: tuple[int, ...], constant=None, description=None):
        self._fn = fn
        self.shape = tuple(shape)
        self._constant = None if constant is None else np.asarray(constant, dtype=float).reshape(self.shape)
        self.description = description

    @property
    def is_constant(self) -> bool:
        return self._constant is not None

    def __call__(self, t: float) -> np.ndarray:
        if self._constant is not None:
            return self._constant
        out = np.asarray(self._fn(float(t)), dtype=float)
        return out.reshape(self.shape)

    @classmethod
    def constant(cls, value, shape=None) -> "TimeProfile":
        arr = np.asarray(value, dtype=float)
        if shape is not None:
            arr = np.broadcast_to(arr, shape).copy()
        return cls(lambda t: arr, arr.shape, constant=arr, description={"constant": arr.tolist()})

    @classmethod
    def linear(cls, start, end, horizon: float) -> "TimeProfile":
        s = np.asarray(start, dtype=float)
        e = np.asarray(end, dtype=float)
        if s.shape != e.shape:
            raise ModelError("linear profile endpoints must share a shape")
        if horizon <= 0:
            raise ModelError("linear profile needs a positive horizon")
        return cls(lambda t: s + (e - s) * (t / horizon), s.shape,
                   description={"profile": "linear", "start": s.tolist(), "end": e.tolist()})

    @classmethod
    def piecewise(cls, times, values) -> "TimeProfile":
        """Right-continuous step function: value ``values[i]`` on ``[times[i], times[i+1])``."""
        ts = np.asarray(times, dtype=float)
        vs = [np.asarray(v, dtype=float) for v in values]
        if len(ts) != len(vs) or len(ts) == 0:
            raise ModelError("piecewise profile needs matching non-empty times and values")
        if np.any(np.diff(ts) <= 0):
            raise ModelError("piecewise profile times must increase")
        shape = vs[0].shape

        def fn(t):
            idx = max(int(np.searchsorted(ts, t, side="right")) - 1, 0)
            return vs[idx]

        return cls(fn, shape, description={"profile": "piecewise", "times": ts.tolist(),
                                           "values": [v.tolist() for v in vs]})

    @classmethod
    def coerce(cls, value, shape: tuple[int, ...], horizon: float | None = None) -> "TimeProfile":
        """Accept a profile, a callable, a constant, or a config dict."""
        if isinstance(value, TimeProfile):
            prof = value
        elif isinstance(value, Mapping):
            prof = _profile_from_config(value, horizon)
        elif callable(value):
            probe = np.asarray(value(0.0), dtype=float)
            prof = cls(value, probe.shape)
        else:
            prof = cls.constant(value, shape)
        if prof.shape != tuple(shape):
            try:
                if prof.is_constant:
                    return cls.constant(np.broadcast_to(prof(0.0), shape), shape)
            except ValueError:
                pass
            raise ModelError(f"profile shape {prof.shape} does not match expected {tuple(shape)}")
        return prof


def _profile_from_config(cfg: Mapping, horizon: float | None) -> TimeProfile:
    if "constant" in cfg and len(cfg) == 1:
        return TimeProfile.constant(cfg["constant"])
    kind = cfg.get("profile")
    if kind == "linear":
        _reject_unknown(cfg, {"profile", "start", "end"}, "linear profile")
        if horizon is None:
            raise ConfigError("linear profile requires the horizon")
        return TimeProfile.linear(cfg["start"], cfg["end"], horizon)
    if kind == "piecewise":
        _reject_unknown(cfg, {"profile", "times", "values"}, "piecewise profile")
        return TimeProfile.piecewise(cfg["times"], cfg["values"])
    raise ConfigError(f"unknown time profile {dict(cfg)!r}")


# ---------------------------------------------------------------------------
# coefficients


def _spectral(mat: np.ndarray) -> float:
    mat = np.atleast_2d(mat)
    if mat.size == 0:
        return 0.0
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True)
class Coefficients:
    """Linear state dynamics ``dX = (a + bX + c psi) dt + (nu + r sigma psi) dW``.

    ``sigma`` has shape (n, d, n): ``(sigma psi)_{ij} = sum_k sigma_{ijk} psi_k``.
    ``declared_bounds`` optionally caps the sup norms of each field.
    """

    n: int
    d: int
    r: int
    a: TimeProfile
    b: TimeProfile
    c: TimeProfile
    nu: TimeProfile
    sigma: TimeProfile
    declared_bounds: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ModelError("dimensions n and d must be positive")
        expected = {"a": (self.n,), "b": (self.n, self.n), "c": (self.n, self.n),
                    "nu": (self.n, self.d), "sigma": (self.n, self.d, self.n)}
        for name, shape in expected.items():
            prof = getattr(self, name)
            if not isinstance(prof, TimeProfile):
                object.__setattr__(self, name, TimeProfile.coerce(prof, shape))
            elif prof.shape != shape:
                raise ModelError(f"coefficient {name} has shape {prof.shape}, expected {shape}")

    @classmethod
    def build(cls, n: int, d: int, r: int, a=None, b=None, c=None, nu=None, sigma=None,
              declared_bounds=None, horizon=None) -> "Coefficients":
        """Convenience constructor: missing fields default to zero."""
        shapes = {"a": (n,), "b": (n, n), "c": (n, n), "nu": (n, d), "sigma": (n, d, n)}
        given = {"a": a, "b": b, "c": c, "nu": nu, "sigma": sigma}
        profs = {}
        for name, shape in shapes.items():
            val = given[name]
            profs[name] = TimeProfile.constant(np.zeros(shape)) if val is None \
                else TimeProfile.coerce(val, shape, horizon)
        return cls(n=n, d=d, r=int(r), declared_bounds=declared_bounds, **profs)

    def volatility(self, t: float, psi: np.ndarray) -> np.ndarray:
        """Return ``nu + r sigma psi`` for controls of shape (..., n); result (..., n, d)."""
        base = self.nu(t)
        if self.r == 0:
            return np.broadcast_to(base, psi.shape[:-1] + base.shape)
        return base + np.einsum("ijk,...k->...ij", self.sigma(t), psi)

    def sup_norms(self, T: float, n_grid: int = DEFAULT_NORM_GRID) -> dict[str, float]:
        """Max over an equispaced grid of the field norms (spectral for matrices)."""
        times = np.linspace(0.0, T, n_grid + 1)
        norms = {"a": 0.0, "b": 0.0, "c": 0.0, "nu": 0.0, "sigma": 0.0}
        for t in times:
            vals = {"a": float(np.linalg.norm(self.a(t))), "b": _spectral(self.b(t)),
                    "c": _spectral(self.c(t)), "nu": _spectral(self.nu(t)),
                    "sigma": _spectral(self.sigma(t).reshape(self.n * self.d, self.n))}
            for key, v in vals.items():
                if not math.isfinite(v):
                    raise ModelError(f"coefficient {key} is not finite at t={t}")
                norms[key] = max(norms[key], v)
        return norms


# ---------------------------------------------------------------------------
# driver


DRIVER_FAMILIES = ("quadratic-z", "smoothed-y-quadratic-z")


def _logcosh(y):
    y = np.abs(y)
    return y + np.log1p(np.exp(-2.0 * y)) - math.log(2.0)


@dataclass(frozen=True)
class Driver:
    """Nature's convex driver ``f(t, y, z)``.

    ``quadratic-z``:           ``f0(t) + a_y y + beta/2 |z|^2`` with ``|a_y| <= alpha``.
    ``smoothed-y-quadratic-z``: ``f0(t) + alpha logcosh(y) + beta/2 |z|^2``.
    """

    family: str
    alpha: float = 0.0
    beta: float = 1.0
    L: float = 1.0
    a_y: float = 0.0
    f0: TimeProfile = field(default_factory=lambda: TimeProfile.constant(0.0))

    def __post_init__(self):
        if self.family not in DRIVER_FAMILIES:
            raise ModelError(f"unknown driver family {self.family!r}")
        if not isinstance(self.f0, TimeProfile):
            object.__setattr__(self, "f0", TimeProfile.coerce(self.f0, ()))
        for name in ("alpha", "beta", "L", "a_y"):
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"driver parameter {name} must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ModelError("driver growth constants alpha, beta must be non-negative")
        if self.L <= 0:
            raise ModelError("driver bound L must be positive")

    @property
    def smoothed(self) -> bool:
        return self.family == "smoothed-y-quadratic-z"

    def value(self, t: float, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        zz = 0.5 * self.beta * (z[..., 0] ** 2 if z.shape[-1] == 1 else np.sum(z * z, axis=-1))
        if self.smoothed:
            zz = zz + self.alpha * _logcosh(y)
        elif self.a_y:
            zz = zz + self.a_y * y
        f0 = float(self.f0(t))
        return zz + f0 if f0 else np.broadcast_to(zz, np.broadcast_shapes(zz.shape, y.shape)) + 0.0

    def grad(self, t: float, y, z) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(d f / d y, d f / d z)``; the first always lies in [-alpha, alpha]."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        dy = self.alpha * np.tanh(y) if self.smoothed else np.full_like(y, self.a_y)
        return dy, self.beta * z

    def hessian_norm(self) -> float:
        """Bound on the second derivatives in (y, z)."""
        return max(self.alpha if self.smoothed else 0.0, self.beta)


# ---------------------------------------------------------------------------
# running cost


@dataclass(frozen=True)
class RunningCost:
    """Quadratic running cost ``l0(t) + psi' M psi / 2 + m . psi``."""

    M: np.ndarray
    m: np.ndarray
    l0: TimeProfile = field(default_factory=lambda: TimeProfile.constant(0.0))

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        if M.shape != (m.size, m.size):
            raise ModelError("running cost M must be square and match m")
        if not np.allclose(M, M.T, atol=1e-12):
            raise ModelError("running cost M must be symmetric")
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(m))):
            raise ModelError("running cost entries must be finite")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "m", m)
        if not isinstance(self.l0, TimeProfile):
            object.__setattr__(self, "l0", TimeProfile.coerce(self.l0, ()))

    @classmethod
    def half_square(cls, n: int) -> "RunningCost":
        return cls(M=np.eye(n), m=np.zeros(n))

    @property
    def n(self) -> int:
        return self.m.size

    def value(self, t: float, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if self.n == 1:
            x = psi[..., 0]
            out = (0.5 * self.M[0, 0]) * x * x
            if self.m[0]:
                out += self.m[0] * x
        else:
            out = 0.5 * np.einsum("...i,ij,...j->...", psi, self.M, psi) + psi @ self.m
        l0 = float(self.l0(t))
        return out + l0 if l0 else out

    def grad(self, psi) -> np.ndarray:
        return np.asarray(psi, dtype=float) @ self.M + self.m

    @property
    def inverse(self) -> np.ndarray:
        inv = self.__dict__.get("_inverse")
        if inv is None:
            try:
                np.linalg.cholesky(self.M)
            except np.linalg.LinAlgError as exc:
                raise ModelError("running cost M is not positive definite") from exc
            inv = np.linalg.inv(self.M)
            object.__setattr__(self, "_inverse", inv)
        return inv

    def minimizer(self, w) -> np.ndarray:
        """Argmin over psi of ``l(psi) + w . psi`` for w of shape (..., n)."""
        rhs = -(np.asarray(w, dtype=float) + self.m)
        return rhs @ self.inverse


# ---------------------------------------------------------------------------
# terminal cost


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost: either ``E[q g(X)]`` (linear) or ``G((qP) o X^{-1})`` (meanfield).

    ``growth`` is the polynomial growth exponent of ``g`` (or of the flat
    derivative of ``G``); it must not exceed ``2 - r``.
    """

    variant: str
    g: Callable[[np.ndarray], np.ndarray] | None = None
    grad_g: Callable[[np.ndarray], np.ndarray] | None = None
    functional: Any = None
    growth: int = 1
    convex: bool = True
    description: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant == "linear":
            if self.g is None or self.grad_g is None:
                raise ModelError("linear terminal cost needs g and its gradient")
        elif self.variant == "meanfield":
            if self.functional is None:
                raise ModelError("meanfield terminal cost needs a functional")
        else:
            raise ModelError(f"unknown terminal variant {self.variant!r}")

    @classmethod
    def affine(cls, w, c0: float = 0.0) -> "TerminalCost":
        w = np.atleast_1d(np.asarray(w, dtype=float))
        zero_slope = not np.any(w)
        return cls("linear", g=lambda x: x @ w + c0,
                   grad_g=lambda x: np.broadcast_to(w, x.shape).copy(),
                   growth=0 if zero_slope else 1, convex=True,
                   description={"kind": "affine", "w": w.tolist(), "c0": c0})

    @classmethod
    def zero(cls, n: int) -> "TerminalCost":
        return cls.affine(np.zeros(n))

    @classmethod
    def quadratic(cls, lam: float, w=None, c0: float = 0.0, n: int = 1) -> "TerminalCost":
        w = np.zeros(n) if w is None else np.atleast_1d(np.asarray(w, dtype=float))
        return cls("linear", g=lambda x: 0.5 * lam * np.sum(x * x, axis=-1) + x @ w + c0,
                   grad_g=lambda x: lam * x + w, growth=2, convex=lam >= 0,
                   description={"kind": "quadratic", "lam": lam, "w": w.tolist(), "c0": c0})

    @classmethod
    def softplus_sum(cls, threshold: float, scale: float = 0.1, weight: float = 1.0) -> "TerminalCost":
        """``weight * sum_i scale * log(1 + exp((x_i - threshold)/scale))``: a smooth convex hinge."""
        if scale <= 0:
            raise ModelError("softplus scale must be positive")

        def g(x):
            return weight * scale * np.sum(np.logaddexp(0.0, (x - threshold) / scale), axis=-1)

        def grad(x):
            return weight * 0.5 * (1.0 + np.tanh(0.5 * (x - threshold) / scale))

        return cls("linear", g=g, grad_g=grad, growth=1, convex=weight >= 0,
                   description={"kind": "softplus-sum", "threshold": threshold,
                                "scale": scale, "weight": weight})

    @classmethod
    def meanfield(cls, functional) -> "TerminalCost":
        return cls("meanfield", functional=functional, growth=functional.growth,
                   convex=functional.displacement_convex,
                   description={"functional": functional.describe()})


# ---------------------------------------------------------------------------
# problem spec


@dataclass(frozen=True)
class ProblemSpec:
    """Full model: dynamics, driver, costs, horizon ``T`` and initial state ``x0``."""

    coefficients: Coefficients
    driver: Driver
    running: RunningCost
    terminal: TerminalCost
    T: float
    x0: np.ndarray
    norm_grid: int = DEFAULT_NORM_GRID
    name: str = "custom"
    gamma: float = field(init=False)
    norms: Mapping[str, float] = field(init=False, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ModelError("horizon T must be positive and finite")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.coefficients.n,):
            raise ModelError("x0 must have length n")
        if not np.all(np.isfinite(x0)):
            raise ModelError("x0 must be finite")
        if self.running.n != self.coefficients.n:
            raise ModelError("running cost dimension must equal n")
        object.__setattr__(self, "x0", x0)
        norms = dict(self.coefficients.sup_norms(self.T, self.norm_grid))
        g_norm, g_inv_norm = resolvent_norms(self.coefficients, self.T, self.norm_grid)
        norms["Gamma"] = g_norm
        norms["Gamma_inv"] = g_inv_norm
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "gamma", gamma_formula(
            self.driver.beta, self.driver.L, self.driver.alpha, self.T,
            g_norm, g_inv_norm, norms["nu"], norms["sigma"]))

    @property
    def n(self) -> int:
        return self.coefficients.n

    @property
    def d(self) -> int:
        return self.coefficients.d

    @property
    def r(self) -> int:
        return self.coefficients.r

    @property
    def degenerate(self) -> bool:
        """True when beta = 0 and the entropy penalty is vacuous."""
        return self.gamma == 0.0

    def replace(self, **changes) -> "ProblemSpec":
        kwargs = dict(coefficients=self.coefficients, driver=self.driver, running=self.running,
                      terminal=self.terminal, T=self.T, x0=self.x0, norm_grid=self.norm_grid,
                      name=self.name)
        kwargs.update(changes)
        return ProblemSpec(**kwargs)


# ---------------------------------------------------------------------------
# resolvent and constants


@dataclass(frozen=True)
class Resolvent:
    matrix: np.ndarray
    inverse: np.ndarray


def _propagator(b_prof: TimeProfile, t0: float, h: float) -> np.ndarray:
    return expm(h * b_prof(t0))


def resolvent(spec_or_coeffs, t: float, n_grid: int | None = None, T: float | None = None) -> Resolvent:
    """Fundamental matrix of ``dG/dt = b G``, ``G(0) = I``, together with its inverse.

    Constant ``b`` uses the matrix exponential; otherwise a left-point product
    integral on a grid of ``n_grid`` steps over ``[0, T]`` is used.
    """
    if isinstance(spec_or_coeffs, ProblemSpec):
        coeffs = spec_or_coeffs.coefficients
        T = spec_or_coeffs.T if T is None else T
        n_grid = spec_or_coeffs.norm_grid if n_grid is None else n_grid
    else:
        coeffs = spec_or_coeffs
        n_grid = DEFAULT_NORM_GRID if n_grid is None else n_grid
    if not math.isfinite(t) or t < 0 or (T is not None and t > T * (1 + 1e-12)):
        raise ModelError(f"resolvent time {t} outside [0, T]")
    b = coeffs.b
    if b.is_constant:
        mat = b(0.0)
        if not np.all(np.isfinite(mat)):
            raise ModelError("drift matrix b is not finite")
        return Resolvent(expm(t * mat), expm(-t * mat))
    horizon = t if T is None else T
    h = horizon / n_grid if horizon > 0 else 0.0
    gam = np.eye(coeffs.n)
    inv = np.eye(coeffs.n)
    s = 0.0
    while s < t - 1e-15:
        step = min(h, t - s) if h > 0 else t - s
        bs = b(s)
        if not np.all(np.isfinite(bs)):
            raise ModelError(f"drift matrix b is not finite at t={s}")
        gam = expm(step * bs) @ gam
        inv = inv @ expm(-step * bs)
        s += step
    return Resolvent(gam, inv)


def resolvent_norms(coeffs: Coefficients, T: float, n_grid: int = DEFAULT_NORM_GRID) -> tuple[float, float]:
    """Grid maxima of the spectral norms of the resolvent and its inverse on [0, T]."""
    times = np.linspace(0.0, T, n_grid + 1)
    b = coeffs.b
    if b.is_constant and not np.any(b(0.0)):
        return 1.0, 1.0
    best, best_inv = 1.0, 1.0
    gam = np.eye(coeffs.n)
    inv = np.eye(coeffs.n)
    for k in range(n_grid):
        h = times[k + 1] - times[k]
        bk = b(times[k])
        if not np.all(np.isfinite(bk)):
            raise ModelError(f"drift matrix b is not finite at t={times[k]}")
        if b.is_constant:
            gam = expm(times[k + 1] * bk)
            inv = expm(-times[k + 1] * bk)
        else:
            gam = expm(h * bk) @ gam
            inv = inv @ expm(-h * bk)
        best = max(best, _spectral(gam))
        best_inv = max(best_inv, _spectral(inv))
    return best, best_inv


def gamma_formula(beta: float, L: float, alpha: float, T: float, gamma_norm: float,
                  gamma_inv_norm: float, nu_norm: float, sigma_norm: float) -> float:
    """Entropy penalty weight from the model bounds (see ``gamma_constant``)."""
    big_l = max(1.0, L)
    disc = math.exp(alpha * T)
    return 8.0 * beta * big_l * disc * gamma_norm * gamma_inv_norm * (nu_norm + 12.0 * big_l * disc * sigma_norm)


def gamma_constant(spec: ProblemSpec) -> float:
    """Penalty weight ``gamma`` evaluated on the grid sup norms stored in ``spec``."""
    nm = spec.norms
    return gamma_formula(spec.driver.beta, spec.driver.L, spec.driver.alpha, spec.T,
                         nm["Gamma"], nm["Gamma_inv"], nm["nu"], nm["sigma"])


def smallness_value(spec: ProblemSpec) -> float:
    nm = spec.norms
    d = spec.driver
    return (4.0 * d.beta * math.exp(d.alpha * spec.T) * d.L * nm["Gamma"] ** 2
            * nm["Gamma_inv"] ** 2 * nm["nu"] ** 2 * spec.T)


def smallness_check(spec: ProblemSpec) -> bool:
    """Strict smallness inequality for uncontrolled volatility; vacuous when r = 1."""
    if spec.r == 1:
        return True
    return smallness_value(spec) < 1.0


# ---------------------------------------------------------------------------
# validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    witness: Any = None

    def to_dict(self) -> dict:
        out = {"name": self.name, "passed": bool(self.passed), "detail": self.detail}
        if self.witness is not None:
            out["witness"] = _jsonable(self.witness)
        return out


@dataclass
class ValidationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def validate_assumptions(spec: ProblemSpec, n_samples: int = 1000, seed: int = 0) -> ValidationReport:
    """Sampled checks of the structural assumptions on ``spec``."""
    rng = np.random.default_rng(seed)
    co, dr, rc = spec.coefficients, spec.driver, spec.running
    L = dr.L
    times = np.linspace(0.0, spec.T, spec.norm_grid + 1)
    checks: list[CheckResult] = []

    checks.append(CheckResult("horizon", spec.T > 0, f"T={spec.T}"))

    sig_max = max(float(np.max(np.abs(co.sigma(t)))) for t in times)
    ok = co.r in (0, 1) and (co.r == 1 or sig_max == 0.0)
    checks.append(CheckResult("volatility_flag", ok, f"r={co.r}, max|sigma|={sig_max:g}",
                              None if ok else {"r": co.r, "max_abs_sigma": sig_max}))

    bounded, witness = True, None
    if co.declared_bounds:
        for key, cap in co.declared_bounds.items():
            if spec.norms.get(key, 0.0) > cap + 1e-12:
                bounded, witness = False, {"field": key, "norm": spec.norms[key], "bound": cap}
                break
    checks.append(CheckResult("coefficient_bounds", bounded,
                              "sup norms " + ", ".join(f"{k}={v:.4g}" for k, v in spec.norms.items()),
                              witness))

    vol = spec.norms["nu"] + spec.norms["sigma"]
    checks.append(CheckResult("volatility_bound", vol <= L + 1e-12, f"|nu|+|sigma|={vol:.6g} vs L={L}",
                              None if vol <= L + 1e-12 else {"norm": vol, "L": L}))

    # driver: joint convexity along random segments
    d = spec.d
    t_s = rng.uniform(0.0, spec.T, n_samples)
    y1, y2 = rng.normal(0, 3, n_samples), rng.normal(0, 3, n_samples)
    z1, z2 = rng.normal(0, 3, (n_samples, d)), rng.normal(0, 3, (n_samples, d))
    worst, wit = 0.0, None
    for i in range(n_samples):
        t = t_s[i]
        mid = dr.value(t, 0.5 * (y1[i] + y2[i]), 0.5 * (z1[i] + z2[i]))
        avg = 0.5 * (dr.value(t, y1[i], z1[i]) + dr.value(t, y2[i], z2[i]))
        excess = float(mid - avg)
        if excess > worst:
            worst, wit = excess, {"t": t, "y": [y1[i], y2[i]], "z": [z1[i], z2[i]]}
    checks.append(CheckResult("driver_convexity", worst <= 1e-12, f"max midpoint excess {worst:.3g}",
                              wit if worst > 1e-12 else None))

    dy, _ = dr.grad(0.0, y1, z1)
    bad = np.flatnonzero(np.abs(dy) > dr.alpha + 1e-12)
    checks.append(CheckResult("driver_y_growth", bad.size == 0, f"max |df/dy|={np.max(np.abs(dy)):.6g}, alpha={dr.alpha}",
                              None if bad.size == 0 else {"y": y1[bad[0]], "df_dy": dy[bad[0]]}))

    hess = dr.hessian_norm()
    checks.append(CheckResult("driver_hessian", hess <= L + 1e-12, f"second-derivative bound {hess} vs L={L}"))

    f0_abs = np.array([abs(float(dr.f0(t))) for t in t_s])
    fvals = np.array([dr.value(t_s[i], y1[i], z1[i]) for i in range(n_samples)])
    bound = f0_abs + dr.alpha * np.abs(y1) + 0.5 * dr.beta * np.sum(z1 * z1, axis=1)
    bad = np.flatnonzero(fvals > bound + 1e-10)
    checks.append(CheckResult("driver_growth", bad.size == 0, "f <= |f0| + alpha|y| + beta|z|^2/2",
                              None if bad.size == 0 else {"y": y1[bad[0]], "z": z1[bad[0]]}))

    # running cost: strong convexity and boundedness at zero
    eig = np.linalg.eigvalsh(rc.M)
    p1, p2 = rng.normal(0, 2, (n_samples, rc.n)), rng.normal(0, 2, (n_samples, rc.n))
    lhs = np.sum((rc.grad(p1) - rc.grad(p2)) * (p1 - p2), axis=1)
    rhs = np.sum((p1 - p2) ** 2, axis=1) / L
    bad = np.flatnonzero(lhs < rhs - 1e-12)
    ok = bad.size == 0 and eig.min() >= 1.0 / L - 1e-12 and eig.max() <= L + 1e-12
    witness = None
    if not ok:
        witness = {"eigenvalues": eig.tolist()}
        if bad.size:
            witness.update(psi=p1[bad[0]].tolist(), psi_prime=p2[bad[0]].tolist())
    checks.append(CheckResult("running_strong_convexity", ok,
                              f"eigenvalues of M in [{eig.min():.4g}, {eig.max():.4g}] vs [1/L, L]", witness))
    l0_max = max(abs(float(rc.value(t, np.zeros(rc.n)))) for t in times)
    checks.append(CheckResult("running_bound_at_zero", l0_max <= L + 1e-12, f"max |l(t,0)|={l0_max:.4g}"))

    # terminal cost
    tc = spec.terminal
    allowed = 2 - co.r
    checks.append(CheckResult("terminal_growth", tc.growth <= allowed,
                              f"growth exponent {tc.growth} vs allowed {allowed}",
                              None if tc.growth <= allowed else {"growth": tc.growth, "r": co.r}))
    if tc.variant == "linear":
        x1 = rng.normal(0, 2, (n_samples, spec.n)) + spec.x0
        x2 = rng.normal(0, 2, (n_samples, spec.n)) + spec.x0
        excess = tc.g(0.5 * (x1 + x2)) - 0.5 * (tc.g(x1) + tc.g(x2))
        ok = bool(np.all(excess <= 1e-10)) and tc.convex
        checks.append(CheckResult("terminal_convexity", ok, f"max midpoint excess {float(np.max(excess)):.3g}",
                                  None if ok else {"x": x1[int(np.argmax(excess))].tolist()}))
    else:
        checks.append(CheckResult("terminal_convexity", bool(tc.convex),
                                  "displacement convexity flag of the functional"))

    checks.append(CheckResult("gamma_positive", spec.gamma > 0,
                              f"gamma={spec.gamma:.6g}" + (" (degenerate: beta=0)" if spec.degenerate else "")))
    small = smallness_check(spec)
    detail = "vacuous (r=1)" if co.r == 1 else f"value {smallness_value(spec):.6g} < 1"
    checks.append(CheckResult("smallness", small, detail,
                              None if small else {"value": smallness_value(spec)}))
    return ValidationReport(checks)


# ---------------------------------------------------------------------------
# configuration


_TOP_KEYS = {"dims", "horizon", "x0", "coefficients", "driver", "running", "terminal", "name"}


def _reject_unknown(cfg: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


def spec_from_config(cfg: Mapping[str, Any]) -> ProblemSpec:
    """Build a spec from a parsed configuration mapping; unknown keys are rejected."""
    _reject_unknown(cfg, _TOP_KEYS, "top level")
    for key in ("dims", "horizon", "x0", "driver", "terminal"):
        if key not in cfg:
            raise ConfigError(f"missing key {key!r}")
    dims = cfg["dims"]
    _reject_unknown(dims, {"n", "d", "r"}, "dims")
    n, d, r = int(dims["n"]), int(dims["d"]), int(dims.get("r", 0))
    T = float(cfg["horizon"])
    coeff_cfg = cfg.get("coefficients", {})
    _reject_unknown(coeff_cfg, {"a", "b", "c", "nu", "sigma", "bounds"}, "coefficients")
    coeffs = Coefficients.build(n, d, r, horizon=T, declared_bounds=coeff_cfg.get("bounds"),
                                **{k: v for k, v in coeff_cfg.items() if k != "bounds"})
    drv = cfg["driver"]
    _reject_unknown(drv, {"family", "f0", "alpha", "beta", "L", "a_y"}, "driver")
    driver = Driver(family=drv.get("family", "quadratic-z"), alpha=float(drv.get("alpha", 0.0)),
                    beta=float(drv.get("beta", 1.0)), L=float(drv.get("L", 1.0)),
                    a_y=float(drv.get("a_y", 0.0)),
                    f0=TimeProfile.coerce(drv.get("f0", 0.0), (), T))
    run = cfg.get("running", {})
    _reject_unknown(run, {"l0", "M", "m"}, "running")
    running = RunningCost(M=np.asarray(run.get("M", np.eye(n)), dtype=float).reshape(n, n),
                          m=np.asarray(run.get("m", np.zeros(n)), dtype=float).reshape(n),
                          l0=TimeProfile.coerce(run.get("l0", 0.0), (), T))
    terminal = terminal_from_config(cfg["terminal"], n)
    return ProblemSpec(coefficients=coeffs, driver=driver, running=running, terminal=terminal,
                       T=T, x0=np.asarray(cfg["x0"], dtype=float).reshape(n),
                       name=str(cfg.get("name", "custom")))


def terminal_from_config(cfg: Mapping[str, Any], n: int) -> TerminalCost:
    variant = cfg.get("variant")
    if variant == "linear":
        _reject_unknown(cfg, {"variant", "g"}, "terminal")
        g = cfg.get("g", {"kind": "zero"})
        kind = g.get("kind")
        if kind == "zero":
            _reject_unknown(g, {"kind"}, "terminal.g")
            return TerminalCost.zero(n)
        if kind == "affine":
            _reject_unknown(g, {"kind", "w", "c0"}, "terminal.g")
            return TerminalCost.affine(np.asarray(g["w"], dtype=float).reshape(n), float(g.get("c0", 0.0)))
        if kind == "quadratic":
            _reject_unknown(g, {"kind", "lam", "w", "c0"}, "terminal.g")
            return TerminalCost.quadratic(float(g["lam"]), g.get("w"), float(g.get("c0", 0.0)), n=n)
        if kind == "softplus-sum":
            _reject_unknown(g, {"kind", "threshold", "scale", "weight"}, "terminal.g")
            return TerminalCost.softplus_sum(float(g["threshold"]), float(g.get("scale", 0.1)),
                                             float(g.get("weight", 1.0)))
        raise ConfigError(f"unknown terminal g kind {kind!r}")
    if variant == "meanfield":
        _reject_unknown(cfg, {"variant", "functional"}, "terminal")
        from .meanfield import functional_from_config
        return TerminalCost.meanfield(functional_from_config(cfg["functional"], n))
    raise ConfigError(f"unknown terminal variant {variant!r}")


def load_spec(source) -> ProblemSpec:
    """Load a spec from a JSON file path, JSON text, or an already-parsed mapping."""
    if isinstance(source, Mapping):
        return spec_from_config(source)
    text = str(source)
    path = Path(text)
    if not text.lstrip().startswith("{") and path.exists():
        text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, Mapping):
        raise ConfigError("config root must be an object")
    return spec_from_config(cfg)
