"""Regression Monte Carlo solver for the coupled planner/Nature first-order systems.

The planner's adjoint is carried in density-normalised form: ``P = p / q`` and
``K = k / q - P Z*'``.  Under this change of variables ``P`` solves a linear
BSDE whose terminal value ``grad g(X_T)`` does not involve ``q``, which keeps
the regressions well conditioned even when ``q`` is heavy tailed.  The
unnormalised ``(p, k)`` are exposed as properties.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .duality import fenchel_dual, fenchel_gap
from .model import ProblemSpec
from .simulate import (CostEstimate, PathEnsemble, TiltField, estimate_costs, make_ensemble, path_array, time_major,
                       simulate_density, simulate_state, trajectory_columns, write_trajectory_csv)


class SolverError(RuntimeError):
    """Regression breakdown or inadmissible iterate inside the solver."""


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RegressionBasis:
    """Least-squares basis on the Markov state.

    ``polynomial``: all monomials of total degree <= ``degree`` in the
    standardised state.  ``piecewise-constant``: the constant function only,
    i.e. one mean per time step.
    """

    family: str = "polynomial"
    degree: int = 3
    cond_threshold: float = 1e8
    ridge: float = 1e-10

    def __post_init__(self):
        if self.family not in ("polynomial", "piecewise-constant"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    def design(self, state: np.ndarray) -> "Design":
        M = state.shape[0]
        cols = [np.ones(M)]
        if self.family == "polynomial" and self.degree > 0:
            mean = state.mean(axis=0)
            std = state.std(axis=0)
            live = std > 1e-12 * (1.0 + np.abs(mean))
            z = (state[:, live] - mean[live]) / std[live]
            s = z.shape[1]
            for deg in range(1, self.degree + 1):
                for combo in itertools.combinations_with_replacement(range(s), deg):
                    col = z[:, combo[0]].copy()
                    for j in combo[1:]:
                        col *= z[:, j]
                    cols.append(col)
        return Design(np.column_stack(cols), self)


class Design:
    """Orthonormalised design matrix for one time step (Cholesky QR, applied twice)."""

    def __init__(self, B: np.ndarray, basis: RegressionBasis):
        if not np.all(np.isfinite(B)):
            raise SolverError("regression design contains non-finite values")
        self.B = B
        K = B.shape[1]
        gram = B.T @ B
        ev = np.linalg.eigvalsh(gram)
        self.cond = math.inf if ev[0] <= 0 else float(math.sqrt(ev[-1] / ev[0]))
        self.ridged = self.cond > basis.cond_threshold
        if self.ridged:
            lam = basis.ridge * max(np.trace(gram) / K, 1e-300)
            self.Q = None
            self._solve = np.linalg.inv(gram + lam * np.eye(K))
            return
        # one pass loses orthogonality like eps * cond^2; a second pass repairs it
        Q = B @ np.linalg.inv(np.linalg.cholesky(gram)).T
        if self.cond > 1e2:
            Q = Q @ np.linalg.inv(np.linalg.cholesky(Q.T @ Q)).T
        self.Q = Q
        self._solve = None

    def project(self, values: np.ndarray) -> np.ndarray:
        """L2 projection of ``values`` (shape (M, ...)) onto the span of the basis."""
        shape = values.shape
        flat = values.reshape(shape[0], -1)
        if flat.shape[1] == 1 and self._solve is None:
            v = flat[:, 0]
            return (self.Q @ (v @ self.Q)).reshape(shape)
        if self._solve is None:
            fitted = self.Q @ (self.Q.T @ flat)
        else:
            fitted = self.B @ (self._solve @ (self.B.T @ flat))
        return fitted.reshape(shape)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 0.5
    max_iters: int = 60
    tol_residual: float = 1e-6
    tol_value: float = 1e-8
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    order: str = "nature-first"
    scheme: str = "resolvent"
    include_logq: bool = False
    stop_on_value: bool = False

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol_residual <= 0 or self.tol_value <= 0:
            raise ValueError("tolerances must be positive")
        if self.order not in ("nature-first", "planner-first"):
            raise ValueError("order must be 'nature-first' or 'planner-first'")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def to_dict(self) -> dict:
        return {"damping": self.damping, "max_iters": self.max_iters, "tol_residual": self.tol_residual,
                "tol_value": self.tol_value, "order": self.order, "scheme": self.scheme,
                "basis": {"family": self.basis.family, "degree": self.basis.degree,
                          "cond_threshold": self.basis.cond_threshold},
                "include_logq": self.include_logq}


@dataclass
class ControlFields:
    """Controls and backward processes on the grid.

    ``P`` (M, N+1, n) and ``K`` (M, N, n, d) are the density-normalised adjoint;
    ``p = q P`` and ``k = q (K + P Z*')``.
    """

    psi: np.ndarray
    tilt: TiltField
    Y: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    K: np.ndarray
    q: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return self.q[:, :, None] * self.P

    @property
    def k(self) -> np.ndarray:
        M, N = self.Z.shape[:2]
        _, zs = self.tilt.arrays(M, N, self.Z.shape[2])
        return self.q[:, :-1, None, None] * (self.K + self.P[:, :-1, :, None] * zs[:, :, None, :])


@dataclass
class SaddleSolution:
    spec: ProblemSpec
    ensemble: PathEnsemble
    controls: ControlFields
    costs: CostEstimate
    residual_history: list[float]
    residual: float
    planner_residual: float
    nature_residual: float
    isaac_residual: float
    iterations: int
    converged: bool
    config: SolverConfig
    max_condition: float = 0.0
    measure: Any = None
    extras: dict = field(default_factory=dict)

    @property
    def J(self):
        return self.costs.J

    @property
    def R(self):
        return self.costs.R

    @property
    def S(self):
        return self.costs.S

    def control_profile(self) -> np.ndarray:
        """Path-average of the planner control at each grid step, shape (N, n)."""
        return self.controls.psi.mean(axis=0)

    def report(self) -> dict:
        return {"iterations": self.iterations,
                "residual_history": [float(r) for r in self.residual_history],
                "J": self.costs.J.value, "J_std_error": self.costs.J.std_error,
                "R": self.costs.R.value, "R_std_error": self.costs.R.std_error,
                "S": self.costs.S.value, "S_std_error": self.costs.S.std_error,
                "isaac_residual": self.isaac_residual, "converged": bool(self.converged),
                "residual": self.residual, "planner_residual": self.planner_residual,
                "nature_residual": self.nature_residual,
                "M": self.ensemble.M, "N": self.ensemble.N, "seed": self.ensemble.seed,
                "scenario": self.spec.name, "solver": self.config.to_dict(),
                "max_design_condition": self.max_condition, **self.extras}


# ---------------------------------------------------------------------------
# terminal data


TerminalFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def terminal_conditions(spec: ProblemSpec, X_T: np.ndarray, q_T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nature's terminal value and the normalised planner terminal value ``p_T / q_T``."""
    tc = spec.terminal
    if tc.variant == "linear":
        return tc.g(X_T), tc.grad_g(X_T)
    from .meanfield import WeightedMeasure
    mu = WeightedMeasure(X_T, q_T / q_T.size)
    return tc.functional.flat(mu, X_T), tc.functional.lions(mu, X_T)


def _state(ensemble: PathEnsemble, k: int, include_logq: bool) -> np.ndarray:
    X_k = ensemble.X[:, k]
    if include_logq:
        return np.column_stack([X_k, ensemble.logq[:, k]])
    return X_k


# ---------------------------------------------------------------------------
# backward sweeps


class _CondTracker:
    def __init__(self):
        self.worst = 1.0

    def see(self, design: Design):
        if not math.isfinite(design.cond):
            raise SolverError(f"regression design is rank deficient (condition {design.cond})")
        self.worst = max(self.worst, design.cond)


class DesignCache:
    """Per-step designs reused across sweeps.

    A design stays valid while the regression state at that step only moves
    by a path-independent shift, since the polynomial span is invariant under
    translations.
    """

    def __init__(self, rel_tol: float = 1e-10):
        self.rel_tol = rel_tol
        self._designs: dict[int, tuple[np.ndarray, Design]] = {}

    def clear(self):
        self._designs.clear()

    def get(self, ensemble: PathEnsemble, k: int, basis: RegressionBasis, include_logq: bool) -> Design:
        state = _state(ensemble, k, include_logq)
        hit = self._designs.get(k)
        if hit is not None:
            old, des = hit
            shift = state - old
            spread = np.ptp(shift, axis=0)
            if np.all(spread <= self.rel_tol * (1.0 + np.abs(old).max(axis=0))):
                return des
        des = basis.design(state)
        self._designs[k] = (np.array(state), des)
        return des


def _design(ensemble, k, basis, include_logq, tracker, cache):
    des = cache.get(ensemble, k, basis, include_logq) if cache is not None else \
        basis.design(_state(ensemble, k, include_logq))
    if tracker is not None:
        tracker.see(des)
    return des


def backward_nature(ensemble: PathEnsemble, spec: ProblemSpec, psi: np.ndarray, tilt: TiltField | None = None,
                    basis: RegressionBasis | None = None, terminal: np.ndarray | TerminalFn | None = None,
                    include_logq: bool = False, tracker: _CondTracker | None = None,
                    cache: DesignCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``-dY = (f(Y,Z) + l(psi)) dt - Z dW`` with ``Y_T`` the q-derivative of the terminal cost.

    ``Z_k`` regresses the innovation ``(Y_{k+1} - E_k Y_{k+1}) dW_k / dt``; the
    implicit driver term gets one fixed-point pass.
    """
    basis = basis or RegressionBasis()
    M, N, d = ensemble.M, ensemble.N, ensemble.d
    dt = ensemble.dt
    times = ensemble.times
    ensemble.ensure_density()
    psi = np.asarray(psi, dtype=float)
    psi = np.broadcast_to(psi if psi.ndim == 3 else psi.reshape(1, 1, -1) if psi.ndim <= 1 else psi[None],
                          (M, N, spec.n))
    Y = path_array(M, N + 1)
    Z = path_array(M, N, d)
    if terminal is None:
        Y[:, N] = terminal_conditions(spec, ensemble.X[:, N], ensemble.q[:, N])[0]
    elif callable(terminal):
        Y[:, N] = terminal(ensemble.X[:, N], ensemble.q[:, N])[0]
    else:
        Y[:, N] = terminal
    drv, run = spec.driver, spec.running
    for k in range(N - 1, -1, -1):
        t = times[k]
        des = _design(ensemble, k, basis, include_logq, tracker, cache)
        nxt = Y[:, k + 1]
        y_hat = des.project(nxt)
        Z[:, k] = des.project((nxt - y_hat)[:, None] * ensemble.dW[:, k]) / dt
        lk = run.value(t, psi[:, k])
        y0 = y_hat + (drv.value(t, y_hat, Z[:, k]) + lk) * dt
        Y[:, k] = des.project(y_hat + (drv.value(t, y0, Z[:, k]) + lk) * dt)
    return Y, Z


def backward_planner_normalized(ensemble: PathEnsemble, spec: ProblemSpec, tilt: TiltField,
                                basis: RegressionBasis | None = None,
                                terminal: np.ndarray | TerminalFn | None = None,
                                include_logq: bool = False,
                                tracker: _CondTracker | None = None,
                                cache: DesignCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Backward sweep for ``P = p/q`` and ``K = k/q - P Z*'``.

    ``dP = -(b'P + Y* P + K Z*) dt + K dW``; the linear part uses the exact
    one-step propagator ``exp((b' + Y*) dt)``.
    """
    basis = basis or RegressionBasis()
    M, N, d, n = ensemble.M, ensemble.N, ensemble.d, spec.n
    dt = ensemble.dt
    times = ensemble.times
    ensemble.ensure_density()
    ys, zs = tilt.arrays(M, N, d)
    P = path_array(M, N + 1, n)
    K = path_array(M, N, n, d)
    if terminal is None:
        P[:, N] = terminal_conditions(spec, ensemble.X[:, N], ensemble.q[:, N])[1]
    elif callable(terminal):
        P[:, N] = terminal(ensemble.X[:, N], ensemble.q[:, N])[1]
    else:
        P[:, N] = terminal
    b = spec.coefficients.b
    b_zero = b.is_constant and not np.any(b(0.0))
    y_zero = not np.any(ys)
    for k in range(N - 1, -1, -1):
        t = times[k]
        des = _design(ensemble, k, basis, include_logq, tracker, cache)
        nxt = P[:, k + 1]
        p_hat = des.project(nxt)
        K[:, k] = des.project((nxt - p_hat)[:, :, None] * ensemble.dW[:, k][:, None, :]) / dt
        lin = p_hat if b_zero else p_hat @ expm(b(t) * dt)
        if not y_zero:
            lin = np.exp(ys[:, k] * dt)[:, None] * lin
        if n == 1 and d == 1:
            drift = K[:, k, :, 0] * zs[:, k]
        else:
            drift = np.einsum("mij,mj->mi", K[:, k], zs[:, k])
        P[:, k] = des.project(lin + drift * dt)
    return P, K


def backward_planner(ensemble: PathEnsemble, spec: ProblemSpec, psi=None, q: np.ndarray | None = None,
                     tilt: TiltField | None = None, basis: RegressionBasis | None = None,
                     terminal=None, include_logq: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint ``(p, k)`` of ``-dp = b'p dt - k dW``, ``p_T = q_T grad g(X_T)``.

    ``q`` must be the density simulated on ``ensemble`` under ``tilt``; ``psi``
    is accepted for signature symmetry (the adjoint does not depend on it
    beyond the state paths already stored on the ensemble).
    """
    if tilt is None:
        tilt = TiltField.null(ensemble.d)
    if q is not None:
        ensemble.q = q
        ensemble.logq = np.log(q)
    P, K = backward_planner_normalized(ensemble, spec, tilt, basis, terminal, include_logq)
    fields = ControlFields(psi=ensemble.psi, tilt=tilt, Y=None, Z=np.empty((ensemble.M, ensemble.N, ensemble.d)),
                           P=P, K=K, q=ensemble.q)
    return fields.p, fields.k


# ---------------------------------------------------------------------------
# best responses


def nature_update(driver, Y: np.ndarray, Z: np.ndarray, times: np.ndarray | None = None) -> TiltField:
    """``(Y*, Z*) = grad f(Y, Z)`` on the left grid points; ``Y`` may include the terminal column."""
    N = Z.shape[1]
    y_left = Y[:, :N]
    ys, zs = driver.grad(0.0, y_left, Z)
    return TiltField(ys, zs, driver.alpha)


def _trace_sigma(spec: ProblemSpec, t: float, kq: np.ndarray) -> np.ndarray:
    """``Tr(sigma' k)_l = sum_{ij} sigma_{ijl} k_{ij}`` for k of shape (M, n, d)."""
    return np.einsum("ijl,mij->ml", spec.coefficients.sigma(t), kq)


def planner_best_response(spec: ProblemSpec, times: np.ndarray, P: np.ndarray, kq: np.ndarray) -> np.ndarray:
    """Minimiser of the pre-Hamiltonian in ``psi`` given ``P = p/q`` and ``kq = k/q``."""
    M, N = kq.shape[:2]
    co = spec.coefficients
    if co.c.is_constant and co.sigma.is_constant:
        if spec.n == 1 and spec.d == 1:
            w = P[:, :N] * co.c(0.0)[0, 0]
            if co.r == 1:
                w = w + co.sigma(0.0)[0, 0, 0] * kq[:, :, :, 0]
            inv = spec.running.inverse[0, 0]
            return (w + spec.running.m[0]) * -inv if spec.running.m[0] else w * -inv
        w = P[:, :N] @ co.c(0.0)
        if co.r == 1:
            w = w + np.einsum("ijl,mkij->mkl", co.sigma(0.0), kq)
        return time_major(spec.running.minimizer(w))
    out = path_array(M, N, spec.n)
    for k in range(N):
        t = times[k]
        w = P[:, k] @ co.c(t)
        if co.r == 1:
            w = w + _trace_sigma(spec, t, kq[:, k])
        out[:, k] = spec.running.minimizer(w)
    return out


def planner_update(spec: ProblemSpec, ensemble: PathEnsemble, p: np.ndarray, k: np.ndarray,
                   q: np.ndarray) -> np.ndarray:
    """``psi = M^{-1}(-m - (c'p + r Tr(sigma'k)) / q)`` per (path, step)."""
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0):
        raise SolverError("density must be positive")
    N = k.shape[1]
    P = np.asarray(p, dtype=float) / q[:, :, None]
    kq = np.asarray(k, dtype=float) / q[:, :N, None, None]
    return planner_best_response(spec, ensemble.times, P, kq)


def _kq(P: np.ndarray, K: np.ndarray, tilt: TiltField) -> np.ndarray:
    M, N, n, d = K.shape
    _, zs = tilt.arrays(M, N, d)
    return K + P[:, :N, :, None] * zs[:, :, None, :]


def _weighted_norm(sq: np.ndarray, q: np.ndarray, dt: float) -> float:
    """Square root of ``mean_i sum_k q_ik sq_ik dt``."""
    return float(math.sqrt(max(np.mean(np.sum(q[:, :-1] * sq, axis=1)) * dt, 0.0)))


def planner_residual(spec: ProblemSpec, psi: np.ndarray, psi_br: np.ndarray, q: np.ndarray, dt: float) -> float:
    """q-weighted L2 norm of ``grad_psi H / q = M (psi - psi_br)``."""
    diff = psi - psi_br
    if spec.n == 1:
        g = spec.running.M[0, 0] * diff[..., 0]
        return _weighted_norm(g * g, q, dt)
    g = diff @ spec.running.M
    return _weighted_norm(np.sum(g * g, axis=-1), q, dt)


def nature_residual(tilt: TiltField, target: TiltField, q: np.ndarray, dt: float) -> float:
    M, N1 = q.shape
    N = N1 - 1
    d = np.broadcast_to(target.Zstar, target.Zstar.shape).shape[-1]
    y0, z0 = tilt.arrays(M, N, d)
    y1, z1 = target.arrays(M, N, d)
    sq = (y0 - y1) ** 2 + np.sum((z0 - z1) ** 2, axis=-1)
    return _weighted_norm(sq, q, dt)


def _damp(old, new, rho: float):
    return old + rho * (new - old)


# ---------------------------------------------------------------------------
# Picard iteration


def initial_tilt(spec: ProblemSpec, M: int, N: int) -> TiltField:
    zero_y = path_array(M, N)
    zero_y[:] = 0.0
    zero_z = path_array(M, N, spec.d)
    zero_z[:] = 0.0
    ys, _ = spec.driver.grad(0.0, zero_y, zero_z)
    return TiltField(ys, zero_z, spec.driver.alpha)


def picard_solve(spec: ProblemSpec, M: int, N: int, seed: int, config: SolverConfig | None = None,
                 ensemble: PathEnsemble | None = None, terminal: TerminalFn | None = None,
                 init: tuple[np.ndarray, TiltField] | None = None, workers: int = 1,
                 probe_points: int = 1000) -> SaddleSolution:
    """Damped alternation of the two best responses until the optimality residual is small.

    Each iteration evaluates both residuals at the current pair, then updates
    the two players in the configured order.  Non-convergence is reported in
    the returned solution, not raised.
    """
    config = config or SolverConfig()
    ens = ensemble if ensemble is not None else make_ensemble(spec, M, N, seed, workers=workers)
    M, N = ens.M, ens.N
    rho = config.damping
    dt = ens.dt
    times = ens.times
    tracker = _CondTracker()
    if init is None:
        psi = path_array(M, N, spec.n)
        psi[:] = 0.0
        tilt = initial_tilt(spec, M, N)
    else:
        psi = path_array(M, N, spec.n)
        psi[...] = init[0] if np.ndim(init[0]) != 2 else np.asarray(init[0])[None]
        y0, z0 = init[1].arrays(M, N, spec.d)
        tilt = TiltField(time_major(np.array(y0)), time_major(np.array(z0)), spec.driver.alpha)

    cache = DesignCache()
    kw = dict(basis=config.basis, terminal=terminal, include_logq=config.include_logq, tracker=tracker,
              cache=cache)

    def sweep_nature():
        Y, Z = backward_nature(ens, spec, psi, tilt, **kw)
        return Y, Z, nature_update(spec.driver, Y, Z)

    def sweep_planner():
        P, K = backward_planner_normalized(ens, spec, tilt, **kw)
        return P, K, planner_best_response(spec, times, P, _kq(P, K, tilt))

    def update_tilt(target):
        nonlocal tilt
        ys0, zs0 = tilt.arrays(M, N, spec.d)
        tilt = TiltField(_damp(ys0, target.Ystar, rho), _damp(zs0, target.Zstar, rho), spec.driver.alpha)
        simulate_density(ens, spec, tilt)

    def update_psi(target):
        nonlocal psi
        psi = _damp(psi, target, rho)
        simulate_state(ens, spec, psi, scheme=config.scheme)

    simulate_state(ens, spec, psi, scheme=config.scheme)
    simulate_density(ens, spec, tilt)
    history: list[float] = []
    values: list[float] = []
    converged = False
    iterations = 0
    nature_first = config.order == "nature-first"
    for it in range(config.max_iters):
        iterations = it + 1
        # first player: residual at the current pair, then a damped step
        if nature_first:
            Y, Z, tilt_br = sweep_nature()
            r_first = nature_residual(tilt, tilt_br, ens.q, dt)
            update_tilt(tilt_br)
            P, K, psi_br = sweep_planner()
            r_second = planner_residual(spec, psi, psi_br, ens.q, dt)
        else:
            P, K, psi_br = sweep_planner()
            r_first = planner_residual(spec, psi, psi_br, ens.q, dt)
            update_psi(psi_br)
            Y, Z, tilt_br = sweep_nature()
            r_second = nature_residual(tilt, tilt_br, ens.q, dt)
        if not np.all(np.isfinite(psi_br)):
            raise SolverError(f"non-finite planner update at iteration {iterations}")
        history.append(r_first + r_second)
        if history[-1] <= config.tol_residual:
            # re-evaluate the first player at the (now fixed) pair
            if nature_first:
                Y, Z, tilt_br = sweep_nature()
                r_first = nature_residual(tilt, tilt_br, ens.q, dt)
            else:
                P, K, psi_br = sweep_planner()
                r_first = planner_residual(spec, psi, psi_br, ens.q, dt)
            if r_first + r_second <= config.tol_residual:
                converged = True
                break
        if config.stop_on_value:
            values.append(float(np.mean(Y[:, 0])))
            if len(values) > 1 and abs(values[-1] - values[-2]) <= config.tol_value:
                break
        if nature_first:
            update_psi(psi_br)
        else:
            update_tilt(tilt_br)

    if nature_first:
        r_nat, r_pl = r_first, r_second
    else:
        r_pl, r_nat = r_first, r_second
    if not converged:
        # make the stored backward processes consistent with the final controls
        Y, Z, tilt_br = sweep_nature()
        P, K, psi_br = sweep_planner()
        r_nat = nature_residual(tilt, tilt_br, ens.q, dt)
        r_pl = planner_residual(spec, psi, psi_br, ens.q, dt)
    controls = ControlFields(psi=psi, tilt=tilt, Y=Y, Z=Z, P=P, K=K, q=ens.q)
    costs = estimate_costs(ens, spec, psi, tilt, resimulate=False)
    sol = SaddleSolution(spec=spec, ensemble=ens, controls=controls, costs=costs,
                         residual_history=history, residual=r_nat + r_pl, planner_residual=r_pl,
                         nature_residual=r_nat, isaac_residual=float("nan"), iterations=iterations,
                         converged=converged, config=config, max_condition=tracker.worst)
    sol.isaac_residual = isaac_residual(spec, sol, probe_points)
    return sol


# ---------------------------------------------------------------------------
# diagnostics


def _hamiltonian_control_part(spec: ProblemSpec, t: float, x: np.ndarray, psi: np.ndarray, q: np.ndarray,
                              p: np.ndarray, kmat: np.ndarray) -> np.ndarray:
    """``q l(psi) + p . (a + b x + c psi) + Tr(k (nu + r sigma psi)')``."""
    co = spec.coefficients
    drift = co.a(t) + x @ co.b(t).T + psi @ co.c(t).T
    vol = co.volatility(t, psi)
    return q * spec.running.value(t, psi) + np.sum(p * drift, axis=-1) + np.sum(kmat * vol, axis=(-2, -1))


def isaac_details(spec: ProblemSpec, solution: SaddleSolution, n_points: int = 1000, seed: int = 0) -> dict:
    """Pointwise min-max / max-min comparison of the pre-Hamiltonian.

    ``upper = max_{y*,z*} H(., psi_hat)`` (closed form ``q f(Y,Z)`` plus the
    control part) and ``lower = min_psi H(Y*_hat, Z*_hat, .)`` (closed form via
    the quadratic running cost).  ``upper - lower >= 0`` always, with equality
    exactly at a pointwise saddle.
    """
    ens, cf = solution.ensemble, solution.controls
    M, N, d = ens.M, ens.N, ens.d
    rng = np.random.default_rng(seed)
    paths = rng.integers(0, M, n_points)
    steps = rng.integers(0, N, n_points)
    ys, zs = cf.tilt.arrays(M, N, d)
    p_all = cf.P[paths, steps] * cf.q[paths, steps, None]
    k_all = cf.q[paths, steps, None, None] * (cf.K[paths, steps] + cf.P[paths, steps, :, None] * zs[paths, steps, None, :])
    gaps = np.empty(n_points)
    upper_all = np.empty(n_points)
    lower_all = np.empty(n_points)
    co = spec.coefficients
    times = ens.times
    for j in range(n_points):
        i, k = paths[j], steps[j]
        t = times[k]
        q = cf.q[i, k]
        x = ens.X[i, k][None]
        p = p_all[j][None]
        km = k_all[j][None]
        y, z = cf.Y[i, k], cf.Z[i, k]
        psi_hat = cf.psi[i, k][None]
        ctrl_hat = _hamiltonian_control_part(spec, t, x, psi_hat, q, p, km)[0]
        upper = q * float(spec.driver.value(t, y, z)) + ctrl_hat
        w = p[0] @ co.c(t)
        if co.r == 1:
            w = w + _trace_sigma(spec, t, km)[0]
        psi_min = spec.running.minimizer(w / q)[None]
        ctrl_min = _hamiltonian_control_part(spec, t, x, psi_min, q, p, km)[0]
        fstar = fenchel_dual(spec.driver, t, ys[i, k], zs[i, k])
        lower = q * (y * ys[i, k] + float(z @ zs[i, k]) - fstar) + ctrl_min
        upper_all[j], lower_all[j] = upper, lower
        gaps[j] = upper - lower
    return {"max_gap": float(np.max(np.abs(gaps))), "min_gap": float(np.min(gaps)),
            "mean_gap": float(np.mean(gaps)), "upper": upper_all, "lower": lower_all,
            "paths": paths, "steps": steps}


def isaac_residual(spec: ProblemSpec, solution: SaddleSolution, probe_grid: int | Sequence = 1000) -> float:
    """Max pointwise gap between the two orderings of the pre-Hamiltonian optimisation."""
    n_points = probe_grid if isinstance(probe_grid, int) else len(probe_grid)
    return isaac_details(spec, solution, n_points)["max_gap"]


@dataclass
class ProbeResult:
    kind: str
    index: int
    magnitude: float
    delta: float
    std_error: float
    violation: bool

    def to_dict(self) -> dict:
        return dict(kind=self.kind, index=self.index, magnitude=self.magnitude, delta=self.delta,
                    std_error=self.std_error, violation=self.violation)


@dataclass
class ProbeReport:
    base_J: float
    results: list[ProbeResult]

    @property
    def violations(self) -> list[ProbeResult]:
        return [r for r in self.results if r.violation]

    def to_dict(self) -> dict:
        return {"base_J": self.base_J, "n_violations": len(self.violations),
                "results": [r.to_dict() for r in self.results]}


def random_perturbations(times: np.ndarray, n: int, d: int, n_control: int = 10, n_tilt: int = 10,
                         magnitude: float = 0.1, seed: int = 0, smoothed: bool = False) -> list[tuple[str, Any]]:
    """Deterministic-in-time perturbations with sup norm ``magnitude``.

    Each is ``magnitude * u * cos(2 pi f t + phase)`` for a random unit vector
    ``u``, integer frequency ``f`` in {0, 1, 2} and random phase.
    """
    rng = np.random.default_rng(seed)
    left = np.asarray(times)[:-1]
    out: list[tuple[str, Any]] = []

    def profile(dim):
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        f = rng.integers(0, 3)
        phase = rng.uniform(0, 2 * np.pi)
        horizon = times[-1]
        return magnitude * np.cos(2 * np.pi * f * left / horizon + phase)[:, None] * u[None, :]

    for _ in range(n_control):
        out.append(("control", profile(n)[None]))
    for _ in range(n_tilt):
        dz = profile(d)[None]
        dy = profile(1)[None, :, 0] if smoothed else 0.0
        out.append(("tilt", (dy, dz)))
    return out


def saddle_probe(spec: ProblemSpec, ensemble: PathEnsemble, solution: SaddleSolution,
                 perturbations: Sequence[tuple[str, Any]] | None = None, n_sigma: float = 3.0,
                 **kwargs) -> ProbeReport:
    """Check the two saddle inequalities along perturbed controls and tilts (paired estimates)."""
    cf = solution.controls
    if perturbations is None:
        perturbations = random_perturbations(ensemble.times, spec.n, spec.d, smoothed=spec.driver.smoothed,
                                             **kwargs)
    base = estimate_costs(ensemble, spec, cf.psi, cf.tilt)
    results = []
    counts = {"control": 0, "tilt": 0}
    for kind, delta in perturbations:
        if kind == "control":
            d_arr = np.asarray(delta, dtype=float)
            est = estimate_costs(ensemble, spec, cf.psi + d_arr, cf.tilt)
            mag = float(np.max(np.abs(d_arr))) if d_arr.size else 0.0
        elif kind == "tilt":
            dy, dz = delta
            est = estimate_costs(ensemble, spec, cf.psi, cf.tilt.perturbed(dy, dz))
            mag = float(max(np.max(np.abs(dy)), np.max(np.abs(dz))))
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
        diff = est.J_paths - base.J_paths
        mean = float(np.mean(diff))
        se = float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
        bad = mean < -n_sigma * se if kind == "control" else mean > n_sigma * se
        results.append(ProbeResult(kind, counts[kind], mag, mean, se, bool(bad)))
        counts[kind] += 1
    # leave the ensemble holding the solution paths again
    estimate_costs(ensemble, spec, cf.psi, cf.tilt)
    return ProbeReport(base.J.value, results)


def conjugacy_gap(spec: ProblemSpec, solution: SaddleSolution) -> float:
    """Max Fenchel gap between ``(Y, Z)`` and ``grad f(Y, Z)`` over all (path, step)."""
    cf = solution.controls
    N = cf.Z.shape[1]
    tgt = nature_update(spec.driver, cf.Y, cf.Z)
    ys, zs = tgt.arrays(cf.Z.shape[0], N, cf.Z.shape[2])
    worst = 0.0
    for k, t in enumerate(solution.ensemble.times[:-1]):
        g = fenchel_gap(spec.driver, t, cf.Y[:, k], cf.Z[:, k], ys[:, k], zs[:, k])
        worst = max(worst, float(np.max(np.abs(g))))
    return worst


# ---------------------------------------------------------------------------
# dumps


def solution_columns(n: int, d: int) -> list[str]:
    extra = ["Y"] + [f"Z_{j + 1}" for j in range(d)] + [f"p_{i + 1}" for i in range(n)]
    extra += [f"k_{i + 1}_{j + 1}" for i in range(n) for j in range(d)]
    return trajectory_columns(n, d, extra)


def write_solution_csv(path, solution: SaddleSolution, paths: Sequence[int] | None = None) -> Path:
    ens, cf = solution.ensemble, solution.controls
    n, d = solution.spec.n, solution.spec.d
    extra = {"Y": cf.Y}
    for j in range(d):
        extra[f"Z_{j + 1}"] = cf.Z[:, :, j]
    p = cf.p
    for i in range(n):
        extra[f"p_{i + 1}"] = p[:, :, i]
    kk = cf.k
    for i in range(n):
        for j in range(d):
            extra[f"k_{i + 1}_{j + 1}"] = kk[:, :, i, j]
    if paths is None:
        paths = range(min(ens.M, 100))
    return write_trajectory_csv(path, ens, cf.tilt, paths=paths, extra=extra)


def write_report(path, report: dict) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    return out
