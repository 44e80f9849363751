"""Seeded Monte Carlo engine for the state, Nature's density and cost estimators."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .duality import entropy_h, fenchel_dual
from .model import ProblemSpec


class SimulationError(RuntimeError):
    """Non-finite inputs met while simulating."""


class CapacityError(MemoryError):
    """Requested ensemble exceeds the configured memory budget."""


class InadmissibleTiltError(ValueError):
    """A tilt takes the conjugate driver to +inf somewhere."""

    def __init__(self, path: int, step: int, message: str = ""):
        self.path, self.step = int(path), int(step)
        super().__init__(message or f"conjugate driver is +inf at path {path}, step {step}")


DEFAULT_MAX_ELEMENTS = 60_000_000


def path_array(M: int, steps: int, *rest: int) -> np.ndarray:
    """Uninitialised array of shape (M, steps, *rest) stored time-major.

    Per-step slices ``a[:, k]`` are then contiguous, which is what the
    forward and backward sweeps touch.
    """
    return np.empty((steps, M) + tuple(rest)).swapaxes(0, 1)


def time_major(a) -> np.ndarray:
    """``a`` itself if already stored like :func:`path_array`, else a time-major copy."""
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.swapaxes(0, 1).flags.c_contiguous:
        return a
    out = path_array(*a.shape)
    out[...] = a
    return out


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class PathEnsemble:
    """Brownian increments plus the state and density paths simulated on them."""

    M: int
    N: int
    d: int
    n: int
    T: float
    seed: int
    dW: np.ndarray
    X: np.ndarray | None = None
    logq: np.ndarray | None = None
    q: np.ndarray | None = None
    psi: np.ndarray | None = None
    scheme: str | None = None
    workers: int = 1

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def stream_ids(self) -> np.ndarray:
        """Counter-stream index of each path."""
        return np.arange(self.M) // STREAM_BLOCK

    @property
    def W(self) -> np.ndarray:
        """Brownian paths, shape (M, N+1, d)."""
        out = np.zeros((self.M, self.N + 1, self.d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def ensure_density(self) -> None:
        if self.q is None:
            self.logq = path_array(self.M, self.N + 1)
            self.logq[:] = 0.0
            self.q = np.exp(self.logq)


STREAM_BLOCK = 1024


def _block_stream(seed: int, block: int) -> np.random.Generator:
    # the top counter word carries the block index, so streams never overlap
    return np.random.Generator(np.random.Philox(key=int(seed) % (1 << 64), counter=[0, 0, 0, int(block)]))


def _fill_blocks(out: np.ndarray, seed: int, first: int, last: int, scale: float) -> None:
    M = out.shape[0]
    per_path = out.shape[1] * out.shape[2]
    for b in range(first, last):
        lo = b * STREAM_BLOCK
        hi = min(M, lo + STREAM_BLOCK)
        draws = _block_stream(seed, b).standard_normal((STREAM_BLOCK, per_path))[: hi - lo]
        out[lo:hi] = draws.reshape((hi - lo,) + out.shape[1:]) * scale


def make_ensemble(spec: ProblemSpec, M: int, N: int, seed: int, workers: int = 1,
                  max_elements: int = DEFAULT_MAX_ELEMENTS) -> PathEnsemble:
    """Gaussian increments from counter-based streams, one per block of paths.

    Path ``i`` depends only on ``(seed, i)`` (and on ``N``, ``d``): ensembles
    of different sizes share their leading paths, and any partition of the
    blocks across workers yields the same array.
    """
    if M < 1 or N < 1:
        raise ValueError("M and N must be at least 1")
    d, n = spec.d, spec.n
    if M * (N + 1) * max(d, n) > max_elements:
        raise CapacityError(f"ensemble of {M}x{N}x{max(d, n)} exceeds the budget of {max_elements} elements")
    dW = path_array(M, N, d)
    scale = math.sqrt(spec.T / N)
    workers = max(1, int(workers))
    n_blocks = -(-M // STREAM_BLOCK)
    if workers == 1:
        _fill_blocks(dW, seed, 0, n_blocks, scale)
    else:
        bounds = np.linspace(0, n_blocks, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fill_blocks, dW, seed, lo, hi, scale) for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futures:
                f.result()
    return PathEnsemble(M=M, N=N, d=d, n=n, T=spec.T, seed=int(seed), dW=dW, workers=workers)


# ---------------------------------------------------------------------------
# fields


ControlLike = Any


def control_at(psi: ControlLike, k: int, t: float, X_k: np.ndarray) -> np.ndarray:
    """Evaluate a control description at step ``k`` for all paths; returns (M, n)."""
    M, n = X_k.shape
    if callable(psi):
        val = np.asarray(psi(t, X_k), dtype=float)
    else:
        arr = np.asarray(psi, dtype=float)
        if arr.ndim == 3:
            val = arr[:, k]
        elif arr.ndim == 2:
            val = arr[k]
        else:
            val = arr
    return np.broadcast_to(val, (M, n))


@dataclass
class TiltField:
    """Nature's tilt ``(Y*, Z*)`` on the time grid.

    Arrays broadcast against (M, N) and (M, N, d); constants are allowed.
    ``Y*`` is clipped to ``[-alpha, alpha]`` at construction.
    """

    Ystar: Any
    Zstar: Any
    alpha: float = math.inf

    def __post_init__(self):
        y = np.asarray(self.Ystar, dtype=float)
        if math.isfinite(self.alpha):
            y = np.clip(y, -self.alpha, self.alpha)
        self.Ystar = y
        self.Zstar = np.asarray(self.Zstar, dtype=float)

    @classmethod
    def null(cls, d: int = 1) -> "TiltField":
        return cls(0.0, np.zeros(d))

    @classmethod
    def constant(cls, ystar: float, zstar, alpha: float = math.inf) -> "TiltField":
        return cls(float(ystar), np.atleast_1d(np.asarray(zstar, dtype=float)), alpha)

    @classmethod
    def from_profile(cls, times: np.ndarray, ystar: Callable[[float], float],
                     zstar: Callable[[float], Any], alpha: float = math.inf) -> "TiltField":
        """Deterministic time profiles evaluated on the left grid points."""
        left = np.asarray(times)[:-1]
        ys = np.array([ystar(t) for t in left], dtype=float)
        zs = np.array([np.atleast_1d(zstar(t)) for t in left], dtype=float)
        return cls(ys[None, :], zs[None, :, :], alpha)

    def arrays(self, M: int, N: int, d: int) -> tuple[np.ndarray, np.ndarray]:
        y = self.Ystar
        z = self.Zstar
        if z.ndim == 1:
            z = z.reshape(1, 1, -1)
        if y.ndim == 1 and y.size == N:
            y = y.reshape(1, N)
        return np.broadcast_to(y, (M, N)), np.broadcast_to(z, (M, N, d))

    def perturbed(self, dy=0.0, dz=0.0, alpha: float | None = None) -> "TiltField":
        a = self.alpha if alpha is None else alpha
        return TiltField(self.Ystar + dy, self.Zstar + dz, a)


# ---------------------------------------------------------------------------
# forward simulation


def _propagators(spec: ProblemSpec, times: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Resolvent and inverse at every grid node (left-point product integral)."""
    b = spec.coefficients.b
    n = spec.n
    if b.is_constant:
        mat = b(0.0)
        if not np.any(mat):
            eye = np.eye(n)
            return [eye] * len(times), [eye] * len(times)
        return [expm(t * mat) for t in times], [expm(-t * mat) for t in times]
    gam, inv = [np.eye(n)], [np.eye(n)]
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        bk = b(times[k])
        gam.append(expm(h * bk) @ gam[-1])
        inv.append(inv[-1] @ expm(-h * bk))
    return gam, inv


def simulate_state(ensemble: PathEnsemble, spec: ProblemSpec, psi: ControlLike,
                   scheme: str = "resolvent") -> np.ndarray:
    """Simulate ``X`` under the control ``psi`` and store it (and the realised control)."""
    if scheme not in ("resolvent", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    co = spec.coefficients
    M, N, n = ensemble.M, ensemble.N, spec.n
    dt = ensemble.dt
    times = ensemble.times
    X = path_array(M, N + 1, n)
    X[:, 0] = spec.x0
    used = path_array(M, N, n)
    if scheme == "resolvent":
        gam, inv = _propagators(spec, times)
        U = np.broadcast_to(spec.x0, (M, n)).copy()
        identity = co.b.is_constant and not np.any(co.b(0.0))
    scalar = n == 1 and ensemble.d == 1
    for k in range(N):
        t = times[k]
        psi_k = control_at(psi, k, t, X[:, k])
        if not np.isfinite(psi_k.sum()):
            bad = np.argwhere(~np.isfinite(psi_k))
            if bad.size:
                raise SimulationError(f"non-finite control at path {bad[0][0]}, step {k}")
        used[:, k] = psi_k
        dW_k = ensemble.dW[:, k]
        if scalar:
            a, c, nu = co.a(t)[0], co.c(t)[0, 0], co.nu(t)[0, 0]
            incr = (c * dt) * psi_k
            if a:
                incr += a * dt
            if nu:
                incr += nu * dW_k
            if co.r == 1:
                incr += co.sigma(t)[0, 0, 0] * psi_k * dW_k
        else:
            incr = (co.a(t) + psi_k @ co.c(t).T) * dt
            incr += dW_k @ co.nu(t).T
            if co.r == 1:
                incr += np.einsum("ijk,mk,mj->mi", co.sigma(t), psi_k, dW_k)
        if scheme == "euler":
            X[:, k + 1] = X[:, k] + X[:, k] @ co.b(t).T * dt + incr
        elif identity:
            U += incr
            X[:, k + 1] = U
        else:
            U += incr @ inv[k].T
            X[:, k + 1] = U @ gam[k + 1].T
    ensemble.X = X
    ensemble.psi = used
    ensemble.scheme = scheme
    return X


def density_paths(ensemble: PathEnsemble, tilt: TiltField) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain density ``logq`` and ``q`` under ``tilt`` without touching the ensemble."""
    M, N, d = ensemble.M, ensemble.N, ensemble.d
    ys, zs = tilt.arrays(M, N, d)
    if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(zs))):
        raise SimulationError("non-finite tilt values")
    if d == 1:
        z1 = zs[:, :, 0]
        incr = (ys - 0.5 * z1 * z1) * ensemble.dt + z1 * ensemble.dW[:, :, 0]
    else:
        incr = (ys - 0.5 * np.sum(zs * zs, axis=-1)) * ensemble.dt + np.sum(zs * ensemble.dW, axis=-1)
    logq = path_array(M, N + 1)
    logq[:, 0] = 0.0
    np.cumsum(incr, axis=1, out=logq[:, 1:])
    return logq, np.exp(logq)


def simulate_density(ensemble: PathEnsemble, spec: ProblemSpec | None, tilt: TiltField) -> np.ndarray:
    """``logq_{k+1} = logq_k + (Y* - |Z*|^2/2) dt + Z* . dW_k`` and ``q = exp(logq)``."""
    logq, q = density_paths(ensemble, tilt)
    ensemble.logq, ensemble.q = logq, q
    return q


def girsanov_shift(ensemble: PathEnsemble, tilt: TiltField) -> np.ndarray:
    """Increments of the tilted Brownian motion ``dW - Z* dt``."""
    _, zs = tilt.arrays(ensemble.M, ensemble.N, ensemble.d)
    return ensemble.dW - zs * ensemble.dt


def shifted_ensemble(ensemble: PathEnsemble, tilt: TiltField) -> PathEnsemble:
    """Copy of ``ensemble`` driven by ``dW + Z* dt`` (paths distributed as under the tilt)."""
    _, zs = tilt.arrays(ensemble.M, ensemble.N, ensemble.d)
    return PathEnsemble(M=ensemble.M, N=ensemble.N, d=ensemble.d, n=ensemble.n, T=ensemble.T,
                        seed=ensemble.seed, dW=ensemble.dW + zs * ensemble.dt)


# ---------------------------------------------------------------------------
# estimators


@dataclass
class Estimate:
    value: float
    std_error: float

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error}


def mean_and_se(samples: np.ndarray) -> Estimate:
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        return Estimate(float(s.mean()), float("nan"))
    return Estimate(float(np.mean(s)), float(np.std(s, ddof=1) / math.sqrt(s.size)))


@dataclass
class CostEstimate:
    """Monte Carlo estimates of ``R``, ``S`` and ``J = R - S`` with per-path contributions."""

    R: Estimate
    S: Estimate
    J: Estimate
    R_paths: np.ndarray = field(repr=False)
    S_paths: np.ndarray = field(repr=False)
    J_paths: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"R": self.R.to_dict(), "S": self.S.to_dict(), "J": self.J.to_dict()}


def running_cost_paths(spec: ProblemSpec, ensemble: PathEnsemble, psi: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-path left-point sums of ``q l(t, psi) dt``."""
    out = np.zeros(ensemble.M)
    for k, t in enumerate(ensemble.times[:-1]):
        out += q[:, k] * spec.running.value(t, psi[:, k])
    return out * ensemble.dt


def entropy_paths(spec: ProblemSpec, ensemble: PathEnsemble, tilt: TiltField, q: np.ndarray) -> np.ndarray:
    """Per-path left-point sums of ``q f*(Y*, Z*) dt``; raises on infinite conjugates."""
    ys, zs = tilt.arrays(ensemble.M, ensemble.N, ensemble.d)
    out = np.zeros(ensemble.M)
    for k, t in enumerate(ensemble.times[:-1]):
        fs = np.broadcast_to(fenchel_dual(spec.driver, t, ys[:, k], zs[:, k]), (ensemble.M,))
        if not np.all(np.isfinite(fs)):
            raise InadmissibleTiltError(int(np.flatnonzero(~np.isfinite(fs))[0]), k)
        out += q[:, k] * fs
    return out * ensemble.dt


def terminal_paths(spec: ProblemSpec, X_T: np.ndarray, q_T: np.ndarray) -> np.ndarray:
    """Per-path terminal contributions whose mean is the terminal cost.

    For a measure functional, ``G(mu)`` plus the centred first-order influence
    ``q_T dG/dmu(mu, X_T)`` so that the spread gives a delta-method error bar.
    """
    tc = spec.terminal
    if tc.variant == "linear":
        return q_T * tc.g(X_T)
    from .meanfield import WeightedMeasure
    mu = WeightedMeasure(X_T, q_T / q_T.size)
    infl = q_T * tc.functional.flat(mu, X_T)
    return tc.functional.evaluate(mu) + infl - infl.mean()


def estimate_costs(ensemble: PathEnsemble, spec: ProblemSpec, psi: ControlLike, tilt: TiltField,
                   resimulate: bool = True, scheme: str = "resolvent") -> CostEstimate:
    """Estimate ``R``, ``S`` and ``J`` under control ``psi`` and tilt ``tilt``.

    With ``resimulate`` (default) the state and density are first simulated on
    the ensemble; otherwise the stored paths are used as they are.
    """
    if resimulate or ensemble.X is None:
        simulate_state(ensemble, spec, psi, scheme=scheme)
        simulate_density(ensemble, spec, tilt)
    ensemble.ensure_density()
    q = ensemble.q
    S_i = entropy_paths(spec, ensemble, tilt, q)
    R_i = terminal_paths(spec, ensemble.X[:, -1], q[:, -1]) + running_cost_paths(spec, ensemble, ensemble.psi, q)
    J_i = R_i - S_i
    return CostEstimate(mean_and_se(R_i), mean_and_se(S_i), mean_and_se(J_i), R_i, S_i, J_i)


def entropy_identity_check(ensemble: PathEnsemble, zstar) -> dict:
    """Compare ``E int q |Z*|^2 / 2 dt`` with ``E[h(q_T) + 1]`` for a constant tilt ``Z*``."""
    z = np.atleast_1d(np.asarray(zstar, dtype=float))
    if z.size != ensemble.d:
        z = np.broadcast_to(z, (ensemble.d,))
    _, q = density_paths(ensemble, TiltField.constant(0.0, z))
    lhs_i = 0.5 * float(z @ z) * np.sum(q[:, :-1], axis=1) * ensemble.dt
    rhs_i = entropy_h(q[:, -1]) + 1.0
    lhs, rhs = mean_and_se(lhs_i), mean_and_se(rhs_i)
    diff = mean_and_se(lhs_i - rhs_i)
    return {"lhs": lhs.value, "rhs": rhs.value, "diff": lhs.value - rhs.value,
            "se_lhs": lhs.std_error, "se_rhs": rhs.std_error, "se_diff": diff.std_error,
            "se_pooled": math.hypot(lhs.std_error, rhs.std_error),
            "mean_h_qT": rhs.value - 1.0}


def doleans_mean(ensemble: PathEnsemble, zstar) -> Estimate:
    """Sample mean of the exponential martingale ``E_T`` for a constant ``Z*``."""
    _, q = density_paths(ensemble, TiltField.constant(0.0, zstar))
    return mean_and_se(q[:, -1])


def mass_bound_holds(q_T: np.ndarray, alpha: float, T: float) -> bool:
    """``E[q_T] <= e^{alpha T} (1 + 3 SE / mean)``."""
    est = mean_and_se(q_T)
    return est.value <= math.exp(alpha * T) * (1.0 + 3.0 * est.std_error / est.value)


@dataclass
class SStarBound:
    value: float
    brackets: list[float]
    entropies: list[float]
    weighted_norms: list[float]

    def duality_holds(self, gamma: float, slack: float = 0.0) -> list[bool]:
        """``S(q_j) + value / gamma >= E int q_j |psi|^2 / gamma`` for each tilt."""
        return [s + self.value / gamma + slack >= w / gamma
                for s, w in zip(self.entropies, self.weighted_norms)]


def sstar_lower_bound(ensemble: PathEnsemble, spec: ProblemSpec, psi: ControlLike,
                      tilt_family: Sequence[TiltField] = ()) -> SStarBound:
    """Max over a finite tilt family (null tilt included) of ``E int q|psi|^2 - gamma S(q)``."""
    gamma = spec.gamma
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    simulate_state(ensemble, spec, psi)
    sq = np.sum(ensemble.psi ** 2, axis=-1)
    brackets, entropies, norms = [], [], []
    for tilt in [TiltField.null(ensemble.d), *tilt_family]:
        _, q = density_paths(ensemble, tilt)
        weighted = float(np.mean(np.sum(q[:, :-1] * sq, axis=1)) * ensemble.dt)
        try:
            ent = float(np.mean(entropy_paths(spec, ensemble, tilt, q)))
        except InadmissibleTiltError:
            ent = math.inf
        norms.append(weighted)
        entropies.append(ent)
        brackets.append(weighted - gamma * ent)
    return SStarBound(float(max(brackets)), brackets, entropies, norms)


# ---------------------------------------------------------------------------
# dumps


def trajectory_columns(n: int, d: int, extra: Sequence[str] = ()) -> list[str]:
    cols = ["path", "step", "t"] + [f"X_{i + 1}" for i in range(n)] + ["q"]
    cols += [f"psi_{i + 1}" for i in range(n)] + ["Ystar"] + [f"Zstar_{j + 1}" for j in range(d)]
    return cols + list(extra)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(path, ensemble: PathEnsemble, tilt: TiltField, paths: Sequence[int] | None = None,
                         extra: dict[str, np.ndarray] | None = None) -> Path:
    """Write one row per (path, step).  Step N carries ``nan`` for step-indexed fields.

    ``extra`` maps column names to arrays of shape (M, N) or (M, N+1).
    """
    M, N, n, d = ensemble.M, ensemble.N, ensemble.n, ensemble.d
    if ensemble.X is None:
        raise SimulationError("state has not been simulated")
    ensemble.ensure_density()
    ys, zs = tilt.arrays(M, N, d)
    extra = extra or {}
    cols = trajectory_columns(n, d, list(extra))
    idx = range(M) if paths is None else paths
    times = ensemble.times
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in idx:
            for k in range(N + 1):
                inner = k < N
                row = [str(i), str(k), _fmt(times[k])]
                row += [_fmt(v) for v in ensemble.X[i, k]]
                row.append(_fmt(ensemble.q[i, k]))
                row += [_fmt(v) for v in (ensemble.psi[i, k] if inner else np.full(n, np.nan))]
                row.append(_fmt(ys[i, k] if inner else np.nan))
                row += [_fmt(v) for v in (zs[i, k] if inner else np.full(d, np.nan))]
                for arr in extra.values():
                    row.append(_fmt(arr[i, k] if k < arr.shape[1] else np.nan))
                w.writerow(row)
    return out


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Parse a trajectory dump back into column arrays."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    data = {}
    for j, name in enumerate(header):
        col = [r[j] for r in rows]
        data[name] = np.array(col, dtype=int) if name in ("path", "step") else np.array(col, dtype=float)
    return data


def write_estimate_report(path, estimator: str, estimate: Estimate, M: int, N: int, seed: int) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"estimator": estimator, "value": estimate.value,
                               "std_error": estimate.std_error, "M": M, "N": N, "seed": seed},
                              indent=2, sort_keys=False) + "\n")
    return out
