"""Command-line entry point: ``robustsmp {solve,mfg,compare,check,emit-plots}``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import checks, scenarios
from .fbsde import (RegressionBasis, SaddleSolution, SolverConfig, SolverError, picard_solve, saddle_probe,
                    random_perturbations, write_solution_csv)
from .meanfield import MeasureError, d_p, mfc_solve, mfg_solve, write_measure_csv
from .model import ConfigError, ModelError, ProblemSpec, spec_from_config, validate_assumptions
from .simulate import SimulationError, mass_bound_holds

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
OUTPUT_ENV = "ROBUSTSMP_OUTPUT_DIR"
DEFAULT_OUTPUT = "robustsmp-out"
MEANFIELD_SCENARIOS = ("mfc-quadratic", "mfg-potential")
SCENARIO_IDS = ("portfolio", "gibbs-linear", "systemic-risk", "mfc-quadratic", "mfg-potential", "custom")
CHECK_SELECTORS = ("duality", "simulate", "meanfield", "fbsde", "entropy-identity", "donsker-varadhan", "all")

# scenario parameter flag -> (keyword, scenarios that accept it)
SCENARIO_PARAMS = {
    "beta": ("beta", ("gibbs-linear",)),
    "T": ("T", ("portfolio", "gibbs-linear", "systemic-risk", "mfc-quadratic", "mfg-potential")),
    "Nagents": ("n_agents", ("systemic-risk",)),
    "c": ("c", ("portfolio", "systemic-risk")),
    "sigma": ("sigma", ("portfolio", "systemic-risk")),
    "lam": ("lam", ("portfolio", "systemic-risk", "mfc-quadratic", "mfg-potential")),
    "x0": ("x0", ("portfolio", "systemic-risk", "mfc-quadratic", "mfg-potential")),
    "nu": ("nu", ("mfc-quadratic", "mfg-potential")),
}

RUN_DEFAULTS = {"M": 20_000, "N": 100, "seed": 0, "workers": 1, "dump_paths": 100, "probes": 0,
                "probe_magnitude": 0.1}
SOLVER_KEYS = {"damping", "max_iters", "tol_residual", "tol_value", "basis_degree", "basis_family", "order",
               "scheme", "include_logq"}
MFG_DEFAULTS = {"outer_damping": 0.5, "tol_measure": 1e-2, "max_outer": 40, "resolution": 1e-2}
CONFIG_KEYS = {"scenario", "params", "spec", "run", "solver", "mfg", "compare"}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    scenario: str
    params: dict
    spec_cfg: dict | None
    run: dict
    solver: SolverConfig
    mfg: dict
    out: Path
    tolerances: dict = field(default_factory=dict)


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: the top level must be an object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; expected a subset of {sorted(CONFIG_KEYS)}")
    for key in CONFIG_KEYS - {"scenario"}:
        if key in cfg and not isinstance(cfg[key], dict):
            raise ConfigError(f"{path}: key {key!r} must be an object")
    return cfg


def _section(cfg: Mapping, name: str, allowed: set[str]) -> dict:
    sec = dict(cfg.get(name, {}))
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown key(s) {unknown}")
    return sec


def _pick(args: argparse.Namespace, key: str, section: Mapping, default: Any) -> Any:
    value = getattr(args, key, None)
    if value is not None:
        return value
    return section.get(key, default)


def output_dir(flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def build_run_config(args: argparse.Namespace, scenario: str) -> RunConfig:
    cfg = read_config(getattr(args, "config", None))
    if cfg.get("scenario") not in (None, scenario) and scenario != "custom":
        raise ConfigError(f"config is for scenario {cfg['scenario']!r}, command asked for {scenario!r}")
    run_sec = _section(cfg, "run", set(RUN_DEFAULTS))
    run = {k: _pick(args, k, run_sec, v) for k, v in RUN_DEFAULTS.items()}
    for key in ("M", "N"):
        if int(run[key]) < 1:
            raise ConfigError(f"{key} must be at least 1, got {run[key]}")
        run[key] = int(run[key])
    if int(run["workers"]) < 1:
        raise ConfigError("workers must be at least 1")

    solver_sec = _section(cfg, "solver", SOLVER_KEYS)
    base = SolverConfig()
    try:
        basis = RegressionBasis(family=_pick(args, "basis_family", solver_sec, base.basis.family),
                                degree=int(_pick(args, "basis_degree", solver_sec, base.basis.degree)))
        solver = SolverConfig(damping=float(_pick(args, "damping", solver_sec, base.damping)),
                              max_iters=int(_pick(args, "max_iters", solver_sec, base.max_iters)),
                              tol_residual=float(_pick(args, "tol_residual", solver_sec, base.tol_residual)),
                              tol_value=float(_pick(args, "tol_value", solver_sec, base.tol_value)),
                              basis=basis, order=_pick(args, "order", solver_sec, base.order),
                              scheme=_pick(args, "scheme", solver_sec, base.scheme),
                              include_logq=bool(_pick(args, "include_logq", solver_sec, base.include_logq)))
    except ValueError as exc:
        raise ConfigError(f"solver settings: {exc}") from exc

    mfg_sec = _section(cfg, "mfg", set(MFG_DEFAULTS))
    mfg = {k: _pick(args, k, mfg_sec, v) for k, v in MFG_DEFAULTS.items()}
    tol_sec = _section(cfg, "compare", {"tol_d1", "tol_control"})
    tolerances = {"tol_d1": _pick(args, "tol_d1", tol_sec, 0.05),
                  "tol_control": _pick(args, "tol_control", tol_sec, 0.02)}

    params_sec = _section(cfg, "params", {kw for kw, _ in SCENARIO_PARAMS.values()})
    params = dict(params_sec)
    for flag, (kw, allowed) in SCENARIO_PARAMS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if scenario not in allowed:
            raise ConfigError(f"--{flag} does not apply to scenario {scenario!r}")
        params[kw] = value
    spec_cfg = cfg.get("spec")
    if scenario == "custom" and spec_cfg is None:
        raise ConfigError("scenario 'custom' needs --config with a 'spec' section")
    return RunConfig(scenario, params, spec_cfg, run, solver, mfg, output_dir(args.out), tolerances)


def build_spec(rc: RunConfig) -> ProblemSpec:
    if rc.scenario == "custom":
        return spec_from_config(rc.spec_cfg)
    factory = scenarios.SCENARIOS[rc.scenario]
    try:
        spec = factory(**rc.params)
    except TypeError as exc:
        raise ConfigError(f"parameters {sorted(rc.params)} do not fit scenario {rc.scenario!r}: {exc}") from exc
    return spec.replace(name=rc.scenario) if spec.name != rc.scenario else spec


# ---------------------------------------------------------------------------
# reports and plot data


def clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats spelled out."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dump_json(obj: Any) -> str:
    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj))
    return path


PLOT_STATS = ("mean", "q05", "q50", "q95")


def plot_columns(n: int) -> list[str]:
    series = [f"X_{i + 1}" for i in range(n)] + ["q"] + [f"psi_{i + 1}" for i in range(n)] + ["Y"]
    return ["t"] + [f"{s}_{stat}" for s in series for stat in PLOT_STATS]


def _stats(values: np.ndarray) -> np.ndarray:
    """Mean and 5/50/95% quantiles over paths, per time step; ``values`` is (M, steps)."""
    qs = np.quantile(values, [0.05, 0.5, 0.95], axis=0)
    return np.vstack([values.mean(axis=0), qs]).T


def plot_table(solution: SaddleSolution) -> np.ndarray:
    ens, cf = solution.ensemble, solution.controls
    n, N = solution.spec.n, ens.N
    blocks = [ens.times[:, None]]
    for i in range(n):
        blocks.append(_stats(ens.X[:, :, i]))
    blocks.append(_stats(cf.q))
    for i in range(n):
        psi = np.full((N + 1, len(PLOT_STATS)), np.nan)
        psi[:N] = _stats(cf.psi[:, :, i])
        blocks.append(psi)
    Y = cf.Y
    if Y.shape[1] == N + 1:
        blocks.append(_stats(Y))
    else:
        y = np.full((N + 1, len(PLOT_STATS)), np.nan)
        y[:Y.shape[1]] = _stats(Y)
        blocks.append(y)
    return np.hstack(blocks)


def write_plot_csv(path: Path, solution: SaddleSolution) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(plot_columns(solution.spec.n))
        for row in plot_table(solution):
            writer.writerow([repr(float(v)) for v in row])
    return path


def read_plot_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    n = (len(header) - 1 - 2 * len(PLOT_STATS)) // (2 * len(PLOT_STATS))
    if header != plot_columns(n):
        raise ValueError(f"unexpected plot-data header {header}")
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def _probe_block(rc: RunConfig, solution: SaddleSolution) -> dict | None:
    count = int(rc.run["probes"])
    if count <= 0:
        return None
    spec = solution.spec
    perts = random_perturbations(solution.ensemble.times, spec.n, spec.d, n_control=count, n_tilt=count,
                                 magnitude=float(rc.run["probe_magnitude"]), seed=rc.run["seed"],
                                 smoothed=spec.driver.smoothed)
    return saddle_probe(spec, solution.ensemble, solution, perts).to_dict()


def _oracle_block(rc: RunConfig, spec: ProblemSpec, solution: SaddleSolution) -> dict | None:
    profile = solution.control_profile()
    if rc.scenario == "gibbs-linear":
        beta = float(rc.params.get("beta", 0.5))
        exact = scenarios.gibbs_normalizer(beta, spec.T)
        est = scenarios.gibbs_normalizer_estimate(solution, beta)
        return {"psi": -beta, "control_sup_gap": float(np.max(np.abs(profile + beta))),
                "normalizer": {"estimate": est.value, "std_error": est.std_error, "exact": exact,
                               "within_3se": abs(est.value - exact) <= 3 * est.std_error}}
    if rc.scenario == "portfolio":
        keys = {"c", "sigma", "lam", "x0", "T"}
        oracle = scenarios.portfolio_oracle(**{k: v for k, v in rc.params.items() if k in keys})
        y0 = float(np.mean(solution.controls.Y[:, 0]))
        return {**oracle, "control_sup_gap": float(np.max(np.abs(profile - oracle["psi"]))),
                "Y0_estimate": y0, "Y0_gap": abs(y0 - oracle["Y0"])}
    return None


def solution_block(rc: RunConfig, spec: ProblemSpec, solution: SaddleSolution) -> dict:
    cf = solution.controls
    profile = solution.control_profile()
    block = {"report": solution.report(),
             "control_profile": profile,
             "Y0": float(np.mean(cf.Y[:, 0])),
             "mass_T": float(np.mean(cf.q[:, -1])),
             "mass_bound_holds": mass_bound_holds(cf.q[:, -1], spec.driver.alpha, spec.T),
             "density_positive": bool(np.all(cf.q > 0))}
    if spec.n > 1:
        p0 = cf.P[:, 0].mean(axis=0)
        block["agents"] = [{"agent": i + 1, "psi_mean": float(profile[:, i].mean()),
                            "psi_t0": float(profile[0, i]), "psi_tN": float(profile[-1, i]),
                            "P0": float(p0[i]), "X_T_mean": float(solution.ensemble.X[:, -1, i].mean())}
                           for i in range(spec.n)]
    oracle = _oracle_block(rc, spec, solution)
    if oracle is not None:
        block["oracle"] = oracle
    probes = _probe_block(rc, solution)
    if probes is not None:
        block["probes"] = probes
    return block


def spec_block(spec: ProblemSpec) -> dict:
    try:
        validation = validate_assumptions(spec).to_dict()
    except (ModelError, ValueError) as exc:
        validation = {"passed": False, "error": str(exc)}
    return {"name": spec.name, "n": spec.n, "d": spec.d, "r": spec.r, "T": spec.T, "x0": spec.x0,
            "gamma": spec.gamma, "norms": dict(spec.norms), "validation": validation}


def _measure_summary(mu) -> dict:
    return {"mass": mu.mass, "atoms": mu.size, "first_moment": mu.first_moment(),
            "second_moment": mu.moment(2.0)}


# ---------------------------------------------------------------------------
# commands


def _solve_any(rc: RunConfig, spec: ProblemSpec, mfg: bool):
    """Returns ``(solution, measure, extra_report, converged)``."""
    run = rc.run
    if mfg:
        res = mfg_solve(spec, run["M"], run["N"], run["seed"], config=rc.solver,
                        damping=float(rc.mfg["outer_damping"]), tol_measure=float(rc.mfg["tol_measure"]),
                        max_outer=int(rc.mfg["max_outer"]),
                        resolution=None if rc.mfg["resolution"] is None else float(rc.mfg["resolution"]),
                        workers=run["workers"])
        extra = {k: v for k, v in res.report().items() if k != "agent_report"}
        return res.agent, res.measure, {"mfg": extra}, res.converged
    if spec.terminal.variant == "meanfield":
        sol = mfc_solve(spec, run["M"], run["N"], run["seed"], config=rc.solver, workers=run["workers"])
        return sol, sol.measure, {}, sol.converged
    sol = picard_solve(spec, run["M"], run["N"], run["seed"], config=rc.solver, workers=run["workers"])
    return sol, None, {}, sol.converged


def _write_artifacts(rc: RunConfig, solution: SaddleSolution, measure, plots_only: bool = False) -> list[str]:
    out = rc.out
    out.mkdir(parents=True, exist_ok=True)
    written = [write_plot_csv(out / "plot.csv", solution).name]
    if plots_only:
        return written
    count = min(int(rc.run["dump_paths"]), solution.ensemble.M)
    written.append(write_solution_csv(out / "solution.csv", solution, paths=range(count)).name)
    if measure is not None:
        written.append(write_measure_csv(out / "measure.csv", measure).name)
    return written


def _run_record(rc: RunConfig) -> dict:
    # the worker count never changes results, so it stays out of the report
    return {k: v for k, v in rc.run.items() if k != "workers"}


def cmd_solve(args: argparse.Namespace, scenario: str | None = None, plots_only: bool = False) -> int:
    scenario = scenario or args.scenario
    rc = build_run_config(args, scenario)
    spec = build_spec(rc)
    solution, measure, extra, converged = _solve_any(rc, spec, mfg=scenario == "mfg-potential")
    files = _write_artifacts(rc, solution, measure, plots_only)
    report = {"command": "emit-plots" if plots_only else "solve", "scenario": scenario, "params": rc.params,
              "run": _run_record(rc), "spec": spec_block(spec), "solution": solution_block(rc, spec, solution),
              "converged": bool(converged), "artifacts": sorted(files + ["report.json"]), **extra}
    if measure is not None:
        report["measure"] = _measure_summary(measure)
    write_json(rc.out / "report.json", report)
    print(f"{scenario}: {'converged' if converged else 'NOT converged'} after "
          f"{solution.iterations} iterations; artifacts in {rc.out}")
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_mfg(args: argparse.Namespace) -> int:
    return cmd_solve(args, scenario="mfg-potential")


def cmd_emit_plots(args: argparse.Namespace) -> int:
    return cmd_solve(args, plots_only=True)


def cmd_compare(args: argparse.Namespace) -> int:
    rc = build_run_config(args, "mfg-potential")
    spec = build_spec(rc)
    mfc, mfc_mu, _, mfc_ok = _solve_any(rc, spec, mfg=False)
    mfc_profile = mfc.control_profile().copy()
    mfc_block = solution_block(rc, spec, mfc)
    agent, mfg_mu, extra, mfg_ok = _solve_any(rc, spec, mfg=True)
    resolution = rc.mfg["resolution"]
    gap_d1 = d_p(mfg_mu, mfc_mu, 1.0, None if resolution is None else float(resolution))
    gap_ctrl = float(np.max(np.abs(agent.control_profile() - mfc_profile)))
    within = gap_d1 <= rc.tolerances["tol_d1"] and gap_ctrl <= rc.tolerances["tol_control"]
    rc.out.mkdir(parents=True, exist_ok=True)
    write_measure_csv(rc.out / "measure_mfc.csv", mfc_mu)
    write_measure_csv(rc.out / "measure_mfg.csv", mfg_mu)
    report = {"command": "compare", "scenario": "mfg-potential", "params": rc.params, "run": _run_record(rc),
              "spec": spec_block(spec), "mfc": mfc_block, "mfg_agent": solution_block(rc, spec, agent), **extra,
              "d1": gap_d1, "control_sup_gap": gap_ctrl, "tolerances": rc.tolerances,
              "within_tolerance": within, "converged": bool(mfc_ok and mfg_ok),
              "artifacts": ["measure_mfc.csv", "measure_mfg.csv", "report.json"]}
    write_json(rc.out / "report.json", report)
    print(f"d1={gap_d1:.4g} (tol {rc.tolerances['tol_d1']}), control gap={gap_ctrl:.4g} "
          f"(tol {rc.tolerances['tol_control']})")
    if not (mfc_ok and mfg_ok):
        return EXIT_NOT_CONVERGED
    return EXIT_OK if within else EXIT_CHECK_FAILED


def run_checks(selector: str, args: argparse.Namespace) -> list[checks.Check]:
    seed = args.seed if args.seed is not None else 0
    if selector == "entropy-identity":
        return checks.entropy_identity_checks(args.zstar, args.T if args.T is not None else 1.0,
                                              args.M or 100_000, args.N or 100, seed)
    if selector == "donsker-varadhan":
        return checks.dv_checks(seed=seed)
    if selector == "simulate":
        return checks.simulate_suite(M=args.M or 100_000, N=args.N or 100, seed=seed)
    if selector == "fbsde":
        return checks.fbsde_suite(M=args.M or 20_000, N=args.N or 50, seed=args.seed if args.seed is not None else 7)
    if selector == "all":
        out = []
        for name in checks.SUITES:
            out += [checks.Check(f"{name}/{c.name}", c.tolerance, c.observed, c.passed, c.relation)
                    for c in run_checks(name, args)]
        return out
    return checks.SUITES[selector](seed=seed)


def cmd_check(args: argparse.Namespace) -> int:
    summary = checks.summarize(args.selector, run_checks(args.selector, args))
    text = dump_json(summary)
    sys.stdout.write(text)
    if args.out:
        write_json(Path(args.out) / f"check-{args.selector}.json", summary)
    return EXIT_OK if summary["passed"] else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--M", type=int, help="number of Monte Carlo paths (default 20000)")
    g.add_argument("--N", type=int, help="number of time steps (default 100)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--workers", type=int, help="parallel path blocks; results do not depend on it")
    g.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    g.add_argument("--config", help="JSON config; explicit flags take precedence")
    g.add_argument("--dump-paths", dest="dump_paths", type=int, help="paths written to solution.csv (default 100)")
    g.add_argument("--probes", type=int, help="saddle probes per player to run after solving (default 0)")
    g.add_argument("--probe-magnitude", dest="probe_magnitude", type=float, help="sup norm of each probe (0.1)")

    m = p.add_argument_group("model parameters")
    m.add_argument("--beta", type=float, help="terminal slope (gibbs-linear)")
    m.add_argument("--T", type=float, help="horizon")
    m.add_argument("--Nagents", type=int, help="number of agents (systemic-risk)")
    m.add_argument("--c", type=float, help="control drift loading")
    m.add_argument("--sigma", type=float, help="control volatility loading")
    m.add_argument("--lam", type=float, help="risk aversion or functional weight")
    m.add_argument("--x0", type=float, help="initial state (all components)")
    m.add_argument("--nu", type=float, help="uncontrolled volatility (mean-field scenarios)")

    s = p.add_argument_group("solver")
    s.add_argument("--damping", type=float, help="Picard damping in (0, 1] (0.5)")
    s.add_argument("--max-iters", dest="max_iters", type=int, help="Picard iteration cap (60)")
    s.add_argument("--tol-residual", dest="tol_residual", type=float, help="optimality residual tolerance (1e-6)")
    s.add_argument("--tol-value", dest="tol_value", type=float, help="value-change tolerance (1e-8)")
    s.add_argument("--basis-degree", dest="basis_degree", type=int, help="regression polynomial degree (3)")
    s.add_argument("--basis-family", dest="basis_family", choices=("polynomial", "piecewise-constant"))
    s.add_argument("--order", choices=("nature-first", "planner-first"))
    s.add_argument("--scheme", choices=("resolvent", "euler"))
    s.add_argument("--include-logq", dest="include_logq", action="store_const", const=True,
                   help="add log q to the regression state")

    f = p.add_argument_group("mean-field")
    f.add_argument("--outer-damping", dest="outer_damping", type=float, help="measure mixing weight (0.5)")
    f.add_argument("--tol-measure", dest="tol_measure", type=float, help="d_1 fixed-point tolerance (1e-2)")
    f.add_argument("--max-outer", dest="max_outer", type=int, help="outer iteration cap (40)")
    f.add_argument("--resolution", type=float, help="grid width used when comparing measures in d_1 (1e-2)")
    f.add_argument("--tol-d1", dest="tol_d1", type=float, help="compare: d_1 tolerance (0.05)")
    f.add_argument("--tol-control", dest="tol_control", type=float, help="compare: control sup-gap tolerance (0.02)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustsmp",
                                     description="Robust stochastic control saddle solver (batch interface).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a registered or custom scenario")
    p.add_argument("scenario", choices=SCENARIO_IDS)
    _run_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("mfg", help="mean-field game fixed point for the potential scenario")
    _run_flags(p)
    p.set_defaults(func=cmd_mfg)

    p = sub.add_parser("compare", help="MFC terminal measure and control against the MFG equilibrium")
    _run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("emit-plots", help="solve and write only the plot-data CSV")
    p.add_argument("scenario", choices=SCENARIO_IDS)
    _run_flags(p)
    p.set_defaults(func=cmd_emit_plots)

    p = sub.add_parser("check", help="run invariant suites; JSON summary on stdout")
    p.add_argument("selector", choices=CHECK_SELECTORS)
    p.add_argument("--zstar", type=float, default=0.8, help="constant tilt for entropy-identity (0.8)")
    p.add_argument("--T", type=float, help="horizon for entropy-identity (1)")
    p.add_argument("--M", type=int, help="paths for Monte Carlo checks")
    p.add_argument("--N", type=int, help="time steps for Monte Carlo checks")
    p.add_argument("--seed", type=int, help="seed")
    p.add_argument("--out", help="also write the summary to this directory")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError, MeasureError, SimulationError, SolverError, ValueError) as exc:
        print(f"robustsmp: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"robustsmp: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
