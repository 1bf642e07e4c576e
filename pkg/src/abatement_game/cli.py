"""Command-line front end: ``abatement-game {det,hjb,simulate,xval}``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import acceptance
from . import det_equilibrium as de
from . import fd_hjb as fd
from . import simulate as sm
from .config import WORKFLOWS, ConfigError, RunConfig, load_config
from .errors import DomainError, HorizonError, RegimeError, SolverError
from .io import write_csv, write_curve_csv, write_json, write_surface_csv

log = logging.getLogger("abatement_game")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4
THREADS_ENV = "ABATEMENT_GAME_THREADS"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="abatement-game", description=__doc__.splitlines()[0])
    ap.add_argument("workflow", nargs="?", choices=WORKFLOWS,
                    help="workflow to run; defaults to the config's 'workflow'")
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--output", help="output directory (overrides 'output_dir')")
    ap.add_argument("--seed", type=int, help="simulation/xval seed (overrides sim.seed)")
    ap.add_argument("--filter", help="xval: comma-separated criterion ids, e.g. A12")
    ap.add_argument("--grid-scale", type=float, default=1.0,
                    help="multiply all node counts by this factor")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


# --- workflows -----------------------------------------------------------------------

def run_det(cfg: RunConfig, grid_scale: float = 1.0) -> int:
    p = cfg.params
    r_max = float(cfg.grid.get("r_max", 10.0))
    nb = cfg.scaled("n_boundary", 500, grid_scale)
    sol = de.det_solve(p, np.linspace(0.0, r_max, nb))
    x_max = float(cfg.grid.get("x_max", 3.0 * float(sol.b.values[-1])))
    r_nodes = np.linspace(0.0, r_max, cfg.scaled("n_r", 41, grid_scale))
    x_nodes = np.linspace(0.0, x_max, cfg.scaled("n_x", 41, grid_scale))
    surf = de.det_solve(p, r_nodes, x_nodes)
    tr_cfg = cfg.trajectory
    r0 = float(tr_cfg.get("r0", 0.5))
    x0 = float(tr_cfg.get("x0", 2.0 * sol.b_at(r0)))
    tr = de.det_trajectory(p, sol, r0, x0, float(tr_cfg.get("t_end", 20.0)),
                           float(tr_cfg.get("dt", 0.01)))
    out = cfg.output_dir
    write_curve_csv(out / "a.csv", sol.a, "a")
    write_curve_csv(out / "b.csv", sol.b, "b")
    write_surface_csv(out / "w_surface.csv", surf.w)
    write_surface_csv(out / "v_surface.csv", surf.v)
    write_csv(out / "trajectory.csv", ["t", "X", "R", "nu"], [tr.times, tr.X, tr.R, tr.nu])
    return EXIT_OK


def _grid(cfg: RunConfig, grid_scale: float):
    return fd.default_grid(cfg.params, n_r=cfg.scaled("n_r", 200, grid_scale),
                           n_x=cfg.scaled("n_x", 200, grid_scale),
                           r_max=float(cfg.grid.get("r_max", 10.0)),
                           x_max=cfg.grid.get("x_max"))


def _solve_hjb(cfg: RunConfig, grid_scale: float):
    """(equilibrium, converged); the equilibrium is the last iterate on non-convergence."""
    s = cfg.solver
    try:
        eq = fd.run_algorithm(cfg.params, _grid(cfg, grid_scale),
                              max_outer=int(s.get("max_outer", 50)), tol_a=s.get("tol_a"),
                              r_scheme=s.get("r_scheme", "upwind"),
                              top_inflow=bool(s.get("top_inflow", True)),
                              x_drift=s.get("x_drift", "central"))
    except fd.ConvergenceError as e:
        return e.trace["equilibrium"], False
    return eq, True


def run_hjb(cfg: RunConfig, grid_scale: float = 1.0) -> int:
    eq, ok = _solve_hjb(cfg, grid_scale)
    out = cfg.output_dir
    write_surface_csv(out / "w_surface.csv", eq.w)
    write_surface_csv(out / "v_surface.csv", eq.v_eps)
    write_surface_csv(out / "eta_star.csv", eq.eta_star)
    write_curve_csv(out / "a_eps.csv", eq.a_eps, "a_eps")
    write_curve_csv(out / "b_eps.csv", eq.b_eps, "b_eps")
    rep = eq.report.to_dict()
    rep["params"] = cfg.params.to_dict()
    rep["grid"] = {"n_r": eq.w.grid.shape[0], "n_x": eq.w.grid.shape[1],
                   "r_max": eq.w.grid.r_max, "x_max": eq.w.grid.x_max}
    write_json(out / "report.json", rep)
    if not ok:
        log.error("outer loop did not converge; report.json written")
        return EXIT_SOLVER
    return EXIT_OK


def run_simulate(cfg: RunConfig, grid_scale: float = 1.0) -> int:
    p = cfg.params
    if p.sigma == 0:
        sol = de.det_solve(p, np.linspace(0.0, float(cfg.grid.get("r_max", 40.0)),
                                          cfg.scaled("n_boundary", 401, grid_scale)))
        a, b = sol.a, sol.b
    else:
        eq, ok = _solve_hjb(cfg, grid_scale)
        if not ok:
            raise SolverError("stochastic equilibrium did not converge",
                              {"report": eq.report.to_dict()})
        a, b = eq.a_eps, eq.b_eps
    sim = dict(cfg.sim)
    max_csv = sim.pop("max_paths_csv", 100)
    scfg = sm.SimConfig(**sim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        bundle = sm.simulate_paths(p, a, b, scfg)
    stats = sm.monte_carlo_stats(bundle)
    out = cfg.output_dir
    bundle.to_csv(out / "paths.csv", max_paths=max_csv)
    stats.to_csv(out / "stats.csv")
    summary = stats.summary(seed=scfg.seed)
    summary["warnings"] = sorted({str(w.message) for w in caught})
    write_json(out / "stats.json", summary)
    return EXIT_OK


def run_xval(cfg: RunConfig, ids=None, grid_scale: float = 1.0, seed: int | None = None) -> int:
    ids = ids or cfg.xval.get("criteria") or acceptance.criterion_ids()
    scale = acceptance.Scale(grid_scale=grid_scale, seed=0 if seed is None else int(seed),
                             n_paths=int(cfg.xval.get("n_paths", 10_000)))
    results = []
    for cid in ids:
        res = acceptance.run_one(cid, scale)
        print(res.line(), flush=True)
        results.append(res)
    passed = all(r.passed for r in results)
    write_json(cfg.output_dir / "xval_report.json",
               {"all_passed": passed, "criteria": [r.to_dict() for r in results],
                "grid_scale": grid_scale, "seed": scale.seed, "n_paths": scale.n_paths})
    return EXIT_OK if passed else EXIT_ACCEPTANCE


# --- entry point -----------------------------------------------------------------------

def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def _fail(code: int, kind: str, message: str, out_dir: Path | None = None, trace=None) -> int:
    report = {"error": kind, "message": message, "exit_code": code}
    if trace:
        report["trace"] = {k: v for k, v in trace.items() if isinstance(v, (int, float, str, list, dict))}
    print(json.dumps(report, default=str), file=sys.stderr)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "error.json", report)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    ids = None
    try:
        if not args.grid_scale > 0:
            raise ConfigError("--grid-scale must be positive")
        if args.filter:
            ids = [s.strip() for s in args.filter.split(",") if s.strip()]
            unknown = [i for i in ids if i not in acceptance.CRITERIA]
            if unknown:
                raise ConfigError(f"unknown criterion ids: {unknown}")
        cfg = load_config(args.config, workflow=args.workflow, output=args.output,
                          seed=args.seed)
        limiter = _thread_limit()
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "ConfigError", str(e))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.workflow == "det":
            code = run_det(cfg, args.grid_scale)
        elif cfg.workflow == "hjb":
            code = run_hjb(cfg, args.grid_scale)
        elif cfg.workflow == "simulate":
            code = run_simulate(cfg, args.grid_scale)
        else:
            code = run_xval(cfg, ids, args.grid_scale, args.seed)
    except (SolverError, HorizonError, RegimeError, DomainError) as e:
        return _fail(EXIT_SOLVER, type(e).__name__, str(e), cfg.output_dir,
                     getattr(e, "trace", None))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return code


if __name__ == "__main__":
    sys.exit(main())
