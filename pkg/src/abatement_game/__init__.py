"""Abatement-investment game between a polluting firm and a green investor.

Closed-form zero-noise equilibrium, a finite-difference solver for the
stochastic equilibrium, and Monte Carlo simulation of the controlled dynamics.
"""

from .det_equilibrium import (DetSolution, DetTrajectory, b_curve, det_solve, det_trajectory,
                              h_eval, h_partials, tau_M, tau_M_partials, v_eval, w_eval)
from .errors import (ConvergenceError, DomainError, HorizonError, ParameterError, RegimeError,
                     SolverError)
from .fd_hjb import (StochasticEquilibrium, default_grid, extract_a_eps, extract_b_eps,
                     isolated_solution, run_algorithm, solve_firm_pde, solve_investor_penalized)
from .model import (BenchmarkProfits, BoundaryCurve, Grid2D, ModelParams, ValueSurface, a_of_r,
                    profits)
from .simulate import MCStats, PathBundle, SimConfig, monte_carlo_stats, simulate_paths

__version__ = "0.1.0"

__all__ = [
    "BenchmarkProfits", "BoundaryCurve", "ConvergenceError", "DetSolution", "DetTrajectory",
    "DomainError", "Grid2D", "HorizonError", "MCStats", "ModelParams", "ParameterError",
    "PathBundle", "RegimeError", "SimConfig", "SolverError", "StochasticEquilibrium",
    "ValueSurface", "a_of_r", "b_curve", "default_grid", "det_solve", "det_trajectory",
    "extract_a_eps", "extract_b_eps", "h_eval", "h_partials", "isolated_solution",
    "monte_carlo_stats", "profits", "run_algorithm", "simulate_paths", "solve_firm_pde",
    "solve_investor_penalized", "tau_M", "tau_M_partials", "v_eval", "w_eval",
]
