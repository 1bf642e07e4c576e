"""Model constants, benchmark profit functions, grids and sampled curves/surfaces."""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError

_REQUIRED = ("mu", "sigma", "rho", "rho_bar", "alpha", "eta_max", "beta", "gamma")


@dataclass(frozen=True)
class ModelParams:
    """Scalar model constants and numerical knobs.

    mu, sigma: drift and volatility of the capacity; rho, rho_bar: investor and
    firm discount rates; alpha: unit investment cost; eta_max: maximal
    abatement rate; beta, gamma: exponents of the investor's profit
    x**beta * r**gamma. epsilon is the penalty parameter, varpi and varpi_prime
    the inner and outer tolerances of the stochastic solver.
    """

    mu: float
    sigma: float
    rho: float
    rho_bar: float
    alpha: float
    eta_max: float
    beta: float
    gamma: float
    epsilon: float = 1e-4
    varpi: float = 1e-3
    varpi_prime: float = 1e-3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ParameterError(f"{f.name} must be a real number, got {val!r}")
            if not math.isfinite(val):
                raise ParameterError(f"{f.name} must be finite")
            object.__setattr__(self, f.name, float(val))
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        for name in ("rho", "rho_bar", "alpha", "eta_max", "epsilon", "varpi", "varpi_prime"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")
        for name in ("beta", "gamma"):
            if not 0 < getattr(self, name) < 1:
                raise ParameterError(f"{name} must lie in (0, 1)")

    @property
    def delta(self) -> float:
        return self.rho - self.mu

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if not isinstance(d, dict):
            raise ParameterError("parameters must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown parameter keys: {unknown}")
        missing = [k for k in _REQUIRED if k not in d]
        if missing:
            raise ParameterError(f"missing parameter keys: {missing}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelParams":
        return cls.from_dict(json.loads(s))


# --- profit functions -------------------------------------------------------

class BenchmarkProfits:
    """pi(x) = x^+ for the firm and Pi(r, x) = x^beta r^gamma for the investor.

    Solvers only talk to this interface, so another profit pair can be
    dropped in by providing the same methods.
    """

    linear_pi = True

    def __init__(self, beta: float, gamma: float):
        self.beta = beta
        self.gamma = gamma

    # firm
    def pi(self, x):
        return np.maximum(x, 0.0)

    def pi_dot(self, x):
        return np.where(np.asarray(x) > 0, 1.0, 0.0)

    def pi_ddot(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    # investor
    def Pi(self, r, x):
        r = np.asarray(r, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any(r < 0) or np.any(x < 0):
            raise DomainError("Pi requires r >= 0 and x >= 0")
        with np.errstate(divide="ignore"):
            out = np.exp(self.beta * np.log(x) + self.gamma * np.log(r))
        return out[()] if out.ndim == 0 else out

    def Pi_x(self, r, x):
        r = np.asarray(r, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0) or np.any(r < 0):
            raise DomainError("Pi_x requires x > 0 and r >= 0")
        with np.errstate(divide="ignore"):
            out = self.beta * np.exp((self.beta - 1) * np.log(x) + self.gamma * np.log(r))
        return out[()] if out.ndim == 0 else out

    def Pi_xx(self, r, x):
        x = np.asarray(x, dtype=float)
        return (self.beta - 1) * self.Pi_x(r, x) / x

    def G(self, r, z):
        """Inverse of x -> Pi_x(r, x) at level z > 0."""
        r = np.asarray(r, dtype=float)
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0) or np.any(r < 0):
            raise DomainError("G requires z > 0 and r >= 0")
        with np.errstate(divide="ignore"):
            lg = (math.log(self.beta) + self.gamma * np.log(r) - np.log(z)) / (1 - self.beta)
        out = np.exp(lg)
        return out[()] if out.ndim == 0 else out


def profits(p: ModelParams) -> BenchmarkProfits:
    return BenchmarkProfits(p.beta, p.gamma)


def pi_eval(x):
    """Firm profit max(x, 0)."""
    out = np.maximum(np.asarray(x, dtype=float), 0.0)
    return out[()] if out.ndim == 0 else out


def Pi_eval(p: ModelParams, r, x):
    """Investor profit x^beta r^gamma on the nonnegative quadrant."""
    return profits(p).Pi(r, x)


def Pi_x(p: ModelParams, r, x):
    return profits(p).Pi_x(r, x)


def G_inv(p: ModelParams, r, z):
    return profits(p).G(r, z)


def _check_delta(p: ModelParams):
    if p.delta <= 0:
        raise ParameterError(f"rho - mu must be > 0 (got {p.delta})")


def a_coeffs(p: ModelParams) -> tuple[float, float]:
    """(A, q) with a(r) = A r^q."""
    _check_delta(p)
    A = (p.beta / (p.alpha * p.delta)) ** (1.0 / (1.0 - p.beta))
    return A, p.gamma / (1.0 - p.beta)


def a_of_r(p: ModelParams, r):
    """Investment boundary a(r) = G(r, alpha*delta)."""
    _check_delta(p)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("a(r) requires r >= 0")
    A, q = a_coeffs(p)
    with np.errstate(divide="ignore"):
        out = np.exp(math.log(A) + q * np.log(r))
    return out[()] if out.ndim == 0 else out


def a_dot(p: ModelParams, r):
    """Derivative of a(r). Infinite at r = 0 when gamma < 1 - beta."""
    A, q = a_coeffs(p)
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = A * q * np.exp((q - 1.0) * np.log(r))
    return out[()] if out.ndim == 0 else out


# --- grids and sampled objects ----------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform tensor grid on [0, r_M] x [0, x_N]."""

    r_nodes: np.ndarray
    x_nodes: np.ndarray
    dr: float = field(init=False)
    dx: float = field(init=False)

    def __post_init__(self):
        r = _frozen(self.r_nodes)
        x = _frozen(self.x_nodes)
        if r.ndim != 1 or x.ndim != 1 or r.size < 2 or x.size < 2:
            raise DomainError("grid needs at least two nodes per axis")
        if r[0] != 0.0 or x[0] != 0.0:
            raise DomainError("grid must start at r_0 = x_0 = 0")
        dr, dx = r[1] - r[0], x[1] - x[0]
        if dr <= 0 or dx <= 0:
            raise DomainError("grid nodes must be ascending")
        if not (np.allclose(np.diff(r), dr, rtol=1e-9, atol=0)
                and np.allclose(np.diff(x), dx, rtol=1e-9, atol=0)):
            raise DomainError("grid spacing must be uniform")
        object.__setattr__(self, "r_nodes", r)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "dr", float(dr))
        object.__setattr__(self, "dx", float(dx))

    @classmethod
    def uniform(cls, r_max: float, x_max: float, n_r: int, n_x: int) -> "Grid2D":
        """Grid with n_r x n_x nodes."""
        return cls(np.linspace(0.0, r_max, n_r), np.linspace(0.0, x_max, n_x))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.r_nodes.size, self.x_nodes.size)

    @property
    def r_max(self) -> float:
        return float(self.r_nodes[-1])

    @property
    def x_max(self) -> float:
        return float(self.x_nodes[-1])

    def mesh(self):
        return np.meshgrid(self.r_nodes, self.x_nodes, indexing="ij")


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Sampled boundary r -> x-level. ``flags`` marks nodes that needed a fallback."""

    r_nodes: np.ndarray
    values: np.ndarray
    flags: np.ndarray | None = None

    def __post_init__(self):
        r = _frozen(self.r_nodes)
        v = _frozen(self.values)
        if r.shape != v.shape or r.ndim != 1 or r.size < 1:
            raise DomainError("r_nodes and values must be 1-d arrays of equal length")
        if np.any(np.diff(r) <= 0):
            raise DomainError("r_nodes must be strictly ascending")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("boundary values must be finite and nonnegative")
        object.__setattr__(self, "r_nodes", r)
        object.__setattr__(self, "values", v)
        if self.flags is None:
            object.__setattr__(self, "flags", _frozen_bool(np.zeros(r.size, bool)))
        else:
            object.__setattr__(self, "flags", _frozen_bool(self.flags))

    def is_nondecreasing(self, strict: bool = False) -> bool:
        d = np.diff(self.values)
        return bool(np.all(d > 0) if strict else np.all(d >= 0))

    def tail_exponent(self) -> float:
        """Power-law exponent fitted on the two last nodes with positive r and value."""
        ok = (self.r_nodes > 0) & (self.values > 0)
        r, v = self.r_nodes[ok], self.values[ok]
        if r.size < 2:
            return 1.0
        return float(np.log(v[-1] / v[-2]) / np.log(r[-1] / r[-2]))

    def __call__(self, r, warn: bool = True):
        """Linear interpolation; power-law extrapolation beyond the last node."""
        r = np.asarray(r, dtype=float)
        out = np.interp(r, self.r_nodes, self.values)
        hi = r > self.r_nodes[-1]
        if np.any(hi):
            if warn:
                warnings.warn("boundary evaluated beyond its sampled range; "
                              "using power-law extrapolation", RuntimeWarning, stacklevel=2)
            q = self.tail_exponent()
            out = np.where(hi, self.values[-1] * (np.maximum(r, 1e-300) / self.r_nodes[-1]) ** q, out)
        return out[()] if out.ndim == 0 else out


def _frozen_bool(a) -> np.ndarray:
    a = np.array(a, dtype=bool)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Scalar field on a Grid2D; values[i, j] is the value at (r_i, x_j)."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.grid.shape:
            raise DomainError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("surface values must be finite")
        object.__setattr__(self, "values", v)

    def at(self, r, x):
        """Bilinear interpolation inside the grid."""
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.grid.r_nodes, self.grid.x_nodes), self.values)
        r, x = np.broadcast_arrays(np.asarray(r, float), np.asarray(x, float))
        out = f(np.stack([r.ravel(), x.ravel()], axis=-1)).reshape(r.shape)
        return out[()] if out.ndim == 0 else out
