"""Monte Carlo simulation of the equilibrium dynamics.

Euler-Maruyama for the profit process, bang-bang abatement below b(R) and a
projection (discrete Skorokhod) reflection at the moving boundary a(R).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .io import write_csv, write_json
from .model import BoundaryCurve, ModelParams

__all__ = ["SimConfig", "PathBundle", "MCStats", "simulate_paths", "monte_carlo_stats",
           "path_normals"]


@dataclass(frozen=True)
class SimConfig:
    """``dt=None`` means 1e-3 * t_end. The step actually used is t_end / n_steps,
    which never exceeds dt. Every ``record_every``-th step is stored."""

    n_paths: int = 10_000
    t_end: float = 20.0
    x0: float = 1.0
    r0: float = 0.0
    seed: int = 0
    dt: float | None = None
    record_every: int = 1
    chunk: int = 2048

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise DomainError("n_paths must be >= 1")
        if not self.t_end > 0:
            raise DomainError("t_end must be positive")
        if self.dt is not None and not self.dt > 0:
            raise DomainError("dt must be positive")
        if not self.x0 > 0 or not self.r0 >= 0:
            raise DomainError("need x0 > 0 and r0 >= 0")
        if int(self.record_every) < 1 or int(self.chunk) < 1:
            raise DomainError("record_every and chunk must be >= 1")
        if int(self.seed) < 0:
            raise DomainError("seed must be nonnegative")

    @property
    def n_steps(self) -> int:
        dt = 1e-3 * self.t_end if self.dt is None else float(self.dt)
        return max(1, int(np.ceil(self.t_end / dt - 1e-9)))

    @property
    def step(self) -> float:
        return self.t_end / self.n_steps


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Recorded paths, shape (n_paths, n_times). ``contact`` marks paths that were reflected."""

    times: np.ndarray
    X: np.ndarray
    R: np.ndarray
    nu: np.ndarray
    contact: np.ndarray
    r0: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def to_csv(self, path, max_paths: int | None = None):
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        nt = self.times.size
        idx = np.repeat(np.arange(n), nt)
        t = np.tile(self.times, n)
        return write_csv(path, ["path", "t", "X", "R", "nu"],
                         [idx, t, self.X[:n], self.R[:n], self.nu[:n]])


@dataclass(frozen=True, eq=False)
class MCStats:
    """Time-pointwise Monte Carlo means with standard errors.

    ``mean_R_over_X`` and ``mean_nu_over_X`` average pathwise ratios.
    ``nu_over_dR`` is the ratio of means mean(nu)/mean(R - R_0), 0 while the
    denominator vanishes; ``nu_over_dR_pathwise`` averages nu/(R - R_0) over the
    paths where the denominator is positive (nan if there are none).
    """

    times: np.ndarray
    n_paths: int
    mean_R: np.ndarray
    se_R: np.ndarray
    mean_R_over_X: np.ndarray
    se_R_over_X: np.ndarray
    mean_nu_over_X: np.ndarray
    se_nu_over_X: np.ndarray
    mean_nu: np.ndarray
    se_nu: np.ndarray
    nu_over_dR: np.ndarray
    se_nu_over_dR: np.ndarray
    nu_over_dR_pathwise: np.ndarray

    _columns = ("mean_R", "se_R", "mean_R_over_X", "se_R_over_X", "mean_nu_over_X",
                "se_nu_over_X", "mean_nu", "se_nu", "nu_over_dR", "se_nu_over_dR",
                "nu_over_dR_pathwise")

    def to_csv(self, path):
        return write_csv(path, ["t", *self._columns],
                         [self.times] + [getattr(self, c) for c in self._columns])

    def summary(self, seed: int | None = None) -> dict:
        out = {"n_paths": int(self.n_paths), "seed": seed, "t_end": float(self.times[-1])}
        out.update({c: float(getattr(self, c)[-1]) for c in self._columns})
        return out

    def to_json(self, path, seed: int | None = None):
        return write_json(path, self.summary(seed))


def path_normals(seed: int, path_index: int, n: int) -> np.ndarray:
    """Standard normals of one path from its own Philox stream keyed by (seed, path_index)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss)).standard_normal(n)


def _simulate_chunk(p, a, b, cfg, paths, rec_idx):
    n, dt, ns = paths.size, cfg.step, cfg.n_steps
    Z = np.stack([path_normals(cfg.seed, i, ns) for i in paths]) if p.sigma > 0 else None
    X = np.full(n, float(cfg.x0))
    R = np.full(n, float(cfg.r0))
    nu = np.zeros(n)
    contact = np.zeros(n, bool)
    # a start below the boundary is lifted at t = 0
    lift = np.maximum(a(R, warn=False) - X, 0.0)
    nu += lift
    X += lift
    contact |= lift > 0
    nrec = rec_idx.size
    out = np.empty((3, n, nrec))
    out[:, :, 0] = X, R, nu
    k = 1
    sq = np.sqrt(dt)
    for s in range(1, ns + 1):
        eta = np.where(X <= b(R, warn=False), p.eta_max, 0.0)
        Xn = X + p.mu * X * dt - eta * dt
        if Z is not None:
            Xn += p.sigma * X * sq * Z[:, s - 1]
        R = R + eta * dt
        floor = a(R, warn=False)
        gap = np.maximum(floor - Xn, 0.0)
        nu += gap
        X = Xn + gap
        contact |= gap > 0
        if k < nrec and rec_idx[k] == s:
            out[:, :, k] = X, R, nu
            k += 1
    return out, contact, R.max()


def simulate_paths(p: ModelParams, a: BoundaryCurve, b: BoundaryCurve,
                   cfg: SimConfig) -> PathBundle:
    """Simulate ``cfg.n_paths`` equilibrium paths.

    Per step: eta = eta_max if X <= b(R) else 0; X' = X + mu X dt + sigma X sqrt(dt) Z
    - eta dt, R' = R + eta dt; if X' < a(R') the deficit is booked into nu and
    X' = a(R'). Paths use independent Philox streams, so results do not depend on
    chunking. Boundaries are linear between nodes; past the last node a power-law
    tail is used and a warning is issued once.
    """
    dt, ns = cfg.step, cfg.n_steps
    rec_idx = np.unique(np.r_[np.arange(0, ns + 1, int(cfg.record_every)), ns])
    times = rec_idx * dt
    parts, contacts = [], []
    r_hi = cfg.r0
    for lo in range(0, int(cfg.n_paths), int(cfg.chunk)):
        idx = np.arange(lo, min(lo + int(cfg.chunk), int(cfg.n_paths)))
        out, contact, rmax = _simulate_chunk(p, a, b, cfg, idx, rec_idx)
        parts.append(out)
        contacts.append(contact)
        r_hi = max(r_hi, rmax)
    if r_hi > min(a.r_nodes[-1], b.r_nodes[-1]):
        warnings.warn("paths left the sampled r-range of the boundaries; "
                      "power-law extrapolation was used", RuntimeWarning, stacklevel=2)
    data = np.concatenate(parts, axis=1)
    return PathBundle(times, data[0], data[1], data[2], np.concatenate(contacts), float(cfg.r0))


def _se(v, axis=0):
    n = v.shape[axis]
    if n < 2:
        return np.zeros(v.shape[1 - axis])
    return np.std(v, axis=axis, ddof=1) / np.sqrt(n)


def monte_carlo_stats(bundle: PathBundle) -> MCStats:
    """Pointwise means and standard errors over paths."""
    if bundle.n_paths < 1:
        raise DomainError("empty bundle")
    X, R, nu = bundle.X, bundle.R, bundle.nu
    n = bundle.n_paths
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.where(X > 0, R / X, np.nan)
        nx = np.where(X > 0, nu / X, np.nan)
    dR = R - bundle.r0
    m_nu, m_dR = nu.mean(0), dR.mean(0)
    pos = m_dR > 0
    ratio = np.where(pos, m_nu / np.where(pos, m_dR, 1.0), 0.0)
    # delta method for a ratio of means
    if n > 1:
        c = ((nu - m_nu) * (dR - m_dR)).sum(0) / (n - 1)
        v_nu, v_dR = nu.var(0, ddof=1), dR.var(0, ddof=1)
        safe = np.where(pos, m_dR, 1.0)
        var = (v_nu - 2 * ratio * c + ratio ** 2 * v_dR) / (n * safe ** 2)
        se_ratio = np.where(pos, np.sqrt(np.maximum(var, 0.0)), 0.0)
    else:
        se_ratio = np.zeros_like(ratio)
    has = dR > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        pw = np.where(has, nu / np.where(has, dR, 1.0), 0.0).sum(0) / has.sum(0)
    return MCStats(
        times=bundle.times, n_paths=n,
        mean_R=R.mean(0), se_R=_se(R),
        mean_R_over_X=np.nanmean(rx, 0), se_R_over_X=_se(rx),
        mean_nu_over_X=np.nanmean(nx, 0), se_nu_over_X=_se(nx),
        mean_nu=m_nu, se_nu=_se(nu),
        nu_over_dR=ratio, se_nu_over_dR=se_ratio,
        nu_over_dR_pathwise=pw,
    )
