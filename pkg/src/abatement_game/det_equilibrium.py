"""Zero-noise equilibrium: hitting times, the function h, the boundary b(r),
value functions by quadrature and the equilibrium trajectory.

Capacity decays deterministically, X' = mu X + nu' - eta, with mu <= 0 and
sigma = 0.  Writing k = |mu|, Y_t = exp(-k t) and
f_M(t) = (eta_max / k)(exp(k t) - 1), the capacity under maximal abatement is
Y_t (x - f_M(t)).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import DomainError, HorizonError, ParameterError, RegimeError, SolverError
from .model import (BoundaryCurve, Grid2D, ModelParams, ValueSurface, a_coeffs, a_dot,
                    a_of_r, profits)

QUAD_OPTS = dict(epsabs=0.0, epsrel=1e-12, limit=200)
HORIZON = 1e4


def _check_regime(p: ModelParams):
    if p.sigma != 0:
        raise RegimeError("the zero-noise solver requires sigma = 0")
    if p.mu > 0:
        raise RegimeError("the zero-noise solver requires mu <= 0")
    if p.delta <= 0:
        raise ParameterError("rho - mu must be > 0")


def check_monotone_marginal(p: ModelParams, r_max: float = 100.0, n: int = 64) -> bool:
    """Numerically check that r -> pi'(a(r)) a'(r) is nondecreasing; warn if not."""
    r = np.geomspace(1e-3 * r_max, r_max, n)
    g = profits(p).pi_dot(a_of_r(p, r)) * a_dot(p, r)
    ok = bool(np.all(np.diff(g) >= -1e-12 * np.abs(g[1:])))
    if not ok:
        warnings.warn("r -> pi'(a(r)) a'(r) is not nondecreasing for these parameters "
                      "(gamma + beta < 1); the sign of dh/dr is not guaranteed",
                      RuntimeWarning, stacklevel=2)
    return ok


class _Scalars:
    """Plain-float versions of a, a', pi, pi' for use inside quadrature integrands."""

    def __init__(self, p: ModelParams):
        self.A, self.q = a_coeffs(p)
        self.pr = profits(p)

    def a(self, s):
        return self.A * s ** self.q if s > 0 else 0.0

    def ad(self, s):
        if s > 0:
            return self.A * self.q * s ** (self.q - 1.0)
        return math.inf if self.q < 1 else (self.A if self.q == 1 else 0.0)

    def pi(self, x):
        return x if x > 0 else 0.0 if self.pr.linear_pi else float(self.pr.pi(x))

    def pi_dot(self, x):
        if self.pr.linear_pi:
            return 1.0 if x > 0 else 0.0
        return float(self.pr.pi_dot(x))


@lru_cache(maxsize=64)
def _scalars(p: ModelParams) -> _Scalars:
    return _Scalars(p)


# --- quadrature helpers -------------------------------------------------------

def _int(f, t0, t1):
    if t1 <= t0:
        return 0.0
    return quad(f, t0, t1, **QUAD_OPTS)[0]


def discounted_tail(f, rate: float, t0: float) -> float:
    """int_{t0}^inf exp(-rate t) f(t) dt via u = exp(-rate (t - t0)) on (0, 1]."""

    def g(u):
        return f(t0 - math.log(u) / rate) if u > 0 else 0.0

    val = quad(g, 0.0, 1.0, **QUAD_OPTS)[0]
    if not math.isfinite(val):
        raise ParameterError("divergent discounted tail integral")
    return math.exp(-rate * t0) / rate * val


# --- auxiliary symbols ----------------------------------------------------------

def Y(p: ModelParams, t):
    return np.exp(p.mu * np.asarray(t, dtype=float))


def f_M(p: ModelParams, t):
    """Cumulative discounted abatement (eta_max/|mu|)(exp(|mu| t) - 1); eta_max t if mu = 0."""
    if p.mu > 0:
        raise RegimeError("f_M is defined for mu <= 0")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    k = -p.mu
    out = p.eta_max * t if k == 0 else p.eta_max / k * np.expm1(k * t)
    return out[()] if np.ndim(out) == 0 else out


def _F(p, r, x, t):
    sc = _scalars(p)
    return x - float(f_M(p, t)) - math.exp(-p.mu * t) * sc.a(r + p.eta_max * t)


def tau_M(p: ModelParams, r: float, x: float) -> float:
    """Time at which maximal abatement brings the capacity down to a(R)."""
    if p.mu > 0:
        raise RegimeError("tau_M is defined for mu <= 0")
    a = _scalars(p).a(r)
    if x < a * (1 - 1e-13) - 1e-300:
        raise DomainError(f"tau_M requires x >= a(r) (x={x}, a={a})")
    if x <= a:
        return 0.0
    hi = 1.0
    while _F(p, r, x, hi) > 0:
        hi *= 2.0
        if hi > HORIZON:
            raise HorizonError(f"tau_M not bracketed within {HORIZON} for r={r}, x={x}")
    lo = hi / 2.0 if hi > 1.0 else 0.0
    return brentq(lambda t: _F(p, r, x, t), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                  maxiter=200)


def tau_M_partials(p: ModelParams, r: float, x: float, tm: float | None = None):
    """(d tau_M/dx, d tau_M/dr) from the implicit-function theorem."""
    if tm is None:
        tm = tau_M(p, r, x)
    k, eta = -p.mu, p.eta_max
    ek = math.exp(k * tm)
    ad = _scalars(p).ad(r + eta * tm)
    den = k * x + eta + eta * ek * ad
    return 1.0 / den, -ek * ad / den


# --- firm payoff under maximal abatement ----------------------------------------

def _capacity(p, x, t):
    """Capacity at time t under eta = eta_max from x (before hitting a)."""
    k = -p.mu
    fm = p.eta_max * t if k == 0 else p.eta_max / k * math.expm1(k * t)
    return math.exp(p.mu * t) * (x - fm)


def w1_eval(p: ModelParams, r: float, x: float, tm: float | None = None) -> float:
    """Firm payoff when abating at the maximal rate from (r, x) onwards."""
    sc, rb, eta = _scalars(p), p.rho_bar, p.eta_max
    if tm is None:
        tm = tau_M(p, r, x)
    i1 = _int(lambda t: math.exp(-rb * t) * sc.pi(_capacity(p, x, t)), 0.0, tm)
    i2 = discounted_tail(lambda t: sc.pi(sc.a(r + eta * t)), rb, tm)
    return i1 + i2


def h_eval(p: ModelParams, r: float, x: float, tm: float | None = None) -> float:
    """h = -|mu| x d_x w1 - rho_bar w1 + pi(x), evaluated through its quadrature form."""
    sc, rb, eta = _scalars(p), p.rho_bar, p.eta_max
    if tm is None:
        tm = tau_M(p, r, x)
    head = math.exp(-rb * tm) * sc.pi(sc.a(r + eta * tm))
    tail = discounted_tail(lambda t: sc.pi(sc.a(r + eta * t)), rb, tm)
    mid = _int(lambda t: math.exp((p.mu - rb) * t) * sc.pi_dot(_capacity(p, x, t)), 0.0, tm)
    return float(head - rb * tail + eta * mid)


def h_partials(p: ModelParams, r: float, x: float, tm: float | None = None):
    """(dh/dr, dh/dx)."""
    sc, rb, eta = _scalars(p), p.rho_bar, p.eta_max
    if tm is None:
        tm = tau_M(p, r, x)
    tx, tr = tau_M_partials(p, r, x, tm)
    s = r + eta * tm
    E = math.exp(-rb * tm)
    Yt = math.exp(p.mu * tm)
    ad = sc.ad(s)
    pd = sc.pi_dot(sc.a(s))
    tail = discounted_tail(lambda t: sc.pi_dot(sc.a(r + eta * t)) * sc.ad(r + eta * t), rb, tm)
    h_r = E * pd * (ad * (1 + eta * tr) + eta * Yt * tr) - rb * tail
    h_x = E * pd * eta * tx * (ad + Yt)
    if not sc.pr.linear_pi:
        h_x += eta * _int(lambda t: math.exp((2 * p.mu - rb) * t)
                          * float(sc.pr.pi_ddot(_capacity(p, x, t))), 0.0, tm)
    return float(h_r), float(h_x)


# --- mu = 0 characterization ------------------------------------------------------

def crossing_gap(p: ModelParams, r: float, x: float) -> float:
    """w0 - w1 for mu = 0, with w0 = pi(x)/rho_bar the payoff of never abating."""
    return float(profits(p).pi(x) / p.rho_bar - w1_eval(p, r, x))


def _level(p, r, x):
    return h_eval(p, r, x) if p.mu < 0 else crossing_gap(p, r, x)


# --- the boundary b ---------------------------------------------------------------

def _bracket_b(p, r):
    a = float(a_of_r(p, r))
    lo = a + 1e-12 * (1.0 + a)
    if _level(p, r, lo) > 0:
        raise SolverError("level function positive at a(r)", {"r": r, "a": a})
    hi = 2.0 * a + 1.0
    while _level(p, r, hi) <= 0:
        lo = hi
        hi *= 2.0
        if hi > 1e12:
            raise SolverError("no sign change of h found above a(r)", {"r": r, "a": a})
    return lo, hi


def b_root(p: ModelParams, r: float, guess: float | None = None, tol_h: float = 1e-10) -> float:
    """Solve h(r, b) = 0 (or w0 = w1 when mu = 0), Newton from guess with bisection fallback."""
    a = float(a_of_r(p, r))
    if guess is not None and p.mu < 0 and guess > a:
        b = guess
        for _ in range(30):
            tm = tau_M(p, r, b)
            hv = h_eval(p, r, b, tm)
            if abs(hv) <= tol_h:
                return b
            _, hx = h_partials(p, r, b, tm)
            nb = b - hv / hx
            if not (nb > a) or not math.isfinite(nb):
                break
            if abs(nb - b) <= 1e-15 * (1 + b):
                return nb
            b = nb
    lo, hi = _bracket_b(p, r)
    return brentq(lambda z: _level(p, r, z), lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def _g(p, r, b):
    hr, hx = h_partials(p, r, b)
    return -hr / hx


def b_curve(p: ModelParams, r_nodes, tol_newton: float = 1e-3, max_iter: int = 50,
            tol_h: float = 1e-6, project: bool = True) -> BoundaryCurve:
    """Abatement boundary b on r_nodes.

    b(r_0) comes from bracketed bisection. Later nodes follow the implicit Euler
    step b_{i+1} = b_i + dr g(r_{i+1}, b_{i+1}), g = -h_r/h_x, solved by Newton
    to tol_newton. With project=True each node is then refined by Newton on
    h(r_{i+1}, .) = 0 so that |h| <= tol_h holds at every node.
    """
    if p.sigma != 0:
        raise RegimeError("b_curve requires sigma = 0")
    if p.mu > 0:
        raise RegimeError("b_curve requires mu <= 0")
    r_nodes = np.asarray(r_nodes, dtype=float)
    if r_nodes.ndim != 1 or r_nodes.size < 1 or np.any(np.diff(r_nodes) <= 0) or r_nodes[0] < 0:
        raise DomainError("r_nodes must be ascending and nonnegative")
    check_monotone_marginal(p, r_max=max(float(r_nodes[-1]), 1e-6))
    b = np.empty_like(r_nodes)
    flags = np.zeros(r_nodes.size, bool)
    b[0] = b_root(p, r_nodes[0])
    for i in range(r_nodes.size - 1):
        r1 = r_nodes[i + 1]
        dr = r1 - r_nodes[i]
        a1 = float(a_of_r(p, r1))
        bt = b[i]
        ok = False
        if p.mu < 0:
            for _ in range(max_iter):
                if bt <= a1:
                    break
                g0 = _g(p, r1, bt)
                eps = 1e-6 * (1.0 + bt)
                dg = (_g(p, r1, bt + eps) - _g(p, r1, max(bt - eps, a1))) / (bt + eps - max(bt - eps, a1))
                s = bt - b[i] - dr * g0
                nb = bt - s / (1.0 - dr * dg)
                if not math.isfinite(nb):
                    break
                step = abs(nb - bt)
                bt = nb
                if step < tol_newton:
                    ok = bt > a1
                    break
        if not ok:
            flags[i + 1] = True
            bt = b_root(p, r1)
        elif project:
            bt = b_root(p, r1, guess=bt)
        b[i + 1] = bt
    if project:
        bad = [i for i in range(r_nodes.size) if abs(_level(p, r_nodes[i], b[i])) > tol_h]
        if bad:
            raise SolverError("b_curve residual above tolerance", {"nodes": bad})
    return BoundaryCurve(r_nodes, b, flags)


# --- solution bundle, value functions ------------------------------------------

@dataclass(frozen=True, eq=False)
class DetSolution:
    """Zero-noise equilibrium: boundaries a, b and sampled values w, v."""

    params: ModelParams
    a: BoundaryCurve
    b: BoundaryCurve
    w: ValueSurface | None = None
    v: ValueSurface | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def b_at(self, r: float) -> float:
        """b(r) by root-finding, seeded from the sampled curve."""
        r = float(r)
        if r not in self._cache:
            guess = float(self.b(r, warn=False))
            self._cache[r] = b_root(self.params, r, guess=guess)
        return self._cache[r]


def _v2(p, r, x, tm=None):
    """Investor payoff from a(r) <= x <= b(r): abatement now, reflection at a after tau_M."""
    sc, pr, rho, eta, k = _scalars(p), profits(p), p.rho, p.eta_max, -p.mu
    be, ga = p.beta, p.gamma
    if tm is None:
        tm = tau_M(p, r, x)

    def Pi(rr, xx):
        return xx ** be * rr ** ga if xx > 0 and rr > 0 else 0.0

    j1 = _int(lambda t: math.exp(-rho * t) * Pi(r + eta * t, _capacity(p, x, t)), 0.0, tm)

    def tail(t):
        s = r + eta * t
        av = sc.a(s)
        return Pi(s, av) - p.alpha * (eta * sc.ad(s) + eta + k * av)

    return j1 + discounted_tail(tail, rho, tm)


def w_eval(p: ModelParams, sol: DetSolution, r: float, x: float) -> float:
    """Firm equilibrium payoff. Below a(r) the investor lifts capacity to a(r) at once."""
    _check_regime(p)
    pr, rb = profits(p), p.rho_bar
    a = float(a_of_r(p, r))
    x = max(float(x), a)
    b = sol.b_at(r)
    if x <= b:
        return w1_eval(p, r, x)
    if p.mu == 0:
        return float(pr.pi(x) / rb)
    tb = math.log(x / b) / (-p.mu)
    sc = _scalars(p)
    head = _int(lambda t: math.exp(-rb * t) * sc.pi(x * math.exp(p.mu * t)), 0.0, tb)
    return head + math.exp(-rb * tb) * w1_eval(p, r, b)


def phi_eval(p: ModelParams, sol: DetSolution, r: float, x: float) -> float:
    """Gain of waiting until tau_b: int_0^{tau_b} exp(-rho_bar t) h(r, x Y_t) dt."""
    b = sol.b_at(r)
    if x <= b or p.mu == 0:
        return 0.0
    tb = math.log(x / b) / (-p.mu)
    f = lambda t: math.exp(-p.rho_bar * t) * h_eval(p, r, x * math.exp(p.mu * t))
    return quad(f, 0.0, tb, epsabs=1e-12, epsrel=1e-10, limit=100)[0]


def v_eval(p: ModelParams, sol: DetSolution, r: float, x: float) -> float:
    """Investor equilibrium payoff, including the lump-sum purchase below a(r)."""
    _check_regime(p)
    pr, rho = profits(p), p.rho
    a = float(a_of_r(p, r))
    if x < a:
        return -p.alpha * (a - x) + _v2(p, r, a)
    b = sol.b_at(r)
    if x <= b:
        return _v2(p, r, x)
    if p.mu == 0:
        return float(pr.Pi(r, x) / rho)
    tb = math.log(x / b) / (-p.mu)
    c = float(pr.Pi(r, 1.0))
    head = c * _int(lambda t: math.exp(-rho * t) * (x * math.exp(p.mu * t)) ** p.beta, 0.0, tb)
    return head + math.exp(-rho * tb) * _v2(p, r, b)


def det_solve(p: ModelParams, r_nodes, x_nodes=None, **b_opts) -> DetSolution:
    """Boundaries on r_nodes and, when x_nodes is given, w and v on the tensor grid."""
    _check_regime(p)
    r_nodes = np.asarray(r_nodes, dtype=float)
    a = BoundaryCurve(r_nodes, a_of_r(p, r_nodes))
    b = b_curve(p, r_nodes, **b_opts)
    sol = DetSolution(p, a, b)
    if x_nodes is None:
        return sol
    grid = Grid2D(r_nodes, np.asarray(x_nodes, dtype=float))
    W = np.empty(grid.shape)
    V = np.empty(grid.shape)
    for i, r in enumerate(grid.r_nodes):
        sol._cache[float(r)] = float(b.values[i])
        for j, x in enumerate(grid.x_nodes):
            W[i, j] = w_eval(p, sol, r, x)
            V[i, j] = v_eval(p, sol, r, x)
    return DetSolution(p, a, b, ValueSurface(grid, W), ValueSurface(grid, V), sol._cache)


# --- trajectory ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DetTrajectory:
    times: np.ndarray
    X: np.ndarray
    R: np.ndarray
    nu: np.ndarray
    tau_b: float
    tau_M: float
    firm_payoff: float
    investor_payoff: float


def _rhs(p, phase, t, y):
    """y = (X, R, nu, JF, JI); phase 3 keeps X = a(R) algebraically."""
    sc = _scalars(p)
    X, R = y[0], y[1]
    eta = 0.0 if phase == 1 else p.eta_max
    if phase == 3:
        X = sc.a(R)
        dX = eta * sc.ad(R)
        dnu = dX + eta - p.mu * X
    else:
        dnu = 0.0
        dX = p.mu * X - eta
    dJF = math.exp(-p.rho_bar * t) * sc.pi(X)
    Pi = X ** p.beta * R ** p.gamma if X > 0 and R > 0 else 0.0
    dJI = math.exp(-p.rho * t) * (Pi - p.alpha * dnu)
    return np.array([dX, eta, dnu, dJF, dJI])


def _rk4(p, phase, t, y, h):
    k1 = _rhs(p, phase, t, y)
    k2 = _rhs(p, phase, t + h / 2, y + h / 2 * k1)
    k3 = _rhs(p, phase, t + h / 2, y + h / 2 * k2)
    k4 = _rhs(p, phase, t + h, y + h * k3)
    out = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if phase == 3:
        out[0] = _scalars(p).a(out[1])
    return out


def det_trajectory(p: ModelParams, sol: DetSolution, r0: float, x0: float,
                   t_end: float, dt: float) -> DetTrajectory:
    """Integrate the equilibrium dynamics with RK4 and bisection-located phase switches.

    Phase 1: X' = mu X while X > b(R). Phase 2: X' = mu X - eta_max, R' = eta_max
    until X = a(R). Phase 3: X = a(R), R' = eta_max, nu' = a'(R) eta_max + eta_max - mu a(R).
    Both discounted payoffs are accumulated alongside. A start below a(r0) is
    lifted to a(r0) by a lump-sum purchase at t = 0.
    """
    _check_regime(p)
    if dt <= 0 or t_end <= 0:
        raise DomainError("dt and t_end must be positive")
    a0 = float(a_of_r(p, r0))
    y = np.array([x0, r0, 0.0, 0.0, 0.0], dtype=float)
    if x0 < a0:
        y[0] = a0
        y[2] = a0 - x0
        y[4] = -p.alpha * (a0 - x0)
    b0 = sol.b_at(r0)
    if y[0] <= a0:
        phase = 3
    elif y[0] <= b0:
        phase = 2
    else:
        phase = 1
    tau_b = 0.0 if phase >= 2 else math.inf
    tau_m = 0.0 if phase == 3 else math.inf

    def event(ph, yy):
        if ph == 1:
            return yy[0] - b0
        return yy[0] - float(a_of_r(p, yy[1]))

    t = 0.0
    ts, ys = [0.0], [y.copy()]
    while t < t_end * (1 - 1e-14):
        h = min(dt, t_end - t)
        yn = _rk4(p, phase, t, y, h)
        if phase < 3 and event(phase, yn) <= 0:
            lo, hi = 0.0, h
            while hi - lo > 1e-10:
                mid = 0.5 * (lo + hi)
                if event(phase, _rk4(p, phase, t, y, mid)) > 0:
                    lo = mid
                else:
                    hi = mid
            y = _rk4(p, phase, t, y, hi)
            t += hi
            if phase == 1:
                y[0] = b0
                tau_b = t
                phase = 2
            if phase == 2 and y[0] <= float(a_of_r(p, y[1])) + 1e-12:
                y[0] = float(a_of_r(p, y[1]))
                tau_m = t
                phase = 3
        else:
            y = yn
            t += h
        ts.append(t)
        ys.append(y.copy())
    ys = np.array(ys)
    return DetTrajectory(times=np.array(ts), X=ys[:, 0], R=ys[:, 1], nu=ys[:, 2],
                         tau_b=tau_b, tau_M=tau_m, firm_payoff=float(ys[-1, 3]),
                         investor_payoff=float(ys[-1, 4]))


def trajectory_payoffs(p: ModelParams, sol: DetSolution, r0: float, x0: float,
                       t_end: float = 120.0, dt: float = 0.05, refinements: int = 2):
    """Richardson-extrapolated (firm, investor) payoffs of det_trajectory.

    Runs dt, dt/2, ..., dt/2**refinements and extrapolates the two finest
    results assuming fourth-order convergence.
    """
    res = [det_trajectory(p, sol, r0, x0, t_end, dt / 2 ** j) for j in range(refinements + 1)]
    if len(res) == 1:
        return res[0].firm_payoff, res[0].investor_payoff
    c, f = res[-2], res[-1]
    return ((16 * f.firm_payoff - c.firm_payoff) / 15,
            (16 * f.investor_payoff - c.investor_payoff) / 15)
