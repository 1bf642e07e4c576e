"""Finite-difference solver for the coupled firm/investor HJB system with noise.

Investor: penalized equation
    L v - rho v + eta*(v_r - v_x) + Pi + (1/eps)(v_x - alpha)^+ = 0,
firm: policy iteration on
    L w - rho_bar w + eta*(w_r - w_x) + pi = 0 on {x > a_eps(r)}, w_x = 0 on x = a_eps(r),
with L = (sigma^2 x^2/2) d_xx + mu x d_x and eta = eta_max 1{w_r > w_x}.
The outer loop alternates the two until both surfaces stop moving.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import isotonic_regression
from scipy.sparse.linalg import splu

from .errors import ConvergenceError, DomainError, ParameterError, SolverError
from .model import BoundaryCurve, Grid2D, ModelParams, ValueSurface, profits

log = logging.getLogger(__name__)


# --- closed forms for the isolated investor ------------------------------------

def char_roots(mu: float, sigma: float, rho: float) -> tuple[float, float]:
    """(m, n) with n and -m the roots of (sigma^2/2) k (k-1) + mu k - rho."""
    s2 = sigma * sigma
    c = mu - s2 / 2
    d = math.sqrt(c * c + 2 * s2 * rho)
    return (c + d) / s2, (-c + d) / s2


@dataclass(frozen=True, eq=False)
class IsolatedInvestorSolution:
    """Investor alone (no abatement): v_hat = B(r) x^-m + lambda x^beta r^gamma above a_hat.

    m_f, lambda_f are the firm-side constants (beta = 1, discount rho_bar) used
    in C(r) = (lambda_f/m_f) a_hat(r)^(m_f+1) for the firm payoff C x^-m_f + lambda_f x.
    """

    params: ModelParams
    lambda_: float
    m: float
    n: float
    kappa: float
    m_f: float
    lambda_f: float
    hat_a: BoundaryCurve | None = None
    hat_v: ValueSurface | None = None

    @property
    def a_exp(self) -> float:
        p = self.params
        return p.gamma / (1 - p.beta)

    def a_hat(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.exp(np.log(self.kappa) / (self.params.beta + self.m) + self.a_exp * np.log(r))
        return out[()] if out.ndim == 0 else out

    def B_of_r(self, r):
        p = self.params
        r = np.asarray(r, dtype=float)
        c = self.kappa * self.lambda_ * (1 - p.beta) * p.beta / (self.m * (self.m + 1))
        with np.errstate(divide="ignore"):
            out = c * np.exp(p.gamma * (self.m + 1) / (1 - p.beta) * np.log(r))
        return out

    def C_of_r(self, r):
        return self.lambda_f / self.m_f * self.a_hat(r) ** (self.m_f + 1)

    def v(self, r, x):
        """v_hat, extended affinely with slope alpha below a_hat."""
        p = self.params
        r, x = np.broadcast_arrays(np.asarray(r, float), np.asarray(x, float))
        ah = self.a_hat(r)
        xe = np.maximum(x, ah)
        with np.errstate(divide="ignore", invalid="ignore"):
            up = self.B_of_r(r) * xe ** (-self.m) + self.lambda_ * xe ** p.beta * r ** p.gamma
        out = np.where(x >= ah, up, up - p.alpha * (ah - x))
        out = np.where(r > 0, out, 0.0)
        return out[()] if out.ndim == 0 else out

    def v_x(self, r, x):
        p = self.params
        r, x = np.broadcast_arrays(np.asarray(r, float), np.asarray(x, float))
        out = (-self.m * self.B_of_r(r) * x ** (-self.m - 1)
               + self.lambda_ * p.beta * x ** (p.beta - 1) * r ** p.gamma)
        return np.where(x >= self.a_hat(r), out, p.alpha)

    def v_xx(self, r, x):
        p = self.params
        r, x = np.broadcast_arrays(np.asarray(r, float), np.asarray(x, float))
        out = (self.m * (self.m + 1) * self.B_of_r(r) * x ** (-self.m - 2)
               + self.lambda_ * p.beta * (p.beta - 1) * x ** (p.beta - 2) * r ** p.gamma)
        return np.where(x >= self.a_hat(r), out, 0.0)

    def w(self, r, x):
        """Firm payoff C(r) x^-m_f + lambda_f x when the investor reflects at a_hat."""
        r, x = np.broadcast_arrays(np.asarray(r, float), np.asarray(x, float))
        xe = np.maximum(x, self.a_hat(r))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(xe > 0, self.C_of_r(r) * xe ** (-self.m_f), 0.0) + self.lambda_f * xe
        return out


def isolated_solution(p: ModelParams, grid: Grid2D | None = None) -> IsolatedInvestorSolution:
    """Closed-form isolated-investor solution; sampled on grid when given."""
    if p.sigma <= 0:
        raise ParameterError("isolated_solution requires sigma > 0")
    m, n = char_roots(p.mu, p.sigma, p.rho)
    den = p.sigma ** 2 / 2 * (m + p.beta) * (n - p.beta)
    if den <= 0:
        raise ParameterError("(m + beta)(n - beta) must be positive")
    lam = 1.0 / den
    # smooth pasting (v_x = alpha, v_xx = 0) fixes the boundary coefficient
    kappa = (lam * p.beta / p.alpha * (m + p.beta) / (m + 1)) ** ((p.beta + m) / (1 - p.beta))
    m_f, n_f = char_roots(p.mu, p.sigma, p.rho_bar)
    if n_f <= 1:
        raise ParameterError("rho_bar - mu must be > 0")
    lam_f = 1.0 / (p.sigma ** 2 / 2 * (m_f + 1) * (n_f - 1))
    sol = IsolatedInvestorSolution(p, lam, m, n, kappa, m_f, lam_f)
    if grid is None:
        return sol
    R, X = grid.mesh()
    hat_a = BoundaryCurve(grid.r_nodes, sol.a_hat(grid.r_nodes))
    hat_v = ValueSurface(grid, sol.v(R, X))
    return IsolatedInvestorSolution(p, lam, m, n, kappa, m_f, lam_f, hat_a, hat_v)


# --- stencils --------------------------------------------------------------------

def fd_weights(z: float, x, m: int) -> np.ndarray:
    """Fornberg weights for the m-th derivative at z from nodes x."""
    x = np.asarray(x, dtype=float)
    n = x.size
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


@dataclass(frozen=True)
class FDStencil:
    """Stencil weights in units of 1/dr, 1/dx, 1/dx^2."""

    r_backward: tuple = (-1.0, 1.0)
    x_first: tuple = (1 / 12, -8 / 12, 0.0, 8 / 12, -1 / 12)
    x_second: tuple = (-1 / 12, 16 / 12, -30 / 12, 16 / 12, -1 / 12)


STENCIL = FDStencil()


def x_operators(n: int, dx: float):
    """Sparse (D1, D2) on n uniform nodes: 5-point central inside, one-sided 4th order at edges."""
    if n < 6:
        raise DomainError("need at least 6 x-nodes")
    rows, cols, v1 = [], [], []
    for j in range(n):
        if 2 <= j <= n - 3:
            idx = np.arange(j - 2, j + 3)
            w = np.array(STENCIL.x_first) / dx
        else:
            lo = 0 if j < 2 else n - 5
            idx = np.arange(lo, lo + 5)
            w = fd_weights(j, idx, 1) / dx
        rows += [j] * len(idx)
        cols += list(idx)
        v1 += list(w)
    D1 = sp.csr_matrix((v1, (rows, cols)), shape=(n, n))
    rows2, cols2, vals2 = [], [], []
    for j in range(n):
        if 2 <= j <= n - 3:
            idx = np.arange(j - 2, j + 3)
            w = np.array(STENCIL.x_second) / dx ** 2
        else:
            lo = 0 if j < 2 else n - 6
            idx = np.arange(lo, lo + 6)
            w = fd_weights(j, idx, 2) / dx ** 2
        rows2 += [j] * len(idx)
        cols2 += list(idx)
        vals2 += list(w)
    D2 = sp.csr_matrix((vals2, (rows2, cols2)), shape=(n, n))
    return D1, D2


def fd_derivatives(surface: ValueSurface):
    """(d_r, d_x, d_xx) of a surface: backward in r (forward at r_0), 4th order in x."""
    g = surface.grid
    M1, N1 = g.shape
    if N1 < 6 or M1 < 2:
        raise DomainError("fd_derivatives needs >= 6 x-nodes and >= 2 r-nodes")
    V = surface.values
    D1, D2 = x_operators(N1, g.dx)
    dx_ = (D1 @ V.T).T
    dxx = (D2 @ V.T).T
    dr = np.empty_like(V)
    dr[1:] = (V[1:] - V[:-1]) / g.dr
    dr[0] = dr[1] if M1 > 1 else 0.0
    return dr, dx_, dxx


def _forward_x(V, dx):
    """First-order forward x-difference (backward at the last node)."""
    out = np.empty_like(V)
    out[..., :-1] = (V[..., 1:] - V[..., :-1]) / dx
    out[..., -1] = out[..., -2]
    return out


# --- global operator assembly ------------------------------------------------------

def _r_operator(M1: int, dr: float, scheme: str):
    """Sparse r-difference on M1 nodes. 'backward' as in the stencil, 'upwind' = forward
    differences (information flows from larger r), backward at the last node."""
    Dr = sp.lil_matrix((M1, M1))
    if scheme == "backward":
        for i in range(1, M1):
            Dr[i, i], Dr[i, i - 1] = 1.0 / dr, -1.0 / dr
        Dr[0, 0], Dr[0, 1] = -1.0 / dr, 1.0 / dr
        return Dr.tocsr()
    if scheme == "upwind":
        for i in range(M1 - 1):
            Dr[i, i], Dr[i, i + 1] = -1.0 / dr, 1.0 / dr
        Dr[M1 - 1, M1 - 1], Dr[M1 - 1, M1 - 2] = 1.0 / dr, -1.0 / dr
        return Dr.tocsr()
    raise ValueError(f"unknown r scheme {scheme!r}")


class _Ops:
    """Cached global sparse operators for one grid."""

    def __init__(self, p: ModelParams, grid: Grid2D, r_scheme: str,
                 iso: IsolatedInvestorSolution | None = None, x_drift: str = "central"):
        if x_drift not in ("central", "upwind"):
            raise DomainError(f"unknown x_drift {x_drift!r}")
        self.p, self.grid, self.r_scheme, self.x_drift = p, grid, r_scheme, x_drift
        M1, N1 = grid.shape
        self.M1, self.N1 = M1, N1
        x = grid.x_nodes
        D1, D2 = x_operators(N1, grid.dx)
        self.D1x, self.D2x = D1, D2
        I_r = sp.identity(M1, format="csr")
        self.D1 = sp.kron(I_r, D1, format="csr")
        self.Ldiff = sp.kron(I_r, sp.diags(p.sigma ** 2 * x ** 2 / 2) @ D2, format="csr")
        self.Lx = (self.Ldiff + sp.kron(I_r, sp.diags(p.mu * x) @ D1)).tocsr()
        self.mux = np.tile(p.mu * x, M1)
        Dr1 = _r_operator(M1, grid.dr, r_scheme)
        # r-derivative data on the last row (zero unless the inflow is prescribed)
        self.r_data_v = np.zeros(M1 * N1)
        self.r_data_w = np.zeros(M1 * N1)
        if iso is not None:
            Dr1 = Dr1.tolil()
            Dr1[M1 - 1, :] = 0.0
            Dr1 = Dr1.tocsr()
            h = 1e-5 * max(1.0, grid.r_max)
            r = grid.r_max
            self.r_data_v[-N1:] = (iso.v(r + h, x) - iso.v(r - h, x)) / (2 * h)
            self.r_data_w[-N1:] = (iso.w(r + h, x) - iso.w(r - h, x)) / (2 * h)
        self.Dr = sp.kron(Dr1, sp.identity(N1), format="csr")
        fwd = sp.diags([np.full(N1, -1.0), np.full(N1 - 1, 1.0)], [0, 1], shape=(N1, N1),
                       format="lil")
        fwd[N1 - 1, N1 - 2], fwd[N1 - 1, N1 - 1] = -1.0, 1.0
        self.Dp = sp.kron(I_r, fwd.tocsr() / grid.dx, format="csr")
        bwd = sp.diags([np.full(N1, 1.0), np.full(N1 - 1, -1.0)], [0, -1], shape=(N1, N1),
                       format="lil")
        bwd[0, 0], bwd[0, 1] = -1.0, 1.0
        self.Dm = sp.kron(I_r, bwd.tocsr() / grid.dx, format="csr")
        self.n = M1 * N1

    def drift(self, b, D1=None):
        """Operator of b * d/dx: central (``D1``) or first-order upwind by the sign of b."""
        if self.x_drift == "central":
            return sp.diags(b) @ (self.D1 if D1 is None else D1)
        return sp.diags(np.maximum(b, 0.0)) @ self.Dp + sp.diags(np.minimum(b, 0.0)) @ self.Dm

    def idx(self, i, j):
        return i * self.N1 + j


def _solve(A, b):
    try:
        lu = splu(A.tocsc())
    except RuntimeError as e:
        raise SolverError(f"singular linear system: {e}") from e
    out = lu.solve(b)
    if not np.all(np.isfinite(out)):
        raise SolverError("non-finite linear solve")
    return out


def _replace_rows(A, keep_mask, B):
    """Rows where keep_mask is True come from A, the others from B."""
    K = sp.diags(keep_mask.astype(float))
    return (K @ A + sp.diags((~keep_mask).astype(float)) @ B).tocsr()


# --- investor ------------------------------------------------------------------------

@dataclass
class InnerResult:
    surface: ValueSurface
    iters: int
    errors: list
    extra: dict = field(default_factory=dict)


def investor_bc(p: ModelParams, grid: Grid2D, iso: IsolatedInvestorSolution) -> dict:
    """Boundary data: v = 0 at r = 0 and x = 0, v = v_hat at x_N."""
    return {"top": iso.v(grid.r_nodes, grid.x_max)}


def _revisits(seen: set, act: np.ndarray, prev) -> bool:
    """True when ``act`` differs from ``prev`` but was produced before."""
    key = hash(np.packbits(act).tobytes())
    hit = key in seen and prev is not None and not np.array_equal(act, prev)
    seen.add(key)
    return hit


def solve_investor_penalized(p: ModelParams, grid: Grid2D, eta_star_prev: ValueSurface,
                             v_init: ValueSurface, bc: dict, max_k: int = 500,
                             omega: float = 1.0, r_scheme: str = "upwind",
                             ops: _Ops | None = None, profit_scale: float = 1.0,
                             x0_condition: str = "slope") -> InnerResult:
    """Penalized investor equation for a frozen abatement policy.

    Sub-iteration k solves the linear system in which the penalty is active on
    {D+ v_{k-1} > alpha}, D+ the forward x-difference, and stops when the
    sup-norm change is <= varpi.

    If the active set returns to a state it had before (the fourth-order
    x-stencil is not monotone, so a frontier node can lack a consistent state),
    the set is only allowed to grow afterwards, which guarantees termination.

    At x_0 the condition is either the contact slope D+ v = alpha ("slope"),
    which is what the value satisfies below the investment boundary, or
    v = 0 ("dirichlet").
    """
    if x0_condition not in ("slope", "dirichlet"):
        raise DomainError(f"unknown x0_condition {x0_condition!r}")
    ops = ops or _Ops(p, grid, r_scheme)
    M1, N1 = grid.shape
    R, X = grid.mesh()
    Pi = profit_scale * profits(p).Pi(R, X)
    eta = eta_star_prev.values.ravel()
    base = (ops.Ldiff + ops.drift(ops.mux - eta) - p.rho * sp.identity(ops.n)
            + sp.diags(eta) @ ops.Dr)
    interior = np.zeros((M1, N1), bool)
    interior[1:, 1:-1] = True
    interior = interior.ravel()
    rhs_bc = np.zeros((M1, N1))
    rhs_bc[1:, -1] = bc["top"][1:]
    I = sp.identity(ops.n, format="csr")
    if x0_condition == "slope":
        left = np.zeros((M1, N1), bool)
        left[1:, 0] = True
        left = left.ravel()
        I = _replace_rows(I, ~left, ops.Dp)
        rhs_bc[1:, 0] = p.alpha
    v = v_init.values.ravel().copy()
    errors = []
    seen, prev = set(), None
    sticky = False
    inv_eps = 1.0 / p.epsilon
    for k in range(1, max_k + 1):
        act = (ops.Dp @ v > p.alpha * (1 - 1e-9)) & interior
        if sticky:
            act |= prev
        elif _revisits(seen, act, prev):
            # the active set cycles: let it only grow from here on
            sticky = True
            log.debug("investor active set cycles at k=%d; switching to a growing set", k)
            act |= prev
        prev = act
        A = base + sp.diags(act * inv_eps) @ ops.Dp
        rhs = -Pi.ravel() + act * inv_eps * p.alpha - eta * ops.r_data_v
        A = _replace_rows(A, interior, I)
        rhs = np.where(interior, rhs, rhs_bc.ravel())
        vn = _solve(A, rhs)
        if omega != 1.0:
            vn = omega * vn + (1 - omega) * v
        err = float(np.max(np.abs(vn - v).reshape(M1, N1)[1:, 1:-1]))
        errors.append(err)
        v = vn
        if err <= p.varpi:
            break
    else:
        raise SolverError("penalized investor iteration did not converge",
                          {"errors": errors, "v": v.reshape(M1, N1)})
    # active nodes where the penalty argument ended up negative
    frontier = int(np.sum(act & (ops.Dp @ v < p.alpha)))
    return InnerResult(ValueSurface(grid, v.reshape(M1, N1)), k, errors,
                       {"sticky": sticky, "frontier_nodes": frontier})


def penalty_violation(p: ModelParams, v: ValueSurface) -> float:
    """max over interior nodes of (D+ v - alpha)^+."""
    vx = _forward_x(v.values, v.grid.dx)
    return float(np.max(np.maximum(vx[1:, 1:-1] - p.alpha, 0.0)))


def _isotonic(y):
    return np.asarray(isotonic_regression(np.asarray(y, float), increasing=True).x)


def extract_a_eps(v_eps: ValueSurface, alpha: float, tol_a: float,
                  cleanup: bool = True) -> BoundaryCurve:
    """Upper edge of the contact set {v_x >= alpha - tol_a} per r-row.

    The derivative is the forward x-difference used by the penalty. The edge is
    the largest interior node in the set, refined by linear interpolation of
    v_x - (alpha - tol_a) towards the next node. Taking the largest node rather
    than the run from x_0 makes the edge insensitive to the boundary layer that
    the Dirichlet condition at x_0 creates once the firm's drift is switched on.
    Rows without contact return x_0 = 0 and are flagged.
    """
    g = v_eps.grid
    vx = _forward_x(v_eps.values, g.dx)
    x = g.x_nodes
    thr = alpha - tol_a
    vals = np.zeros(g.shape[0])
    flags = np.zeros(g.shape[0], bool)
    for i in range(g.shape[0]):
        row = vx[i, 1:-1] - thr
        xs = x[1:-1]
        inside = np.nonzero(row >= 0)[0]
        if inside.size == 0:
            flags[i] = True
            continue
        j = inside[-1]
        if j == row.size - 1:
            vals[i] = xs[-1]
            continue
        f0, f1 = row[j], row[j + 1]
        # forward differences sit at cell midpoints
        xm0, xm1 = xs[j] + g.dx / 2, xs[j + 1] + g.dx / 2
        vals[i] = xm0 + (xm1 - xm0) * f0 / (f0 - f1)
    if cleanup:
        vals = _isotonic(vals)
    return BoundaryCurve(g.r_nodes, np.maximum(vals, 0.0), flags)


# --- firm ------------------------------------------------------------------------------

def firm_bc(p: ModelParams, grid: Grid2D, iso: IsolatedInvestorSolution) -> dict:
    """Boundary data: w(0, x) = x/(rho_bar - mu), w(r, 0) = 0, w(r, x_N) = C(r) x_N^-m + lambda x_N."""
    xN = grid.x_max
    return {"r0": grid.x_nodes / (p.rho_bar - p.mu),
            "top": iso.C_of_r(grid.r_nodes) * xN ** (-iso.m_f) + iso.lambda_f * xN}


def _neumann_rows(grid: Grid2D, a_vals):
    """Per r-row: index of the first node above a(r) (or -1 when a(r) < x_1) and
    the 4-point weights of d/dx at a(r)."""
    x = grid.x_nodes
    out = []
    for a in a_vals:
        if a < x[1]:
            out.append((-1, None))
            continue
        js = int(np.searchsorted(x, a, side="left"))
        js = min(js, x.size - 8)
        w = fd_weights(a, x[js:js + 4], 1)
        out.append((js, w))
    return out


def _firm_x_ops(p: ModelParams, grid: Grid2D, ops: _Ops, neu):
    """x-operators for the firm. The node just above the Neumann node gets a
    one-sided stencil so that no copied value below the boundary is used."""
    M1, N1 = grid.shape
    x = grid.x_nodes
    fix = np.zeros((M1, N1), bool)
    r1, c1, v1, r2, c2, v2 = [], [], [], [], [], []
    for i, (js, _) in enumerate(neu):
        if i == 0 or js < 1:
            continue
        j = js + 1
        fix[i, j] = True
        row = ops.idx(i, j)
        w1 = fd_weights(x[j], x[js:js + 5], 1)
        w2 = fd_weights(x[j], x[js:js + 6], 2)
        for t in range(6):
            col = ops.idx(i, js + t)
            c = p.sigma ** 2 * x[j] ** 2 / 2 * w2[t] + (p.mu * x[j] * w1[t] if t < 5 else 0.0)
            r2.append(row); c2.append(col); v2.append(c)
            if t < 5:
                r1.append(row); c1.append(col); v1.append(w1[t])
    keep = ~fix.ravel()
    Lf = sp.csr_matrix((v2, (r2, c2)), shape=(ops.n, ops.n))
    Df = sp.csr_matrix((v1, (r1, c1)), shape=(ops.n, ops.n))
    return _replace_rows(ops.Lx, keep, Lf), _replace_rows(ops.D1, keep, Df)


def _fixed_rows(grid: Grid2D, neu) -> np.ndarray:
    """Mask of the nodes just above the Neumann node (one-sided stencils)."""
    fix = np.zeros(grid.shape, bool)
    for i, (js, _) in enumerate(neu):
        if i > 0 and js >= 1:
            fix[i, js + 1] = True
    return fix.ravel()


def solve_firm_pde(p: ModelParams, grid: Grid2D, a_eps: BoundaryCurve, w_init: ValueSurface,
                   bc: dict, eta_init: ValueSurface | None = None, max_k: int = 500,
                   r_scheme: str = "upwind", ops: _Ops | None = None,
                   freeze_policy: bool = False):
    """Policy iteration for the firm on {x > a_eps(r)} with w_x = 0 on the boundary.

    With ``freeze_policy`` the linear equation is solved once for ``eta_init``
    and the returned policy is the greedy one for that solution. A policy that
    returns to an earlier state is made to only grow afterwards, as in the
    investor's iteration.
    Returns (w, eta_star, InnerResult).
    """
    ops = ops or _Ops(p, grid, r_scheme)
    M1, N1 = grid.shape
    x = grid.x_nodes
    pi = profits(p).pi(x)
    a_vals = np.interp(grid.r_nodes, a_eps.r_nodes, a_eps.values)
    neu = _neumann_rows(grid, a_vals)
    # rows: PDE where x_j is above the boundary node, special rows otherwise
    pde = np.zeros((M1, N1), bool)
    rows, cols, vals = [], [], []
    rhs_bc = np.zeros((M1, N1))
    for i in range(M1):
        if i == 0:
            for j in range(N1):
                rows.append(ops.idx(0, j)); cols.append(ops.idx(0, j)); vals.append(1.0)
            rhs_bc[0] = bc["r0"]
            continue
        js, wts = neu[i]
        top = ops.idx(i, N1 - 1)
        rows.append(top); cols.append(top); vals.append(1.0)
        rhs_bc[i, -1] = bc["top"][i]
        if js < 0:
            rows.append(ops.idx(i, 0)); cols.append(ops.idx(i, 0)); vals.append(1.0)
            pde[i, 1:-1] = True
            continue
        for j in range(js):
            rows += [ops.idx(i, j)] * 2
            cols += [ops.idx(i, j), ops.idx(i, js)]
            vals += [1.0, -1.0]
        for t in range(4):
            rows.append(ops.idx(i, js)); cols.append(ops.idx(i, js + t)); vals.append(wts[t])
        pde[i, js + 1:-1] = True
    B = sp.csr_matrix((vals, (rows, cols)), shape=(ops.n, ops.n))
    pde = pde.ravel()
    Lx, D1 = _firm_x_ops(p, grid, ops, neu)
    Ldiff = Lx - sp.diags(ops.mux) @ D1
    fixed = _fixed_rows(grid, neu)
    base = Ldiff - p.rho_bar * sp.identity(ops.n)

    def drift(b):
        op = ops.drift(b, D1)
        return op if ops.x_drift == "central" else _replace_rows(op, ~fixed, sp.diags(b) @ D1)
    rhs_pde = -np.broadcast_to(pi, (M1, N1)).ravel()
    rd = ops.r_data_w
    rhs = np.where(pde, rhs_pde, rhs_bc.ravel())
    eta = np.zeros(ops.n) if eta_init is None else eta_init.values.ravel().copy()
    w = w_init.values.ravel().copy()
    errors = []
    seen, prev = set(), None
    sticky = False
    for k in range(1, max_k + 1):
        A = _replace_rows(base + drift(ops.mux - eta) + sp.diags(eta) @ ops.Dr, pde, B)
        wn = _solve(A, np.where(pde, rhs - eta * rd, rhs))
        if ops.x_drift == "central":
            gain = ops.Dr @ wn + rd - D1 @ wn
        else:
            # compare the two discretized Hamiltonians
            full = np.full(ops.n, p.eta_max)
            gain = (p.eta_max * (ops.Dr @ wn + rd) + drift(ops.mux - full) @ wn
                    - drift(ops.mux) @ wn)
        act = gain > 0
        if sticky:
            act |= prev
        elif _revisits(seen, act, prev):
            sticky = True
            log.debug("firm policy cycles at k=%d; switching to a growing action set", k)
            act |= prev
        prev = act
        eta_new = np.where(act, p.eta_max, 0.0)
        eta_new = _fill_below(eta_new.reshape(M1, N1), neu).ravel()
        err = float(np.max(np.abs(wn - w).reshape(M1, N1)[1:, 1:-1]))
        errors.append(err)
        w, eta = wn, eta_new
        if freeze_policy or err <= p.varpi:
            break
    else:
        raise SolverError("firm policy iteration did not converge", {"errors": errors})
    W = ValueSurface(grid, w.reshape(M1, N1))
    E = ValueSurface(grid, eta.reshape(M1, N1))
    return W, E, InnerResult(W, k, errors, {"pde_mask": pde.reshape(M1, N1), "sticky": sticky})


def _fill_below(eta, neu):
    """Below the investment boundary the firm is pushed up at once; copy the boundary-node policy."""
    out = eta.copy()
    out[0] = 0.0
    for i, (js, _) in enumerate(neu):
        if i == 0:
            continue
        if js > 0:
            out[i, :js] = out[i, js]
    return out


def extract_b_eps(w: ValueSurface, eta_star: ValueSurface, a_eps: BoundaryCurve,
                  r_scheme: str = "upwind", cleanup: bool = True,
                  top_r_data: np.ndarray | None = None) -> BoundaryCurve:
    """Upper edge of the firm's action region {w_r > w_x} per r-row, interpolated.

    Rows where the firm does not act just above a_eps get b = a_eps; rows whose
    action run reaches x_N get b = x_N. Both cases are flagged. ``top_r_data``
    replaces w_r on the last row when the inflow there was prescribed.
    """
    g = w.grid
    M1, N1 = g.shape
    D1, _ = x_operators(N1, g.dx)
    Dr = _r_operator(M1, g.dr, r_scheme)
    gain = Dr @ w.values - (D1 @ w.values.T).T
    if top_r_data is not None:
        gain[-1] = top_r_data - D1 @ w.values[-1]
    x = g.x_nodes
    a_vals = np.interp(g.r_nodes, a_eps.r_nodes, a_eps.values)
    vals = np.array(a_vals, dtype=float)
    flags = np.zeros(M1, bool)
    for i in range(1, M1):
        act = eta_star.values[i] > 0
        act[0] = act[-1] = False
        start = int(np.searchsorted(x, a_vals[i], side="left"))
        idx = np.nonzero(act[start:])[0]
        if idx.size == 0 or not act[max(start, 1)]:
            flags[i] = True
            continue
        # contiguous run from the investment boundary upwards
        run_end = start
        while run_end + 1 < N1 - 1 and act[run_end + 1]:
            run_end += 1
        j = run_end
        if j >= N1 - 2:
            # action region reaches the truncation boundary
            vals[i] = x[-1]
            flags[i] = True
            continue
        f0, f1 = gain[i, j], gain[i, j + 1]
        frac = f0 / (f0 - f1) if f0 != f1 else 0.0
        vals[i] = x[j] + g.dx * min(max(frac, 0.0), 1.0)
    flags[0] = True
    if cleanup:
        vals = _isotonic(vals)
    return BoundaryCurve(g.r_nodes, np.maximum(vals, 0.0), flags)


# --- outer loop ------------------------------------------------------------------------

@dataclass
class SolveReport:
    outer_iters: int = 0
    inner_iters_v: list = field(default_factory=list)
    inner_iters_w: list = field(default_factory=list)
    outer_errors: list = field(default_factory=list)
    penalty_violation: float = float("nan")
    residual_norms: dict = field(default_factory=dict)
    converged: bool = False
    seconds: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "outer_iters": self.outer_iters,
            "inner_iters_v": list(map(int, self.inner_iters_v)),
            "inner_iters_w": list(map(int, self.inner_iters_w)),
            "outer_errors": [float(e) for e in self.outer_errors],
            "final_error": float(self.outer_errors[-1]) if self.outer_errors else None,
            "penalty_violation": float(self.penalty_violation),
            "residual_norms": {k: float(v) for k, v in self.residual_norms.items()},
            "converged": bool(self.converged),
            "seconds": float(self.seconds),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True, eq=False)
class StochasticEquilibrium:
    w: ValueSurface
    v_eps: ValueSurface
    eta_star: ValueSurface
    a_eps: BoundaryCurve
    b_eps: BoundaryCurve
    report: SolveReport
    iso: IsolatedInvestorSolution | None = None


def default_grid(p: ModelParams, n_r: int = 200, n_x: int = 200, r_max: float = 10.0,
                 x_max: float | None = None) -> Grid2D:
    """Grid whose x-range keeps a_hat(r_max) below half of x_max."""
    iso = isolated_solution(p)
    if x_max is None:
        x_max = 2.0 * float(iso.a_hat(r_max)) / 0.85
    return Grid2D.uniform(r_max, x_max, n_r, n_x)


def run_algorithm(p: ModelParams, grid: Grid2D, max_outer: int = 50, tol_a: float | None = None,
                  omega: float = 1.0, r_scheme: str = "upwind",
                  init: StochasticEquilibrium | None = None,
                  top_inflow: bool = True, x_drift: str = "central") -> StochasticEquilibrium:
    """Outer fixed-point loop between the penalized investor and the firm's policy iteration.

    Abatement moves the state towards larger r, so r = r_max is an inflow
    boundary for both equations. With ``top_inflow`` the r-derivatives on that
    row are taken from the isolated-investor closed forms; otherwise a backward
    difference is used there, which leaves the row without inflow data and can
    make the outer loop cycle.

    ``x_drift="upwind"`` discretizes the x-drift mu x - eta by first-order
    upwinding instead of the fourth-order central stencil; use it when sigma is
    so small that the central scheme loses monotonicity.
    """
    t0 = time.perf_counter()
    if tol_a is None:
        tol_a = 1e-4 * p.alpha
    iso = isolated_solution(p, grid)
    report = SolveReport()
    if float(iso.a_hat(grid.r_max)) >= 0.5 * grid.x_max:
        msg = "a_hat(r_max) >= x_max/2; enlarge x_max"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report.warnings.append(msg)
    ops = _Ops(p, grid, r_scheme, iso if top_inflow else None, x_drift)
    vbc = investor_bc(p, grid, iso)
    wbc = firm_bc(p, grid, iso)
    M1, N1 = grid.shape
    if init is None:
        a_cur = iso.hat_a
        v_prev = iso.hat_v
        w0 = ValueSurface(grid, np.broadcast_to(iso.w(*grid.mesh()), grid.shape))
        w_prev, eta, _ = solve_firm_pde(p, grid, a_cur, w0, wbc,
                                        eta_init=ValueSurface(grid, np.zeros(grid.shape)),
                                        r_scheme=r_scheme, ops=ops, freeze_policy=True)
    else:
        a_cur, v_prev, w_prev, eta = init.a_eps, init.v_eps, init.w, init.eta_star
    for ell in range(1, max_outer + 1):
        res_v = solve_investor_penalized(p, grid, eta, v_prev, vbc, omega=omega,
                                         r_scheme=r_scheme, ops=ops)
        v_new = res_v.surface
        a_cur = extract_a_eps(v_new, p.alpha, tol_a)
        w_new, eta, res_w = solve_firm_pde(p, grid, a_cur, w_prev, wbc, eta_init=None,
                                           r_scheme=r_scheme, ops=ops)
        err = max(float(np.max(np.abs(w_new.values - w_prev.values)[1:, 1:-1])),
                  float(np.max(np.abs(v_new.values - v_prev.values)[1:, 1:-1])))
        report.outer_iters = ell
        report.inner_iters_v.append(res_v.iters)
        report.inner_iters_w.append(res_w.iters)
        report.outer_errors.append(err)
        log.info("outer %d: error %.3e (v iters %d, w iters %d)", ell, err, res_v.iters,
                 res_w.iters)
        v_prev, w_prev = v_new, w_new
        if err <= p.varpi_prime:
            report.converged = True
            break
    report.penalty_violation = penalty_violation(p, v_prev)
    report.seconds = time.perf_counter() - t0
    b_cur = extract_b_eps(w_prev, eta, a_cur, r_scheme=r_scheme,
                          top_r_data=ops.r_data_w[-N1:] if top_inflow else None)
    b_cur = BoundaryCurve(grid.r_nodes, np.maximum(b_cur.values, a_cur.values), b_cur.flags)
    if np.any(a_cur.values[1:] > grid.x_nodes[-11]):
        msg = "a_eps within 10 cells of x_max"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report.warnings.append(msg)
    eq = StochasticEquilibrium(w_prev, v_prev, eta, a_cur, b_cur, report, iso)
    if not report.converged:
        raise ConvergenceError(f"outer loop did not converge in {max_outer} iterations",
                               report=report, trace={"equilibrium": eq})
    return eq
