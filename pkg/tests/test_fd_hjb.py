import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abatement_game import acceptance as A
from abatement_game import det_equilibrium as de
from abatement_game import fd_hjb as fd
from abatement_game.errors import ConvergenceError, DomainError, ParameterError
from abatement_game.model import ValueSurface, profits


@pytest.fixture(scope="module")
def iso_setup(stoch_p, grid):
    iso = fd.isolated_solution(stoch_p, grid)
    zero = ValueSurface(grid, np.zeros(grid.shape))
    return iso, zero


def _investor(p, grid, iso, zero, **kw):
    return fd.solve_investor_penalized(p, grid, zero, iso.hat_v, fd.investor_bc(p, grid, iso),
                                       **kw).surface


# --- closed forms ---------------------------------------------------------------------

def test_char_roots_against_polynomial_roots(stoch_p):
    p = stoch_p
    m, n = fd.char_roots(p.mu, p.sigma, p.rho)
    roots = np.sort(np.roots([p.sigma ** 2 / 2, p.mu - p.sigma ** 2 / 2, -p.rho]).real)
    assert -m == pytest.approx(roots[0], rel=1e-12)
    assert n == pytest.approx(roots[1], rel=1e-12)
    assert n == pytest.approx(2.0518041056977867, rel=1e-12)
    assert m == pytest.approx(2.1325927663723725, rel=1e-12)


@given(mu=st.floats(-0.3, 0.3), sigma=st.floats(0.05, 1.0), rho=st.floats(0.01, 1.0))
@settings(max_examples=50, deadline=None)
def test_char_roots_are_roots(mu, sigma, rho):
    m, n = fd.char_roots(mu, sigma, rho)
    q = lambda k: sigma ** 2 / 2 * k * (k - 1) + mu * k - rho
    assert m > 0 and n > 0
    assert abs(q(n)) < 1e-9 * (1 + n * n) and abs(q(-m)) < 1e-9 * (1 + m * m)


@pytest.mark.parametrize("r, a_hat, B", [(1.0, 3.273709007855303, 3.2296885299493),
                                         (10.0, 42.28157772451725, 9768.306329980715)])
def test_isolated_boundary_frozen(stoch_p, r, a_hat, B):
    # frozen from fsolve on v_x = alpha, v_xx = 0 with unknowns (B, a_hat)
    iso = fd.isolated_solution(stoch_p)
    assert float(iso.a_hat(r)) == pytest.approx(a_hat, rel=1e-9)
    assert float(iso.B_of_r(r)) == pytest.approx(B, rel=1e-9)


def test_isolated_firm_payoff_flat_at_boundary(stoch_p):
    iso = fd.isolated_solution(stoch_p)
    for r in (0.5, 3.0):
        ah = float(iso.a_hat(r))
        e = 1e-6 * ah
        slope = (iso.w(r, ah + e) - iso.w(r, ah)) / e
        assert abs(float(slope)) < 1e-5
    assert iso.lambda_f == pytest.approx(1 / (stoch_p.rho_bar - stoch_p.mu), rel=1e-12)


def test_isolated_requires_noise():
    with pytest.raises(ParameterError):
        fd.isolated_solution(A.det_params(0.55))


# --- stencils -----------------------------------------------------------------------------

@given(nodes=st.lists(st.floats(-3, 3), min_size=3, max_size=7, unique=True),
       z=st.floats(-2, 2), seed=st.integers(0, 2 ** 16))
@settings(max_examples=80, deadline=None)
def test_fd_weights_exact_on_polynomials(nodes, z, seed):
    x = np.array(sorted(nodes))
    if np.min(np.diff(x)) < 0.05:
        return
    c = np.random.default_rng(seed).normal(size=x.size)
    P = np.polynomial.Polynomial(c)  # degree n-1 is reproduced exactly
    for m in (0, 1, 2):
        if m >= x.size:
            continue
        got = fd.fd_weights(z, x, m) @ P(x)
        assert got == pytest.approx(P.deriv(m)(z), abs=1e-7 * (1 + np.abs(c).sum()) * 10 ** m)


@given(seed=st.integers(0, 2 ** 16), n=st.integers(6, 30), dx=st.floats(0.01, 2.0))
@settings(max_examples=40, deadline=None)
def test_x_operators_exact_to_fourth_degree(seed, n, dx):
    x = np.arange(n) * dx
    P = np.polynomial.Polynomial(np.random.default_rng(seed).normal(size=5))
    D1, D2 = fd.x_operators(n, dx)
    scale = 1 + np.max(np.abs(P(x)))
    assert np.max(np.abs(D1 @ P(x) - P.deriv(1)(x))) < 1e-8 * scale / dx
    assert np.max(np.abs(D2 @ P(x) - P.deriv(2)(x))) < 1e-7 * scale / dx ** 2


def test_x_operators_need_six_nodes():
    with pytest.raises(DomainError):
        fd.x_operators(5, 0.1)


# --- investor -------------------------------------------------------------------------

def test_investor_recovers_isolated_boundary(stoch_p, grid, iso_setup):
    iso, zero = iso_setup
    v = _investor(stoch_p, grid, iso, zero)
    a = fd.extract_a_eps(v, stoch_p.alpha, 1e-4)
    r = grid.r_nodes[1:]
    assert np.max(np.abs(a.values[1:] - iso.a_hat(r))) < 2 * grid.dx


def test_investor_penalty_violation_is_order_eps(stoch_p, grid, iso_setup):
    iso, zero = iso_setup
    p = stoch_p
    v = _investor(p, grid, iso, zero)
    R, X = grid.mesh()
    contact = (X < iso.a_hat(R))[1:, 1:-1]
    # the penalty balances the equation's residual on the contact set
    res = (p.mu * X * p.alpha - p.rho * iso.hat_v.values + profits(p).Pi(R, X))[1:, 1:-1]
    scale = float(np.max(np.abs(res[contact])))
    assert fd.penalty_violation(p, v) <= 2 * p.epsilon * scale


def test_investor_boundary_stable_in_eps_and_tol_a(stoch_p, grid, iso_setup):
    iso, zero = iso_setup
    v1 = _investor(stoch_p, grid, iso, zero)
    v2 = _investor(stoch_p.replace(epsilon=stoch_p.epsilon / 2), grid, iso, zero)
    a1 = fd.extract_a_eps(v1, 1.0, 1e-4).values
    assert np.max(np.abs(a1 - fd.extract_a_eps(v2, 1.0, 1e-4).values)) < 2 * grid.dx
    assert np.max(np.abs(a1 - fd.extract_a_eps(v1, 1.0, 5e-5).values)) < grid.dx


def test_investor_comparison_in_profits(stoch_p, grid, iso_setup):
    iso, zero = iso_setup
    lo = _investor(stoch_p, grid, iso, zero)
    hi = _investor(stoch_p, grid, iso, zero, profit_scale=1.1)
    assert np.min(hi.values - lo.values) > -1e-8
    assert np.max(hi.values - lo.values) > 0


# --- firm -----------------------------------------------------------------------------

def _firm_isolated_error(p, n_x):
    g = fd.default_grid(p, n_r=41, n_x=n_x)
    iso = fd.isolated_solution(p, g)
    zero = ValueSurface(g, np.zeros(g.shape))
    w, _, _ = fd.solve_firm_pde(p, g, iso.hat_a, zero, fd.firm_bc(p, g, iso), eta_init=zero,
                                freeze_policy=True)
    R, X = g.mesh()
    above = (X >= iso.a_hat(R)) & (R >= 1.0)
    exact = iso.w(R, X)
    return float(np.max(np.abs(w.values - exact)[above] / exact[above]))


def test_firm_converges_to_isolated_payoff(stoch_p):
    # with eta = 0 and the isolated boundary the firm's payoff is C x^-m_f + lambda_f x
    errs = [_firm_isolated_error(stoch_p, n) for n in (100, 200, 400)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2


# --- outer loop -------------------------------------------------------------------------

def test_equilibrium_structure(baseline_eq, grid, stoch_p):
    eq = baseline_eq
    assert eq.report.converged and eq.report.outer_errors[-1] <= stoch_p.varpi_prime
    assert np.all(eq.b_eps.values >= eq.a_eps.values)
    assert eq.a_eps.is_nondecreasing() and eq.b_eps.is_nondecreasing()
    assert set(np.unique(eq.eta_star.values)) <= {0.0, stoch_p.eta_max}
    assert eq.report.penalty_violation < 100 * stoch_p.epsilon


def test_equilibrium_neumann_condition(baseline_eq, grid):
    x = grid.x_nodes
    w = baseline_eq.w.values
    worst = 0.0
    for i in range(1, grid.shape[0]):
        a = baseline_eq.a_eps.values[i]
        if a < x[1]:
            continue  # no reflecting boundary on this row
        js = int(np.searchsorted(x, a))
        idx = np.arange(js, js + 4)
        worst = max(worst, abs(fd.fd_weights(a, x[idx], 1) @ w[i, idx]))
    assert worst < 1e-2


def test_convergence_error_carries_last_iterate(stoch_p, grid):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(ConvergenceError) as ei:
            fd.run_algorithm(stoch_p, grid, max_outer=1)
    assert ei.value.report.outer_iters == 1
    assert ei.value.trace["equilibrium"].w.values.shape == grid.shape


def test_unknown_options_rejected(stoch_p):
    g = fd.default_grid(stoch_p, n_r=20, n_x=20)
    with pytest.raises(DomainError):
        fd.run_algorithm(stoch_p, g, x_drift="sideways")
    with pytest.raises(ValueError):
        fd.run_algorithm(stoch_p, g, r_scheme="sideways")


@pytest.mark.slow
def test_small_noise_limit_matches_zero_noise_boundary():
    p = A.det_params(0.55)
    q = p.replace(sigma=1e-3)
    g = fd.default_grid(q, n_r=200, n_x=300, r_max=20.0, x_max=130.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        eq = fd.run_algorithm(q, g, x_drift="upwind")
    sol = de.det_solve(p, g.r_nodes)
    r = g.r_nodes[(g.r_nodes > 0) & (g.r_nodes <= 10.0)]
    rel = np.abs(eq.b_eps(r) - sol.b(r)) / sol.b(r)
    assert rel.max() < 5e-2
    rel_a = np.abs(eq.a_eps(r) - sol.a(r)) / sol.a(r)
    assert np.median(rel_a) < 5e-2
