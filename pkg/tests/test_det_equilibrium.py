import math
import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from abatement_game import acceptance as A
from abatement_game import det_equilibrium as de
from abatement_game.errors import DomainError, RegimeError
from abatement_game.model import a_of_r


def test_f_M_closed_form_against_quadrature():
    p = A.det_params(0.35).replace(mu=-0.05)
    # eta_max int_0^1 exp(0.05 s) ds, by high-precision quadrature
    assert de.f_M(p, 1.0) == pytest.approx(1.0254219275204808, rel=1e-14)
    assert float(mp.quad(lambda s: mp.e ** (mp.mpf("0.05") * s), [0, 1])) == pytest.approx(
        float(de.f_M(p, 1.0)), rel=1e-14)
    assert de.f_M(p.replace(mu=0.0), 2.5) == pytest.approx(2.5)
    with pytest.raises(DomainError):
        de.f_M(p, -1.0)


@given(r=st.floats(0.0, 8.0), dx=st.floats(0.01, 40.0))
@settings(max_examples=30, deadline=None)
def test_tau_M_zero_drift_bisection(r, dx):
    p = A.det_params(0.55).replace(mu=0.0)
    x = float(a_of_r(p, r)) + dx
    oracle = brentq(lambda t: x - p.eta_max * t - float(a_of_r(p, r + p.eta_max * t)), 0.0, 1e3,
                    xtol=1e-14)
    assert de.tau_M(p, r, x) == pytest.approx(oracle, rel=1e-9, abs=1e-11)


@pytest.mark.parametrize("gamma, w1, tm", [(0.35, 17.635202658896986, 1.3457600650822457),
                                           (0.55, 32.0871244847074, 0.9555815150274476)])
def test_w1_and_tau_M_frozen(gamma, w1, tm):
    # frozen from a 30-digit mpmath evaluation of the same payoff integral
    p = A.det_params(gamma)
    assert de.tau_M(p, 1.0, 5.0) == pytest.approx(tm, rel=1e-12)
    assert de.w1_eval(p, 1.0, 5.0) == pytest.approx(w1, rel=1e-10)


@pytest.mark.parametrize("gamma, r, b", [(0.35, 0.0, 5.672298196685656),
                                         (0.35, 2.0, 7.328636628718765),
                                         (0.55, 0.0, 17.661895525997927),
                                         (0.55, 2.0, 24.494310783117683)])
def test_b_root_frozen(gamma, r, b):
    # frozen from brentq on h assembled from a finite-difference d_x w1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert de.b_root(A.det_params(gamma), r) == pytest.approx(b, rel=1e-7)


def test_h_quadrature_form_matches_definition():
    p = A.det_params(0.55)
    for r, x in [(0.5, 4.0), (1.0, 12.0), (3.0, 30.0)]:
        e = 1e-5 * x
        wx = (de.w1_eval(p, r, x + e) - de.w1_eval(p, r, x - e)) / (2 * e)
        direct = p.mu * x * wx - p.rho_bar * de.w1_eval(p, r, x) + x
        assert de.h_eval(p, r, x) == pytest.approx(direct, abs=1e-7)


def test_signs_of_partials():
    p = A.det_params(0.55)
    for r in (0.5, 2.0, 5.0):
        a = float(a_of_r(p, r))
        for x in a + np.array([0.5, 5.0, 30.0]):
            tx, tr = de.tau_M_partials(p, r, x)
            hr, hx = de.h_partials(p, r, x)
            assert tx > 0 and tr < 0
            assert hr < 0 and hx > 0
            e = 1e-5
            assert de.w1_eval(p, r + e, x) > de.w1_eval(p, r - e, x)
        assert de.h_eval(p, r, a * (1 + 1e-9) + 1e-9) < 0
        assert de.h_eval(p, r, 10 * de.b_root(p, r)) > 0


def test_b_curve_euler_vs_projection():
    p = A.det_params(0.55)
    r = np.linspace(0.0, 4.0, 201)
    raw = de.b_curve(p, r, tol_newton=1e-10, project=False)
    for i in (50, 120, 200):
        assert abs(raw.values[i] - de.b_root(p, r[i])) / raw.values[i] < 1e-2
    proj = de.b_curve(p, r[::20])
    for ri, bi in zip(proj.r_nodes, proj.values):
        assert bi == pytest.approx(de.b_root(p, ri), rel=1e-9)


def test_b_increases_with_gamma(det_sol035, det_sol055):
    r = np.linspace(0.0, 10.0, 11)
    assert np.all(det_sol055.b(r) > det_sol035.b(r))


def test_value_functions_continuous_at_boundaries(det_p055, det_sol055):
    p, sol = det_p055, det_sol055
    d = 1e-7
    for r in (0.5, 2.0, 6.0):
        a, b = float(a_of_r(p, r)), sol.b_at(r)
        for f in (de.v_eval, de.w_eval):
            assert abs(f(p, sol, r, b + d) - f(p, sol, r, b - d)) < 1e-5
        assert abs(de.v_eval(p, sol, r, a + d) - de.v_eval(p, sol, r, a - d)) < 1e-5


def test_v_slope_alpha_below_a(det_p055, det_sol055):
    p, sol = det_p055, det_sol055
    a = float(a_of_r(p, 3.0))
    slope = (de.v_eval(p, sol, 3.0, 0.6 * a) - de.v_eval(p, sol, 3.0, 0.2 * a)) / (0.4 * a)
    assert slope == pytest.approx(p.alpha, rel=1e-10)


def test_zero_drift_boundary_equates_payoffs():
    p = A.det_params(0.55).replace(mu=0.0)
    b = de.b_root(p, 1.0)
    assert b > float(a_of_r(p, 1.0))
    assert de.w1_eval(p, 1.0, b) == pytest.approx(b / p.rho_bar, rel=1e-9)


def test_trajectory_phases_and_capacity_balance(det_p055, det_sol055):
    p, sol = det_p055, det_sol055
    r0 = 0.5
    x0 = 2.0 * sol.b_at(r0)
    tr = de.det_trajectory(p, sol, r0, x0, 30.0, 0.002)
    assert 0 < tr.tau_b < tr.tau_M < 30.0
    assert tr.tau_b == pytest.approx(math.log(2.0) / -p.mu, rel=1e-8)
    a_path = a_of_r(p, tr.R)
    assert np.all(tr.X >= a_path - 1e-9)
    late = tr.times > tr.tau_M
    assert np.allclose(tr.X[late], a_path[late], rtol=1e-12)
    # nu_T = X_T - X_0 - mu int X dt + int eta dt
    eta = np.where(tr.times >= tr.tau_b, p.eta_max, 0.0)
    integ = np.trapezoid(p.mu * tr.X - eta, tr.times)
    assert tr.nu[-1] == pytest.approx(tr.X[-1] - x0 - integ, rel=1e-4)
    assert tr.nu[tr.times <= tr.tau_M].max() == 0.0


def test_start_below_a_buys_lump_sum(det_p055, det_sol055):
    p, sol = det_p055, det_sol055
    a0 = float(a_of_r(p, 1.0))
    tr = de.det_trajectory(p, sol, 1.0, 0.25 * a0, 1.0, 0.01)
    assert tr.X[0] == pytest.approx(a0) and tr.nu[0] == pytest.approx(0.75 * a0)


def test_regime_errors():
    with pytest.raises(RegimeError):
        de.b_curve(A.det_params(0.55).replace(sigma=0.1), [0.0, 1.0])
    with pytest.raises(RegimeError):
        de.tau_M(A.det_params(0.55).replace(mu=0.05), 1.0, 5.0)
    with pytest.raises(DomainError):
        de.tau_M(A.det_params(0.55), 1.0, 0.0)


def test_non_monotone_marginal_warns():
    with pytest.warns(RuntimeWarning):
        de.check_monotone_marginal(A.det_params(0.35))
    assert de.check_monotone_marginal(A.det_params(0.55))
