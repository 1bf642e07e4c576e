import warnings

import numpy as np
import pytest

from abatement_game import acceptance as A
from abatement_game import det_equilibrium as de
from abatement_game.errors import DomainError
from abatement_game.model import BoundaryCurve
from abatement_game.simulate import SimConfig, monte_carlo_stats, path_normals, simulate_paths

R_NODES = np.linspace(0.0, 50.0, 101)
A_LIN = BoundaryCurve(R_NODES, 0.5 + 0.05 * R_NODES)
B_LIN = BoundaryCurve(R_NODES, 3.0 + 0.2 * R_NODES)
ZERO = BoundaryCurve(R_NODES, np.zeros_like(R_NODES))


@pytest.fixture(scope="module")
def p():
    return A.mc_params()


def _run(p, a=A_LIN, b=B_LIN, **kw):
    cfg = SimConfig(**{"n_paths": 200, "t_end": 4.0, "x0": 4.0, "r0": 0.5, "dt": 0.01, **kw})
    return simulate_paths(p, a, b, cfg)


@pytest.mark.parametrize("bad", [dict(n_paths=0), dict(t_end=0.0), dict(dt=-1.0), dict(x0=0.0),
                                 dict(r0=-1.0), dict(record_every=0), dict(seed=-3)])
def test_config_validation(bad):
    with pytest.raises(DomainError):
        SimConfig(**bad)


def test_step_never_exceeds_dt():
    cfg = SimConfig(t_end=1.0, dt=0.3)
    assert cfg.n_steps == 4 and cfg.step == pytest.approx(0.25)
    assert SimConfig(t_end=5.0).step == pytest.approx(5e-3)


def test_deterministic_and_chunk_independent(p):
    b1 = _run(p, seed=7, chunk=13)
    b2 = _run(p, seed=7, chunk=2048)
    for f in ("X", "R", "nu", "contact"):
        assert np.array_equal(getattr(b1, f), getattr(b2, f))
    b3 = _run(p, seed=8)
    assert not np.array_equal(b1.X, b3.X)


def test_paths_do_not_depend_on_path_count(p):
    small = _run(p, n_paths=3, seed=2)
    big = _run(p, n_paths=50, seed=2)
    assert np.array_equal(small.X, big.X[:3])
    z = path_normals(2, 1, 10)
    assert np.array_equal(z, path_normals(2, 1, 20)[:10])
    assert not np.array_equal(z, path_normals(2, 2, 10))


def test_reflection_and_monotone_controls(p):
    bd = _run(p, seed=1)
    assert np.all(bd.X >= A_LIN(bd.R, warn=False) - 1e-12)
    assert np.all(np.diff(bd.nu, axis=1) >= 0)
    dR = np.diff(bd.R, axis=1)
    step = p.eta_max * 0.01
    assert np.all(np.isclose(dR, 0.0) | np.isclose(dR, step))
    assert bd.contact.any()


def test_start_below_boundary_is_lifted(p):
    bd = _run(p, x0=0.1, n_paths=5)
    a0 = float(A_LIN(0.5))
    assert np.allclose(bd.X[:, 0], a0) and np.allclose(bd.nu[:, 0], a0 - 0.1)
    assert bd.contact.all()


def test_no_boundary_contact_means_no_investment(p):
    bd = _run(p, a=ZERO, b=ZERO, seed=3)
    assert not bd.contact.any()
    assert np.all(bd.nu == 0.0)


def test_uncontrolled_mean_matches_euler_expectation(p):
    # with both boundaries at 0 the scheme is X_{k+1} = X_k (1 + mu dt + sigma sqrt(dt) Z)
    bd = _run(p, a=ZERO, b=ZERO, n_paths=4000, seed=11)
    expect = 4.0 * (1 + p.mu * 0.01) ** 400
    se = bd.X[:, -1].std(ddof=1) / np.sqrt(bd.n_paths)
    assert abs(bd.X[:, -1].mean() - expect) < 4 * se
    assert np.all(bd.R == 0.5)


def test_zero_noise_matches_trajectory():
    p = A.det_params(0.55)
    sol = de.det_solve(p, np.linspace(0.0, 40.0, 401))
    x0 = 2.0 * sol.b_at(0.5)
    bd = simulate_paths(p, sol.a, sol.b, SimConfig(n_paths=2, t_end=15.0, x0=x0, r0=0.5,
                                                   dt=0.005))
    assert np.array_equal(bd.X[0], bd.X[1])
    tr = de.det_trajectory(p, sol, 0.5, x0, 15.0, 0.005)
    err = np.max(np.abs(bd.X[0] - np.interp(bd.times, tr.times, tr.X)))
    assert err < 5 * 0.005 * (1 + x0)
    assert bd.nu[0, -1] == pytest.approx(tr.nu[-1], rel=5e-2)


def test_stats_match_direct_numpy(p):
    bd = _run(p, seed=4, record_every=50)
    st = monte_carlo_stats(bd)
    n = bd.n_paths
    assert np.allclose(st.mean_R, bd.R.mean(0))
    assert np.allclose(st.se_R, bd.R.std(0, ddof=1) / np.sqrt(n))
    assert np.allclose(st.mean_nu_over_X, (bd.nu / bd.X).mean(0))
    assert np.allclose(st.mean_R_over_X, (bd.R / bd.X).mean(0))
    dR = bd.R[:, -1] - 0.5
    assert st.nu_over_dR[-1] == pytest.approx(bd.nu[:, -1].mean() / dR.mean())
    assert st.nu_over_dR[0] == 0.0


def test_ratio_standard_error_matches_batch_spread(p):
    # delta-method standard error vs the spread of independent batch estimates
    ests, ses = [], []
    for s in range(40):
        st = monte_carlo_stats(_run(p, n_paths=100, seed=100 + s, record_every=400))
        ests.append(st.nu_over_dR[-1])
        ses.append(st.se_nu_over_dR[-1])
    ratio = np.std(ests, ddof=1) / np.mean(ses)
    assert 0.7 < ratio < 1.4


def test_standard_error_scales_like_clt(p):
    s1 = monte_carlo_stats(_run(p, n_paths=500, seed=5, record_every=400))
    s4 = monte_carlo_stats(_run(p, n_paths=2000, seed=6, record_every=400))
    assert s4.se_R[-1] / s1.se_R[-1] == pytest.approx(0.5, rel=0.15)
    assert s4.se_nu_over_X[-1] / s1.se_nu_over_X[-1] == pytest.approx(0.5, rel=0.15)


def test_leaving_sampled_range_warns(p):
    short = BoundaryCurve(np.linspace(0, 1, 11), 0.5 + 0.05 * np.linspace(0, 1, 11))
    with pytest.warns(RuntimeWarning):
        _run(p, a=short, b=short, x0=0.6, n_paths=5)
