import warnings

import numpy as np
import pytest

from abatement_game import acceptance as A
from abatement_game import det_equilibrium as de
from abatement_game import fd_hjb as fd


@pytest.fixture(scope="session")
def det_p035():
    return A.det_params(0.35)


@pytest.fixture(scope="session")
def det_p055():
    return A.det_params(0.55)


@pytest.fixture(scope="session")
def det_sol035(det_p035):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return de.det_solve(det_p035, np.linspace(0.0, 12.0, 61))


@pytest.fixture(scope="session")
def det_sol055(det_p055):
    return de.det_solve(det_p055, np.linspace(0.0, 12.0, 61))


@pytest.fixture(scope="session")
def stoch_p():
    return A.stoch_params()


@pytest.fixture(scope="session")
def grid(stoch_p):
    return fd.default_grid(stoch_p)


@pytest.fixture(scope="session")
def baseline_eq(stoch_p, grid):
    return fd.run_algorithm(stoch_p, grid)


@pytest.fixture(scope="session")
def mc_eq():
    p = A.mc_params()
    return p, fd.run_algorithm(p, fd.default_grid(p))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in A.criterion_ids():
        res = results.get(cid)
        terminalreporter.write_line(res.line() if res else f"{cid:>4} NOT RUN")
