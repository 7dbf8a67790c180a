import numpy as np
import pytest

from epictrl.model import CASE_X0, CASE_ESTIMATE, TRUE_THETA, Domain, build_sidher, estimate_lipschitz
from epictrl.observer import assemble_sdp, solve_observer_sdp
from epictrl.sim import LinearInterpolant, generate_dataset, nominal_input, sample_grid


@pytest.fixture(scope="session")
def true_model():
    return build_sidher(TRUE_THETA)


@pytest.fixture(scope="session")
def est_model():
    return build_sidher(CASE_ESTIMATE)


@pytest.fixture(scope="session")
def simplex_ell(est_model):
    return estimate_lipschitz(est_model, Domain.sidher(simplex=True))


@pytest.fixture(scope="session")
def clean_data(true_model):
    """Noiseless 30-day record driven by the nominal input."""
    return generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1)


@pytest.fixture(scope="session")
def smooth_data(true_model):
    """Noiseless record whose true input is the interpolated nominal samples, so ubar is exact."""
    grid = sample_grid((0, 30), 0.1)
    u = LinearInterpolant(grid, nominal_input(grid))
    return generate_dataset(true_model, CASE_X0, u, (0, 30), 0.1, rtol=1e-12, atol=1e-15)


@pytest.fixture(scope="session")
def exact_gains(true_model, simplex_ell):
    return solve_observer_sdp(assemble_sdp(true_model, simplex_ell))


@pytest.fixture(scope="session")
def est_problem(est_model, simplex_ell):
    return assemble_sdp(est_model, simplex_ell)


@pytest.fixture(scope="session")
def est_gains(est_problem):
    return solve_observer_sdp(est_problem)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
