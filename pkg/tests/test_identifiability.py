import json

import numpy as np
import pytest

from epictrl.identifiability import local_rank_test
from epictrl.model import Nonlinearity, StructuredModel
from epictrl.sim import ConstantInput, nominal_input

DAILY = np.arange(31.0)


@pytest.fixture(scope="module")
def interior_point():
    return np.random.default_rng(4).dirichlet(np.ones(6))


@pytest.fixture(scope="module")
def full_report(true_model, interior_point):
    return local_rank_test(true_model, interior_point, true_model.theta, nominal_input, DAILY)


def test_full_rank(full_report):
    assert full_report.jacobian_cols == 15
    assert full_report.numerical_rank == 15
    assert full_report.verdict == "identifiable+observable"
    assert full_report.null_space.shape == (15, 0)


def test_report_serialization(full_report, tmp_path):
    doc = json.loads(full_report.to_json(tmp_path / "r.json"))
    assert doc["numerical_rank"] == 15 and len(doc["singular_values"]) == 15
    text = full_report.zero_pattern_csv()
    assert text.splitlines()[0].split(",")[6] == "beta"
    assert len(text.splitlines()) == 1 + 31 * 10


def test_no_outputs_gives_rank_zero(true_model, interior_point):
    m = true_model.with_matrices(C=np.zeros_like(true_model.C))
    rep = local_rank_test(m, interior_point, None, nominal_input, DAILY)
    assert rep.numerical_rank == 0
    assert np.all(rep.singular_values == 0)


def test_identity_output_map():
    f = Nonlinearity.constant(np.zeros(3), n_in=3, n_u=1)
    m = StructuredModel(A=np.zeros((3, 3)), G=np.eye(3), C=np.eye(3), H=np.eye(3), f=f)
    rep = local_rank_test(m, np.array([0.2, 0.3, 0.5]), None, ConstantInput([0.0]), [0.0, 1.0, 2.0])
    assert rep.numerical_rank == 3
    assert np.allclose(rep.singular_values, rep.singular_values[0], rtol=1e-8)


def test_rank_stable_under_denser_sampling(true_model, interior_point, full_report):
    rep = local_rank_test(true_model, interior_point, true_model.theta, nominal_input, np.arange(0, 30.5, 0.5))
    assert rep.numerical_rank == full_report.numerical_rank


@pytest.mark.parametrize("step", [1e-4, 1e-6])
def test_verdict_robust_to_fd_step(true_model, interior_point, step):
    rep = local_rank_test(true_model, interior_point, true_model.theta, nominal_input, DAILY, fd_step=step)
    assert rep.verdict == "identifiable+observable"


def test_removing_reports_changes_pattern(true_model, interior_point, full_report):
    keep = list(range(2, 10))
    rep = local_rank_test(true_model, interior_point, true_model.theta, nominal_input, DAILY, output_index=keep)
    cols = [rep.column_names.index(n) for n in ("nu", "tau")]
    full_rows = full_report.zero_pattern.reshape(31, 10, 15)[:, keep].reshape(-1, 15)
    # same rows, but the pattern as a whole loses the y1/y2 entries for nu and tau
    assert full_report.zero_pattern[:, cols].sum() > rep.zero_pattern[:, cols].sum()
    assert np.array_equal(full_rows, rep.zero_pattern)
    if rep.numerical_rank < 15:
        assert rep.null_space.shape == (15, 15 - rep.numerical_rank)
        assert np.allclose(rep.jacobian @ rep.null_space, 0, atol=1e-6 * rep.singular_values[0])


def test_validation(true_model, interior_point):
    with pytest.raises(ValueError):
        local_rank_test(true_model, interior_point, true_model.theta, nominal_input, [])
    with pytest.raises(ValueError):
        local_rank_test(true_model, interior_point, true_model.theta, nominal_input, DAILY, fd_step=0)
