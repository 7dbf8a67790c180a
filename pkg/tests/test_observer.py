import json

import numpy as np
import pytest

from epictrl.estimation import guess_initial_state
from epictrl.model import CASE_X0, Nonlinearity, StructuredModel
from epictrl.observer import (
    ObserverGains,
    SdpInfeasible,
    assemble_sdp,
    decay_fit,
    error_system_check,
    iss_decay_metrics,
    run_observer,
    solve_observer_sdp,
    verify_gains,
)
from epictrl.sim import DataSet, LinearInterpolant, NoiseSpec, generate_dataset, nominal_input, sample_grid


def test_block_sizes(est_problem):
    assert est_problem.block_sizes == (11, 9, 16)
    with pytest.raises(ValueError):
        est_problem.__class__(est_problem.A_hat, est_problem.G_hat, est_problem.C_hat[:, :5], est_problem.H, 1.0)
    with pytest.raises(ValueError):
        est_problem.__class__(est_problem.A_hat, est_problem.G_hat, est_problem.C_hat, est_problem.H, 1.0, 0.0)


def test_estimated_model_is_feasible(est_gains, est_problem):
    assert est_gains.feasible
    rep = verify_gains(est_gains, est_problem, tol=1e-7)
    assert rep.passed, rep.violations
    assert rep.max_eig["12b"] <= -est_problem.margin + 1e-7
    assert np.linalg.svd(est_gains.R, compute_uv=False)[0] ** 2 <= est_gains.mu + 1e-7


def test_negated_p_fails(est_gains, est_problem):
    rep = verify_gains(est_gains.with_changes(P=-est_gains.P), est_problem)
    assert not rep.passed and "P ≻ 0" in rep.violations


def test_perturbed_k_flags_12c(est_gains, est_problem):
    K = est_gains.K.copy()
    K[0, 9] += 10
    rep = verify_gains(est_gains.with_changes(K=K), est_problem)
    assert rep.max_eig["12c"] > 1e-7 and "12c" in rep.violations


def test_zero_output_matrix_is_infeasible(est_model, simplex_ell):
    m = est_model.with_matrices(C=np.zeros_like(est_model.C))
    res = solve_observer_sdp(assemble_sdp(m, simplex_ell))
    assert isinstance(res, SdpInfeasible) and not res.feasible


def linear_model(n=3):
    f = Nonlinearity("lin", n, 1, n, lambda h, u: 0.1 * np.sin(h), lambda h, u: 0.1 * np.cos(h)[..., None] * np.eye(n))
    return StructuredModel(A=-np.eye(n), G=np.eye(n), C=np.eye(n), H=np.eye(n), f=f)


def test_hurwitz_case_has_small_mu():
    prob = assemble_sdp(linear_model(), 0.1)
    gains = solve_observer_sdp(prob)
    assert gains.feasible and gains.mu < 1e-4
    assert verify_gains(gains, prob).passed


def test_zero_lipschitz_drops_coupling():
    prob = assemble_sdp(linear_model(), 0.0)
    assert prob.blocks(np.eye(3), np.eye(3), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), 0.0)[1] is None
    gains = solve_observer_sdp(prob)
    assert np.all(gains.K == 0) and verify_gains(gains, prob).passed


def test_gains_json_roundtrip(est_gains, tmp_path):
    path = tmp_path / "g.json"
    est_gains.to_json(path)
    back = ObserverGains.from_json(path)
    for name in ("P", "Q", "R", "S", "K", "L", "J", "M", "N"):
        assert np.array_equal(getattr(back, name), getattr(est_gains, name))
    doc = json.loads(path.read_text())
    assert doc["model_hash"] == est_gains.model_hash and "L" in doc


def test_observer_from_true_state_tracks(exact_gains, true_model):
    # a fine record keeps the linear interpolation of y below the tolerance
    grid = sample_grid((0, 30), 0.02)
    data = generate_dataset(true_model, CASE_X0, LinearInterpolant(grid, nominal_input(grid)), (0, 30), 0.02)
    run = run_observer(exact_gains, true_model, data, CASE_X0)
    assert run.error_norm().max() <= 1e-6


def test_observer_identity_and_convergence(exact_gains, true_model, clean_data):
    xhat0 = guess_initial_state(clean_data, seed=5)
    run = run_observer(exact_gains, true_model, clean_data, xhat0)
    assert np.allclose(run.x_hat[0], xhat0, atol=1e-12)
    recon = run.z + clean_data.y_bar @ exact_gains.L.T
    assert np.abs(recon - run.x_hat).max() <= 1e-12
    assert run.error_norm()[run.times >= 3].max() <= 1e-2
    lam, r2 = decay_fit(run)
    assert lam > 0 and r2 >= 0.9


def test_observer_rejects_other_model(exact_gains, est_model, clean_data):
    with pytest.raises(ValueError):
        run_observer(exact_gains, est_model, clean_data, CASE_X0)


def test_error_system_noiseless(exact_gains, true_model, clean_data):
    rep = error_system_check(exact_gains, true_model, clean_data, guess_initial_state(clean_data, 1))
    assert rep.max_discrepancy <= 1e-8


def test_error_system_output_noise(exact_gains, true_model):
    data = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, NoiseSpec(0.0, 1e-3, seed=4))
    rep = error_system_check(exact_gains, true_model, data, guess_initial_state(data, 1))
    assert rep.max_discrepancy <= 1e-6


def test_error_system_tracks_tolerance(exact_gains, true_model, clean_data):
    xhat0 = guess_initial_state(clean_data, 1)
    tight = error_system_check(exact_gains, true_model, clean_data, xhat0, rtol=1e-10, atol=1e-13)
    loose = error_system_check(exact_gains, true_model, clean_data, xhat0, rtol=1e-6, atol=1e-9)
    assert loose.max_discrepancy > tight.max_discrepancy
    assert loose.max_discrepancy <= 1e-4


def test_error_system_needs_truth(exact_gains, true_model, clean_data):
    bare = DataSet(clean_data.times, clean_data.u_bar, clean_data.y_bar)
    with pytest.raises(ValueError):
        error_system_check(exact_gains, true_model, bare, CASE_X0)


def test_noisy_terminal_error_bounded(est_gains, est_model, true_model, clean_data):
    xhat0 = guess_initial_state(clean_data, 0)
    baseline = run_observer(est_gains, est_model, clean_data, xhat0).terminal_error
    for seed in range(20):
        data = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, NoiseSpec(1e-3, 1e-3, seed))
        assert run_observer(est_gains, est_model, data, xhat0).terminal_error <= 10 * baseline


def test_decay_metrics_deterministic_and_validated(exact_gains, true_model, clean_data):
    runs = {0.0: [run_observer(exact_gains, true_model, clean_data, guess_initial_state(clean_data, s))
                  for s in range(2)]}
    noisy = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, NoiseSpec(1e-2, 1e-2, 1))
    runs[1e-2] = [run_observer(exact_gains, true_model, noisy, guess_initial_state(clean_data, s))
                  for s in range(2)]
    a, b = iss_decay_metrics(runs), iss_decay_metrics(runs)
    assert a.to_dict() == b.to_dict()
    assert a.medians_nondecreasing
    with pytest.raises(ValueError):
        iss_decay_metrics({1e-2: runs[1e-2]})
