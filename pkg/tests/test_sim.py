import numpy as np
import pytest

from epictrl.model import CASE_X0, Nonlinearity, StructuredModel
from epictrl.sim import (
    ConstantInput,
    DataSet,
    IntegrationError,
    LinearInterpolant,
    NoiseSpec,
    forecast_polyfit,
    generate_dataset,
    integrate,
    interpolate,
    nominal_input,
    rk4_fixed,
    sample_grid,
)


def test_nominal_input_values():
    assert np.allclose(nominal_input(0.0), [0.015, 0.025, 0.015, 0.025])
    assert np.allclose(nominal_input(2.0), [0.025, 0.025, 0.025, 0.025])
    assert nominal_input(3 * np.pi)[0] == pytest.approx(0.005)
    with pytest.raises(ValueError):
        nominal_input(-1.0)


def test_nominal_input_breakpoints_are_jumps():
    bp = nominal_input.breakpoints(0, 30)
    assert bp.size > 0
    for t in bp:
        assert not np.allclose(nominal_input(t - 1e-7), nominal_input(t + 1e-7))


def test_equilibrium_is_constant(true_model):
    x0 = np.array([1.0, 0, 0, 0, 0, 0])
    tr = integrate(true_model, x0, ConstantInput(np.zeros(4)), (0, 10), t_eval=np.linspace(0, 10, 11))
    assert np.all(tr.states == x0)


def test_conservation(true_model, rng):
    for x0 in [CASE_X0, *rng.dirichlet(np.ones(6), size=3)]:
        tr = integrate(true_model, x0, nominal_input, (0, 30), t_eval=np.linspace(0, 30, 301))
        assert np.abs(tr.states.sum(axis=1) - 1).max() <= 1e-9


def test_matches_fixed_step_reference(true_model):
    tr = integrate(true_model, CASE_X0, nominal_input, (0, 30))
    ref = rk4_fixed(true_model, CASE_X0, nominal_input, (0, 30), 1e-4)
    assert np.abs(tr.states[-1] - ref).max() <= 1e-8


def test_integration_failure_reports_time():
    # x' = x^2 from x(0) = 1 blows up at t = 1
    f = Nonlinearity("square", 1, 1, 1, lambda h, u: h**2, lambda h, u: 2 * h[..., None])
    m = StructuredModel(A=np.zeros((1, 1)), G=np.eye(1), C=np.eye(1), H=np.eye(1), f=f)
    with pytest.raises(IntegrationError) as info:
        integrate(m, np.array([1.0]), ConstantInput(np.zeros(1)), (0, 2))
    assert info.value.last_time == pytest.approx(1.0, abs=1e-6)


def test_zero_noise_records_truth(clean_data):
    tr = clean_data.truth.trajectory
    assert np.array_equal(clean_data.y_bar, tr.outputs)
    assert np.array_equal(clean_data.u_bar, tr.inputs)


def test_dataset_determinism(true_model):
    noise = NoiseSpec(1e-3, 1e-3, seed=7)
    a = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, noise)
    b = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, noise)
    assert a.to_csv() == b.to_csv()


def test_noise_variance_band(true_model):
    d = generate_dataset(true_model, CASE_X0, nominal_input, (0, 30), 0.1, NoiseSpec(1e-3, 1e-3, seed=3))
    assert d.times.size == 301
    var = (d.y_bar - d.truth.trajectory.outputs).var(axis=0, ddof=1)
    assert np.all((0.7e-6 <= var) & (var <= 1.3e-6))


def test_interpolation(clean_data):
    u, y = interpolate(clean_data, clean_data.times[10])
    assert np.array_equal(y, clean_data.y_bar[10])
    _, y = interpolate(clean_data, 0.5 * (clean_data.times[10] + clean_data.times[11]))
    assert np.allclose(y, 0.5 * (clean_data.y_bar[10] + clean_data.y_bar[11]), rtol=0, atol=1e-15)
    const = LinearInterpolant([0, 1, 2], np.full((3, 2), 0.3))
    assert np.allclose(const(1.37), 0.3)
    with pytest.raises(ValueError):
        interpolate(clean_data, 31.0)


def test_csv_roundtrip(clean_data, tmp_path):
    path = tmp_path / "d.csv"
    clean_data.to_csv(path)
    back = DataSet.from_csv(path)
    assert np.array_equal(back.y_bar, clean_data.y_bar) and np.array_equal(back.times, clean_data.times)
    assert b"\r\n" not in path.read_bytes()


def test_sample_grid_validation():
    assert sample_grid((0, 1), 0.25).size == 5
    with pytest.raises(ValueError):
        sample_grid((0, 0), 0.1)


def test_forecast_polyfit():
    t = np.arange(10.0)
    _, v = forecast_polyfit(t, 2 * t + 1, 1, [20.0])
    assert v[0] == pytest.approx(41.0, abs=1e-10)
    vals = np.sin(t)
    _, v = forecast_polyfit(t, vals, 0, [3.0, 50.0])
    assert np.allclose(v, vals.mean())
    _, v = forecast_polyfit(t[:6], t[:6] ** 2, 2, 10.0)
    assert v[0] == pytest.approx(100.0, abs=1e-9)
    with pytest.raises(ValueError, match="rank"):
        forecast_polyfit(np.ones(5), np.ones(5), 1, [2.0])
