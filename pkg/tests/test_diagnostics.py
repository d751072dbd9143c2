import numpy as np
import pytest

from diagnostics.diagnostics import (
    admissibility_integral,
    admissibility_terms,
    convolution_series_study,
    energy_balance_check,
    hs_domain_check,
    ito_isometry_check,
    ms_continuity_check,
    ms_continuity_study,
    weak_residual_study,
)
from mild_solver.mild_solver import InputSignal, project_system, simulate_ensemble, time_grid
from moment_dynamics.moment_dynamics import energy_rate
from noise_model.noise_model import build_noise, weighted_trace
from spectral_basis.spectral_basis import discretize_operator, eigensystem
from sphs_core.config import NoiseConfig, QSpec
from sphs_core.errors import ConfigurationError


@pytest.fixture(scope="module")
def modal_noise_system(string_benchmark, string_basis):
    spec = build_noise(NoiseConfig(basis="modal", I=4), string_basis.space, string_basis)
    return project_system(string_basis, string_benchmark.lift, spec)


@pytest.fixture(scope="module")
def flat_noise_system(string_benchmark, string_basis):
    spec = build_noise(NoiseConfig(I=16, q=QSpec(type="constant")), string_basis.space, string_basis)
    return project_system(string_basis, string_benchmark.lift, spec)


def test_ito_isometry(string_system):
    report = ito_isometry_check(string_system, t=0.5, paths=500, seed=20240613, dt=0.01, n_se=4.0)
    assert report.passed
    assert report.flat.expected == pytest.approx(0.5 * report.hs_norm_sq)


def test_ito_isometry_edge_cases(string_system, quiet_system):
    assert ito_isometry_check(string_system, t=0.0, paths=2, seed=1, dt=0.01).passed
    with pytest.raises(ConfigurationError):
        ito_isometry_check(quiet_system, t=1.0, paths=10, seed=1, dt=0.01)
    with pytest.raises(ConfigurationError):
        ito_isometry_check(string_system, t=1.0, paths=1, seed=1, dt=0.01)
    with pytest.raises(ConfigurationError):
        ito_isometry_check(string_system, t=-1.0, paths=10, seed=1, dt=0.01)


def test_admissibility_converges_for_modal_noise(modal_noise_system):
    report = admissibility_integral(modal_noise_system, t=1.0)
    assert report.verdict == "convergent"
    assert report.K_grid[-1] == modal_noise_system.K


def test_admissibility_diverges_for_flat_noise(flat_noise_system):
    report = admissibility_integral(flat_noise_system, t=1.0, K_grid=[2, 4, 8, 64])
    assert report.verdict == "divergent"
    assert report.growth_exponent > 0.5
    assert report.K_grid[-1] == flat_noise_system.K
    assert np.all(np.diff(report.partial_sums) > 0)


def test_admissibility_without_noise(quiet_system):
    report = admissibility_integral(quiet_system, t=1.0)
    assert report.verdict == "convergent"
    assert report.partial_sums[-1] == 0.0
    with pytest.raises(ConfigurationError):
        admissibility_terms(quiet_system, -1.0)


def test_admissibility_terms_vanish_at_time_zero(modal_noise_system):
    terms = admissibility_terms(modal_noise_system, 0.0)
    np.testing.assert_array_equal(terms, 0.0)


def test_hs_domain(modal_noise_system, flat_noise_system):
    assert hs_domain_check(modal_noise_system).passed
    flat = hs_domain_check(flat_noise_system)
    assert not flat.passed
    assert flat.tail_ratio > 1e-6


def test_mean_square_continuity(string_system):
    times = time_grid(0.01, 100)
    x0 = np.zeros(string_system.K, dtype=complex)
    ensemble = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 5, 200)
    stored = ms_continuity_check(ensemble, [1, 2, 4, 8, 16], t=0.5, gram=string_system.gram)
    streamed = ms_continuity_study(string_system, InputSignal(), x0, times, "exact-gaussian", 5, 200,
                                   [1, 2, 4, 8, 16], t=0.5, batch_size=64)
    assert stored.passed and streamed.passed
    assert stored.slope > 0.5
    np.testing.assert_allclose(stored.mean_sq_increments, streamed.mean_sq_increments, rtol=1e-10)


def test_continuity_window_errors(string_system):
    times = time_grid(0.01, 20)
    ensemble = simulate_ensemble(string_system, InputSignal(), np.zeros(string_system.K), times,
                                 "exact-gaussian", 5, 3)
    with pytest.raises(ConfigurationError):
        ms_continuity_check(ensemble, [1, 2], t=0.05)
    with pytest.raises(ConfigurationError):
        ms_continuity_check(ensemble, [1, 2, 40], t=0.05)


def test_energy_balance(string_system):
    times = time_grid(0.002, 300)
    report = energy_balance_check(string_system, InputSignal(kind="sine", amplitude=0.5),
                                  np.zeros(string_system.K), times, "exact-gaussian", 20240613, 400,
                                  t_start=0.2, n_se=4.0)
    assert report.passed
    assert report.t_start == pytest.approx(0.2)
    # the sine profiles of the default noise lie almost entirely in the span of the 16 modes
    assert report.rate.expected == pytest.approx(energy_rate(string_system.spec))
    assert report.full_rate == pytest.approx(0.5 * weighted_trace(string_system.spec, string_system.spec.space.H))
    assert abs(report.projection_deficit) <= report.rate.n_se * report.rate.standard_error
    assert report.modal.passed


def test_energy_balance_fails_when_modes_miss_the_noise(string_benchmark, string_model):
    basis = eigensystem(discretize_operator(string_model, 64), 3)
    spec = build_noise(NoiseConfig(I=16, q=QSpec(type="constant")), basis.space, basis)
    system = project_system(basis, string_benchmark.lift, spec)
    times = time_grid(0.005, 100)
    report = energy_balance_check(system, InputSignal(), np.zeros(system.K), times, "exact-gaussian", 20240613,
                                  200, t_start=0.1, n_se=4.0)
    assert report.projection_deficit > 0.5 * report.full_rate
    assert report.rate.expected == pytest.approx(report.full_rate)
    assert not report.passed


def test_energy_balance_window(string_system):
    times = time_grid(0.01, 10)
    with pytest.raises(ConfigurationError):
        energy_balance_check(string_system, InputSignal(), np.zeros(string_system.K), times,
                             "exact-gaussian", 1, 2, t_start=0.1, t_end=0.05)


def test_convolution_series_refinement(string_system):
    report = convolution_series_study(string_system, [0.004, 0.002, 0.001], t=0.2, seed=3, paths=3)
    assert report.dts == [0.004, 0.002, 0.001]
    assert report.errors[0] > report.errors[1] > report.errors[2]
    assert report.order > 0.5


def test_weak_residual_refinement(string_system):
    z = np.zeros(string_system.K, dtype=complex)
    z[1] = 1.0
    report = weak_residual_study(string_system, InputSignal(kind="sine", amplitude=1.0),
                                 np.zeros(string_system.K), z, [0.004, 0.002, 0.001], 0.2, seed=3, paths=3)
    assert report.errors[0] > report.errors[2]
    assert report.order > 0.5
