import unittest

import numpy as np
import pytest

from mild_solver.mild_solver import InputSignal, initial_coefficients, simulate_ensemble, simulate_mild, time_grid
from moment_dynamics.moment_dynamics import (
    check_psd,
    covariance_exact,
    covariance_trajectory,
    energy_rate,
    expected_output_energy,
    expected_state_energy,
    lyapunov_closed_form,
    lyapunov_residual,
    mc_moments,
    mean_trajectory,
    moment_agreement,
    moment_solution,
)
from noise_model.noise_model import hs_norm_sq
from sphs_core.config import InitialConfig
from sphs_core.errors import ConfigurationError, NumericalError


class TestLyapunovClosedForm(unittest.TestCase):
    def test_scalar_ornstein_uhlenbeck(self):
        lam = np.array([-1.0 + 0.0j])
        G = np.array([[1.0 + 0.0j]])
        Q0 = np.zeros((1, 1))
        for t in (0.1, 1.0, 5.0):
            P = lyapunov_closed_form(lam, G, Q0, t)
            self.assertAlmostEqual(P[0, 0].real, (1 - np.exp(-2 * t)) / 2, places=12)

    def test_initial_covariance_decays(self):
        lam = np.array([-0.5 + 2.0j])
        P = lyapunov_closed_form(lam, np.zeros((1, 1)), np.array([[3.0]]), 2.0)
        self.assertAlmostEqual(P[0, 0].real, 3.0 * np.exp(-2.0), places=12)

    def test_time_zero_and_negative(self):
        Q0 = np.array([[2.0]])
        np.testing.assert_array_equal(lyapunov_closed_form(np.array([-1.0]), np.eye(1), Q0, 0.0), Q0)
        with self.assertRaises(ConfigurationError):
            lyapunov_closed_form(np.array([-1.0]), np.eye(1), Q0, -0.1)


class TestCheckPsd(unittest.TestCase):
    def test_accepts_psd(self):
        self.assertAlmostEqual(check_psd(np.diag([1.0, 0.0])), 0.0)

    def test_rejects_negative(self):
        with self.assertRaises(NumericalError):
            check_psd(np.diag([1.0, -0.1]))

    def test_rejects_non_hermitian(self):
        with self.assertRaises(NumericalError):
            check_psd(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_covariance_is_psd_and_hermitian(string_system):
    times = time_grid(0.05, 20)
    cov = covariance_trajectory(string_system, None, times)
    assert cov.shape == (21, string_system.K, string_system.K)
    np.testing.assert_allclose(cov, np.conj(np.transpose(cov, (0, 2, 1))), atol=1e-14)
    np.testing.assert_array_equal(cov[0], 0.0)
    np.testing.assert_allclose(covariance_exact(string_system, None, 1.0), cov[-1], atol=1e-14)


def test_initial_covariance_shape(string_system):
    with pytest.raises(ConfigurationError):
        covariance_exact(string_system, np.eye(2), 1.0)


def test_lyapunov_equation_residual(string_system):
    times = time_grid(1e-4, 1000)
    assert lyapunov_residual(string_system, None, times) < 1e-3


def test_mean_matches_noise_free_path(quiet_system):
    signal = InputSignal(kind="sine", amplitude=1.0, frequency=2.0)
    m0 = initial_coefficients(quiet_system.basis, InitialConfig(type="mode", mode=1, amplitude=0.2))
    times = time_grid(0.01, 100)
    mean = mean_trajectory(quiet_system, signal, m0, times)
    path = simulate_mild(quiet_system, signal, m0, times, "exact-gaussian", seed=1)
    np.testing.assert_allclose(mean, path.coeffs, atol=1e-12)


def test_second_moment_is_covariance_trace(string_system):
    times = time_grid(0.1, 10)
    solution = moment_solution(string_system, InputSignal(), np.zeros(string_system.K), times)
    expected = np.real(np.einsum('lk,tkl->t', string_system.gram, solution.cov))
    np.testing.assert_allclose(solution.second_moment(string_system.gram), expected)
    u = InputSignal().value(times)
    np.testing.assert_allclose(expected_state_energy(string_system, solution, u), expected)
    assert expected_output_energy(string_system, solution, u) > 0
    assert np.all(solution.modal_variances() >= 0)


def test_monte_carlo_agrees_with_exact_moments(string_system):
    signal = InputSignal(kind="sine", amplitude=1.0)
    times = time_grid(0.01, 50)
    x0 = np.zeros(string_system.K, dtype=complex)
    ensemble = simulate_ensemble(string_system, signal, x0, times, "exact-gaussian", 20240613, 1000,
                                 record_stride=10)
    solution = moment_solution(string_system, signal, x0, times)
    report = moment_agreement(ensemble, solution, string_system.gram, n_se=4.0)
    assert report.passed
    assert report.paths == 1000
    sample = mc_moments(ensemble, string_system.gram)
    assert sample.second_moment[-1] == pytest.approx(solution.second_moment(string_system.gram)[-1], rel=0.15)


def test_agreement_needs_matching_times(string_system):
    times = time_grid(0.01, 20)
    x0 = np.zeros(string_system.K, dtype=complex)
    ensemble = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 1, 4)
    solution = moment_solution(string_system, InputSignal(), x0, time_grid(0.02, 20))
    with pytest.raises(ConfigurationError):
        moment_agreement(ensemble, solution, string_system.gram)


def test_mc_moments_needs_two_paths(string_system):
    times = time_grid(0.01, 5)
    ensemble = simulate_ensemble(string_system, InputSignal(), np.zeros(string_system.K), times,
                                 "exact-gaussian", 1, 1)
    with pytest.raises(ConfigurationError):
        mc_moments(ensemble)


def test_energy_rate_of_momentum_noise(string_noise):
    # channel 0 carries H_00 = 1, so 1/2 Tr[H Q H*] in the density weight equals the energy-norm trace
    assert energy_rate(string_noise) == pytest.approx(hs_norm_sq(string_noise), rel=1e-12)
