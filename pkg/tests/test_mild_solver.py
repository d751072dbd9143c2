import unittest

import numpy as np
import pytest

from mild_solver.mild_solver import (
    InputSignal,
    convolution_series,
    gaussian_increment_factor,
    initial_coefficients,
    map_path_batches,
    phi_functions,
    reconstruct_epsilon,
    replay_path,
    simulate_ensemble,
    simulate_mild,
    simulate_modal,
    time_grid,
    uniform_step,
    weak_residual,
)
from noise_model.noise_model import sample_path
from sphs_core.config import InitialConfig, InputConfig
from sphs_core.errors import ConfigurationError


class TestPhiFunctions(unittest.TestCase):
    def test_values(self):
        phi1, phi2 = phi_functions(np.array([0.0, 1.0, -2.0 + 1.0j]))
        z = -2.0 + 1.0j
        np.testing.assert_allclose(phi1, [1.0, np.e - 1.0, (np.exp(z) - 1) / z])
        np.testing.assert_allclose(phi2, [0.5, np.e - 2.0, (np.exp(z) - 1 - z) / z**2])

    def test_series_branch_is_continuous(self):
        below, above = 0.99e-4, 1.01e-4
        lo = phi_functions(np.array([below]))
        hi = phi_functions(np.array([above]))
        self.assertAlmostEqual(lo[0][0].real, hi[0][0].real, places=5)
        self.assertAlmostEqual(lo[1][0].real, hi[1][0].real, places=5)


class TestInputSignal(unittest.TestCase):
    def test_sine_rate(self):
        signal = InputSignal(kind="sine", amplitude=2.0, frequency=0.5, m=2)
        t = np.linspace(0.0, 1.0, 2001)
        self.assertEqual(signal.value(t).shape, (2001, 2))
        numeric = InputSignal(kind="sine", amplitude=2.0, frequency=0.5, derivative="central-difference")
        np.testing.assert_allclose(numeric.rate(t)[:, 0], signal.rate(t)[:, 0], atol=1e-5)

    def test_ramp_norm(self):
        signal = InputSignal(kind="ramp", amplitude=1.0)
        self.assertAlmostEqual(signal.l2_norm_sq(np.linspace(0.0, 1.0, 1001)), 1.0 / 3.0, places=6)

    def test_from_config_and_scaling(self):
        signal = InputSignal.from_config(InputConfig(type="constant", amplitude=0.5), m=1)
        np.testing.assert_allclose(signal.scaled(4.0).value([0.0, 1.0]), [[2.0], [2.0]])
        np.testing.assert_allclose(signal.rate([0.0, 1.0]), 0.0)

    def test_rejects_unknown(self):
        with self.assertRaises(ConfigurationError):
            InputSignal(kind="square")
        with self.assertRaises(ConfigurationError):
            InputSignal(kind="sine", derivative="spline")
        with self.assertRaises(ConfigurationError):
            InputSignal(kind="sine", derivative="central-difference").rate([0.0, 1.0])


class TestTimeGrid(unittest.TestCase):
    def test_uniform(self):
        np.testing.assert_allclose(time_grid(0.25, 4), [0.0, 0.25, 0.5, 0.75, 1.0])
        self.assertEqual(uniform_step(time_grid(0.25, 4)), 0.25)

    def test_rejects_bad_grids(self):
        with self.assertRaises(ConfigurationError):
            time_grid(0.0, 4)
        with self.assertRaises(ConfigurationError):
            uniform_step(np.array([0.0, 0.1, 0.3]))
        with self.assertRaises(ConfigurationError):
            uniform_step(np.array([0.0]))


def test_projection_shapes(string_system):
    K = string_system.K
    assert string_system.a.shape == (K, 1)
    assert string_system.b.shape == (K, 1)
    assert string_system.h.shape == (K, 16)
    assert string_system.c.shape == (1, K)
    assert string_system.d.shape == (1, 1)
    noise = string_system.noise_covariance()
    np.testing.assert_allclose(noise, np.conj(noise).T, atol=1e-14)


def test_initial_mode_pairs_conjugates(string_basis):
    x0 = initial_coefficients(string_basis, InitialConfig(type="mode", mode=1, amplitude=0.5))
    partner = string_basis.partner[1]
    assert partner != 1
    assert x0[1] == x0[partner] == 0.5
    assert np.count_nonzero(x0) == 2
    np.testing.assert_array_equal(initial_coefficients(string_basis, InitialConfig()), 0.0)
    with pytest.raises(ConfigurationError):
        initial_coefficients(string_basis, InitialConfig(type="mode", mode=string_basis.K))


def test_free_modes_decay_exactly(quiet_system):
    x0 = initial_coefficients(quiet_system.basis, InitialConfig(type="mode", mode=1, amplitude=1.0))
    times = time_grid(0.01, 100)
    trajectory = simulate_mild(quiet_system, InputSignal(), x0, times, "exact-gaussian", seed=1)
    expected = x0 * np.exp(np.outer(times, quiet_system.lambdas))
    np.testing.assert_allclose(trajectory.coeffs, expected, atol=1e-12)
    assert trajectory.path is None


def test_constant_input_reaches_steady_state(quiet_system):
    signal = InputSignal(kind="constant", amplitude=1.0)
    times = time_grid(0.01, 2000)
    x0 = np.zeros(quiet_system.K, dtype=complex)
    trajectory = simulate_mild(quiet_system, signal, x0, times, "exact-gaussian", seed=1)
    steady = -quiet_system.a[:, 0] / quiet_system.lambdas
    np.testing.assert_allclose(trajectory.coeffs[-1], steady, atol=1e-8)


def test_reconstruction_matches_modal_energy(quiet_system):
    signal = InputSignal(kind="sine", amplitude=1.0, frequency=1.0)
    x0 = initial_coefficients(quiet_system.basis, InitialConfig(type="mode", mode=1, amplitude=0.3))
    times = time_grid(0.01, 50)
    trajectory = simulate_mild(quiet_system, signal, x0, times, "exact-gaussian", seed=1)
    state = reconstruct_epsilon(quiet_system, times, trajectory.coeffs, trajectory.inputs)
    assert not np.iscomplexobj(state.eps)
    np.testing.assert_allclose(state.energy, quiet_system.energy(trajectory.coeffs, trajectory.inputs), atol=1e-8)
    np.testing.assert_allclose(state.y, quiet_system.output(trajectory.coeffs, trajectory.inputs), atol=1e-8)


def test_deterministic_weak_identity(quiet_system):
    signal = InputSignal(kind="sine", amplitude=1.0, frequency=1.0)
    times = time_grid(0.001, 1000)
    x0 = np.zeros(quiet_system.K, dtype=complex)
    trajectory = simulate_mild(quiet_system, signal, x0, times, "exact-gaussian", seed=1)
    z = np.zeros(quiet_system.K, dtype=complex)
    z[:3] = 1.0
    residual = weak_residual(quiet_system, trajectory, z, signal)
    assert np.max(np.abs(residual)) < 1e-4


def test_weak_residual_needs_path(string_system):
    times = time_grid(0.01, 10)
    trajectory = simulate_mild(string_system, InputSignal(), np.zeros(string_system.K), times, "exact-gaussian", 3)
    with pytest.raises(ConfigurationError):
        weak_residual(string_system, trajectory, np.ones(string_system.K), InputSignal())
    with pytest.raises(ConfigurationError):
        weak_residual(string_system, trajectory, np.ones(2), InputSignal())


def test_exact_increment_covariance(string_system):
    dt = 0.01
    L = gaussian_increment_factor(string_system, dt)
    K = string_system.K
    xi = L[:K] + 1j * L[K:]
    lam = string_system.lambdas
    rates = (lam[:, None] + np.conj(lam)[None, :]) * dt
    expected = string_system.noise_covariance() * dt * phi_functions(rates)[0]
    np.testing.assert_allclose(xi @ np.conj(xi).T, expected, atol=1e-12)


def test_increment_scheme_replays(string_system):
    signal = InputSignal(kind="sine", amplitude=0.5)
    times = time_grid(0.005, 200)
    x0 = np.zeros(string_system.K, dtype=complex)
    trajectory = simulate_mild(string_system, signal, x0, times, "increment", seed=9, path_index=4)
    np.testing.assert_array_equal(trajectory.path.dW, sample_path(string_system.spec, times, 9, 4).dW)
    g = string_system.forcing(signal.value(times), signal.rate(times))
    np.testing.assert_allclose(replay_path(string_system, g, x0, trajectory.path), trajectory.coeffs, atol=1e-13)


def test_convolution_series_matches_simulation(string_system):
    times = time_grid(1e-4, 5000)
    x0 = np.zeros(string_system.K, dtype=complex)
    trajectory = simulate_mild(string_system, InputSignal(), x0, times, "increment", seed=5)
    series = convolution_series(string_system, trajectory.path, 0.5)
    simulated = trajectory.coeffs[-1]
    assert np.linalg.norm(series - simulated) <= 0.05 * np.linalg.norm(simulated)
    np.testing.assert_array_equal(convolution_series(string_system, trajectory.path, 0.0), 0.0)
    with pytest.raises(ConfigurationError):
        convolution_series(string_system, trajectory.path, 0.12345)


def test_unknown_scheme(string_system):
    times = time_grid(0.01, 4)
    g = np.zeros((5, string_system.K))
    with pytest.raises(ConfigurationError):
        simulate_modal(string_system, g, np.zeros(string_system.K), times, "milstein", 1, [0])
    with pytest.raises(ConfigurationError):
        simulate_modal(string_system, g[:3], np.zeros(string_system.K), times, "increment", 1, [0])


@pytest.mark.parametrize("scheme", ["exact-gaussian", "increment"])
def test_ensemble_independent_of_workers_and_batches(string_system, scheme):
    times = time_grid(0.01, 50)
    x0 = np.zeros(string_system.K, dtype=complex)
    signal = InputSignal(kind="sine", amplitude=1.0)
    serial = simulate_ensemble(string_system, signal, x0, times, scheme, 42, 37, batch_size=8, workers=1)
    threaded = simulate_ensemble(string_system, signal, x0, times, scheme, 42, 37, batch_size=8, workers=4)
    rebatched = simulate_ensemble(string_system, signal, x0, times, scheme, 42, 37, batch_size=5, workers=2)
    np.testing.assert_array_equal(serial.coeffs, threaded.coeffs)
    np.testing.assert_allclose(serial.coeffs, rebatched.coeffs, rtol=1e-12, atol=1e-14)
    single = simulate_mild(string_system, signal, x0, times, scheme, 42, path_index=11)
    np.testing.assert_allclose(serial.coeffs[11], single.coeffs, rtol=1e-12, atol=1e-14)


def test_ensemble_seed_changes_paths(string_system):
    times = time_grid(0.01, 10)
    x0 = np.zeros(string_system.K, dtype=complex)
    first = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 1, 4)
    second = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 2, 4)
    assert not np.allclose(first.coeffs[:, -1], second.coeffs[:, -1])


def test_record_stride(string_system):
    times = time_grid(0.01, 40)
    x0 = np.zeros(string_system.K, dtype=complex)
    full = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 3, 6)
    strided = simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 3, 6, record_stride=10)
    np.testing.assert_allclose(strided.times, [0.0, 0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(strided.coeffs, full.coeffs[:, ::10])
    with pytest.raises(ConfigurationError):
        simulate_ensemble(string_system, InputSignal(), x0, times, "exact-gaussian", 3, 6, record_stride=0)


def test_ensemble_keeps_increments(string_system):
    times = time_grid(0.01, 20)
    x0 = np.zeros(string_system.K, dtype=complex)
    ensemble = simulate_ensemble(string_system, InputSignal(), x0, times, "increment", 8, 5, batch_size=2,
                                 keep_increments=True)
    np.testing.assert_array_equal(ensemble.brownian_path(3).dW, sample_path(string_system.spec, times, 8, 3).dW)
    bare = simulate_ensemble(string_system, InputSignal(), x0, times, "increment", 8, 5)
    with pytest.raises(ConfigurationError):
        bare.brownian_path(0)


def test_map_path_batches_order(string_system):
    times = time_grid(0.01, 5)
    x0 = np.zeros(string_system.K, dtype=complex)
    starts = map_path_batches(string_system, InputSignal(), x0, times, "increment", 1, 10,
                              lambda result: int(result.path_indices[0]), batch_size=3, workers=3)
    assert starts == [0, 3, 6, 9]
    with pytest.raises(ConfigurationError):
        map_path_batches(string_system, InputSignal(), x0, times, "increment", 1, 0, len)
