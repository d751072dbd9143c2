import unittest

import numpy as np
import pytest

from phs_model.phs_model import HamiltonianDensity, PhsModel, port_values
from spectral_basis.spectral_basis import (
    apply_operator,
    discretize_operator,
    eigensystem,
    factorize_flux,
    semigroup_apply,
    uniform_gap_study,
)
from spectral_basis.string_oracle import (
    CharacteristicMatrix,
    characteristic_roots,
    oracle_convergence,
    string_spectrum_oracle,
)
from sphs_core.errors import ConfigurationError, ValidationFailure
from string_benchmark.string_benchmark import StringParams, build_string_model

LN3 = np.log(3.0)


def even_lattice(K):
    """-ln 3 + 2 pi i k for rho = 1, T = 4: reflection (Z - 1)/(Z + 1) = 1/3 at the damper."""
    roots = [complex(-LN3, 0.0)]
    k = 1
    while len(roots) < K:
        roots += [complex(-LN3, 2 * np.pi * k), complex(-LN3, -2 * np.pi * k)]
        k += 1
    return np.array(roots[:K])


def transport_line():
    return PhsModel(n=1, a=0.0, b=1.0, P1=np.array([[1.0]]), P0=np.zeros((1, 1)),
                    hamiltonian=HamiltonianDensity(np.eye(1)), WB1=np.array([[1.0, 0.0]]),
                    WB2=np.zeros((0, 2)), WC=np.zeros((0, 2)), name="transport")


class TestStringOracle(unittest.TestCase):
    def test_even_regime_roots(self):
        roots = string_spectrum_oracle(1.0, 4.0, 0.0, 1.0, 7)
        np.testing.assert_allclose(roots, even_lattice(7), atol=1e-9)

    def test_odd_regime_roots(self):
        roots = string_spectrum_oracle(1.0, 0.25, 0.0, 1.0, 6)
        np.testing.assert_allclose(roots.real, -0.25 * LN3, atol=1e-9)
        odd = np.abs(roots.imag) / (np.pi / 4)
        np.testing.assert_allclose(odd, np.round(odd), atol=1e-9)
        self.assertTrue(np.all(np.round(odd) % 2 == 1))

    def test_matched_impedance_has_no_roots(self):
        self.assertEqual(string_spectrum_oracle(1.0, 1.0, 0.0, 1.0, 8).size, 0)

    def test_roots_solve_characteristic_equation(self):
        model = build_string_model().model
        matrix = CharacteristicMatrix(model)
        for lam in characteristic_roots(model, 5):
            self.assertLess(abs(matrix.determinant(lam)), 1e-8)

    def test_oracle_rejects_variable_density(self):
        params = StringParams(rho=[1.0, 1.0], T_modulus=[4.0, 5.0], nodes=[0.0, 1.0])
        with self.assertRaises(ConfigurationError):
            characteristic_roots(build_string_model(params).model, 4)


class TestEigensystem(unittest.TestCase):
    def test_matches_oracle(self):
        basis = eigensystem(discretize_operator(build_string_model().model, 256), 9)
        oracle = even_lattice(9)
        for lam in basis.lambdas:
            nearest = oracle[np.argmin(np.abs(oracle - lam))]
            self.assertLess(abs(lam - nearest), 1e-2 * max(abs(nearest), 1.0))

    def test_truncation_limit(self):
        generator = discretize_operator(build_string_model().model, 64)
        with self.assertRaises(ConfigurationError):
            eigensystem(generator, 17)

    def test_grid_minimum(self):
        with self.assertRaises(ConfigurationError):
            discretize_operator(transport_line(), 4)


def test_basis_is_biorthogonal(string_basis):
    assert string_basis.nice
    assert string_basis.gram_defect < 1e-8
    np.testing.assert_allclose(string_basis.biorthogonality(), np.eye(string_basis.K), atol=1e-8)


def test_conjugate_partners(string_basis):
    lambdas = string_basis.lambdas
    for k, j in enumerate(string_basis.partner):
        assert lambdas[j] == pytest.approx(np.conj(lambdas[k]))
        np.testing.assert_allclose(string_basis.phis[j], np.conj(string_basis.phis[k]))


def test_ordering_by_frequency(string_basis):
    frequencies = np.abs(string_basis.lambdas.imag)
    assert np.all(np.diff(frequencies) >= -1e-9)


def test_eigenfunctions_satisfy_boundary_rows(string_basis):
    """A_N phi = lambda phi on the interior and the W_B rows vanish on phi."""
    space = string_basis.space
    model = string_basis.model
    ports = port_values(model, space, string_basis.phis)
    np.testing.assert_allclose(ports @ model.WB.T, 0.0, atol=1e-9)
    residual = apply_operator(space, string_basis.phis[1]) - string_basis.lambdas[1] * string_basis.phis[1]
    assert np.max(np.abs(residual[:, 1:-1])) < 1e-8 * np.max(np.abs(string_basis.phis[1])) * abs(string_basis.lambdas[1])


def test_semigroup_at_zero_is_identity_on_span(string_basis):
    phi = string_basis.phis[2]
    np.testing.assert_allclose(semigroup_apply(string_basis, 0.0, phi), phi, atol=1e-7)


def test_semigroup_propagates_eigenfunction(string_basis):
    t = 0.3
    phi = string_basis.phis[1]
    expected = np.exp(string_basis.lambdas[1] * t) * phi
    np.testing.assert_allclose(semigroup_apply(string_basis, t, phi), expected, atol=1e-8)
    with pytest.raises(ConfigurationError):
        semigroup_apply(string_basis, -1.0, phi)


@pytest.fixture
def span_element(string_basis):
    rng = np.random.default_rng(20240613)
    coeffs = rng.standard_normal(string_basis.K) + 1j * rng.standard_normal(string_basis.K)
    return string_basis.synthesize(coeffs / (1.0 + np.arange(string_basis.K)))


def test_semigroup_law_on_span(string_basis, span_element):
    """T(t + s) x = T(t) T(s) x for a general element of the modal span."""
    space = string_basis.space
    # coefficients(synthesize(c)) differs from c by the biorthogonality defect
    rtol = 1e-10 + 10 * string_basis.K * string_basis.gram_defect
    for t, s in [(0.1, 0.2), (0.35, 0.0), (0.5, 1.25)]:
        direct = semigroup_apply(string_basis, t + s, span_element)
        composed = semigroup_apply(string_basis, t, semigroup_apply(string_basis, s, span_element))
        assert np.sqrt(space.norm_sq(direct - composed)) <= rtol * np.sqrt(space.norm_sq(direct))


def test_semigroup_growth_bound(string_basis, span_element):
    """||T(t) x|| <= M exp(omega t) ||x|| with M^2 the condition number of the modal Gram matrix."""
    space = string_basis.space
    omega = string_basis.abscissa
    assert omega < 0
    assert omega == pytest.approx(-LN3, abs=5e-2)
    M = np.sqrt(np.linalg.cond(string_basis.gram_phi()))
    norm = np.sqrt(space.norm_sq(span_element))
    for t in (0.0, 0.2, 0.5, 1.0, 3.0):
        propagated = np.sqrt(space.norm_sq(semigroup_apply(string_basis, t, span_element)))
        assert propagated <= M * np.exp(omega * t) * norm * (1 + 1e-6)


def test_semigroup_contracts(string_basis, span_element):
    space = string_basis.space
    norm = np.sqrt(space.norm_sq(span_element))
    previous = norm
    for t in (1.0, 2.0, 3.0):
        current = np.sqrt(space.norm_sq(semigroup_apply(string_basis, t, span_element)))
        assert current <= norm
        assert current < previous
        previous = current


def test_periodic_transport_stencil():
    generator = discretize_operator(transport_line(), 16, mode="periodic")
    N, h = 16, 1.0 / 16
    expected = np.zeros((N, N))
    for i in range(N):
        expected[i, (i + 1) % N] = 1.0 / (2 * h)
        expected[i, (i - 1) % N] = -1.0 / (2 * h)
    np.testing.assert_allclose(generator.A, expected, atol=1e-12)


def test_flux_factorization_identity_density(unit_string):
    flux = factorize_flux(unit_string, 16)
    np.testing.assert_allclose(flux.Delta, np.tile([1.0, -1.0], (17, 1)), atol=1e-12)
    for S in flux.S:
        np.testing.assert_allclose(S @ S.T, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(flux.S, np.broadcast_to(flux.S[0], flux.S.shape))
    assert flux.residual < 1e-12


def test_flux_factorization_string(string_model):
    flux = factorize_flux(string_model)
    np.testing.assert_allclose(flux.Delta[0], [2.0, -2.0], atol=1e-12)
    assert flux.residual < 1e-10


def test_flux_collision_fails(unit_string):
    degenerate = PhsModel(**{**unit_string.__dict__, "P1": np.eye(2)})
    with pytest.raises(ValidationFailure):
        factorize_flux(degenerate)


def test_uniform_gap_on_damped_string(string_model):
    report = uniform_gap_study(string_model, [128, 256], 12)
    assert report.stable
    assert min(report.gaps) == pytest.approx(2 * np.pi, rel=0.05)


def test_uniform_gap_flags_matched_impedance(unit_string):
    assert not uniform_gap_study(unit_string, [128, 256], 12).stable


def test_oracle_convergence_order(string_model):
    report = oracle_convergence(string_model, [256, 512, 1024], modes=16)
    assert report.modes == 16
    assert report.order >= 1.9
    assert report.max_errors[-1] < report.max_errors[0]
