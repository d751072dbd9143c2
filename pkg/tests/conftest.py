import numpy as np
import pytest

from mild_solver.mild_solver import project_system
from noise_model.noise_model import QWienerSpec, build_noise
from phs_model.phs_model import StateSpace
from spectral_basis.spectral_basis import discretize_operator, eigensystem
from sphs_core.config import NoiseConfig
from string_benchmark.string_benchmark import StringParams, build_string_model


@pytest.fixture(scope="session")
def string_benchmark():
    return build_string_model()


@pytest.fixture(scope="session")
def string_model(string_benchmark):
    return string_benchmark.model


@pytest.fixture(scope="session")
def unit_string():
    """rho = T = 1: identity density, matched impedance."""
    return build_string_model(StringParams(rho=1.0, T_modulus=1.0)).model


@pytest.fixture(scope="session")
def string_basis(string_model):
    return eigensystem(discretize_operator(string_model, 128), 16)


@pytest.fixture(scope="session")
def string_noise(string_basis):
    return build_noise(NoiseConfig(), string_basis.space, string_basis)


@pytest.fixture(scope="session")
def string_system(string_benchmark, string_basis, string_noise):
    return project_system(string_basis, string_benchmark.lift, string_noise)


@pytest.fixture(scope="session")
def quiet_system(string_system):
    return string_system.with_noise(None)


@pytest.fixture
def unit_space(unit_string):
    return StateSpace(unit_string, 64)


def zero_noise(space: StateSpace, I: int = 4) -> QWienerSpec:
    profiles = np.zeros((I, space.n, space.N + 1))
    profiles[:, 0, :] = 1.0
    return QWienerSpec(q=np.zeros(I), profiles=profiles, space=space, basis_id="sine")
