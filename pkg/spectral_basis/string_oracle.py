"""
Characteristic-equation oracle for constant-coefficient models with n = 2.

For constant P1, H the eigenproblem P1 (H x)' = lambda x has traveling-wave solutions
w = H x with w(b) = expm(lambda P1^{-1} H^{-1} L) w(a). The boundary rows then give a
2x2 matrix M(lambda) whose determinant is exactly c1 X + c0 + c_1 / X in
X = exp(lambda L / gamma). The roots in X are lifted to the lattice of logarithm
branches and polished with damped Newton on det M.
"""

import logging
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel

from phs_model.phs_model import PhsModel
from sphs_core.errors import ConfigurationError, ValidationFailure
from sphs_core.fitting import observed_order

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-10
MAX_NEWTON = 50


class CharacteristicMatrix:
    """M(lambda) = W_B R [Phi(b, a; lambda); I] for a constant-coefficient model."""

    def __init__(self, model: PhsModel):
        if model.n != 2:
            raise ConfigurationError(f"Characteristic oracle supports n=2, got n={model.n}")
        if not model.hamiltonian.is_constant:
            raise ConfigurationError("Characteristic oracle needs a constant Hamiltonian density")
        if np.any(model.P0 != 0):
            raise ConfigurationError("Characteristic oracle needs P0 = 0")
        self.model = model
        transfer = np.linalg.inv(model.P1) @ np.linalg.inv(model.hamiltonian.values)
        speeds, vectors = np.linalg.eig(transfer)
        if np.max(np.abs(speeds.imag)) > 1e-12 or abs(speeds[0].real + speeds[1].real) > 1e-12 * abs(speeds[0]):
            raise ConfigurationError("Characteristic oracle needs wave speeds +-1/gamma")
        order = np.argsort(-speeds.real)
        self.slowness = float(speeds.real[order[0]])
        self.V = np.real(vectors[:, order])
        self.V_inv = np.linalg.inv(self.V)
        self.rows = model.WB @ model.port_matrix()

    @property
    def gamma(self) -> float:
        return 1.0 / self.slowness

    def from_x(self, X: complex) -> np.ndarray:
        """M as a function of X = exp(lambda L / gamma)."""
        propagator = self.V @ np.diag([X, 1.0 / X]) @ self.V_inv
        return self.rows @ np.vstack([propagator, np.eye(2)])

    def __call__(self, lam: complex) -> np.ndarray:
        return self.from_x(np.exp(lam * self.slowness * self.model.length))

    def determinant(self, lam: complex) -> complex:
        return complex(np.linalg.det(self(lam)))


def _newton(matrix: CharacteristicMatrix, lam: complex) -> complex:
    """Damped Newton on det M; returns nan when the root does not converge."""
    for _ in range(MAX_NEWTON):
        M = matrix(lam)
        det = np.linalg.det(M)
        if abs(det) <= ROOT_TOL * np.linalg.norm(M, 2):
            return lam
        delta = 1e-6 * max(1.0, abs(lam))
        slope = (matrix.determinant(lam + delta) - matrix.determinant(lam - delta)) / (2 * delta)
        if slope == 0:
            break
        step = det / slope
        damping = 1.0
        while damping > 1.0 / 1024 and abs(matrix.determinant(lam - damping * step)) >= abs(det):
            damping /= 2
        lam = lam - damping * step
    return complex("nan")


def characteristic_roots(model: PhsModel, K: int) -> np.ndarray:
    """
    First K eigenvalues of a constant-coefficient n=2 model from its characteristic
    equation, ordered by |Im| with positive imaginary parts first.
    """
    matrix = CharacteristicMatrix(model)
    samples = np.array([0.5, 1.0, 2.0])
    dets = np.array([np.linalg.det(matrix.from_x(X)) for X in samples])
    design = np.column_stack([samples, np.ones(3), 1.0 / samples])
    coefficients = np.linalg.solve(design, dets)
    # round-off in the fit must not create roots near X = 0 or infinity
    coefficients[np.abs(coefficients) <= 1e-12 * np.max(np.abs(coefficients))] = 0.0
    c1, c0, c_1 = coefficients

    x_roots = [X for X in np.roots([c1, c0, c_1]) if np.isfinite(X) and abs(X) > 1e-14]
    if not x_roots:
        logger.warning(f"Characteristic equation of {model.name} has no finite roots")
        return np.zeros(0, dtype=complex)

    scale = matrix.gamma / model.length
    branches = K + 1
    roots: List[complex] = []
    for X in x_roots:
        base = np.log(complex(X))
        for j in range(-branches, branches + 1):
            guess = scale * (base + 2j * np.pi * j)
            lam = _newton(matrix, guess)
            if np.isnan(lam.real):
                logger.warning(f"Newton did not converge from {guess:.6g}; root omitted")
                continue
            if all(abs(lam - r) > 1e-8 * max(1.0, abs(lam)) for r in roots):
                roots.append(lam)

    roots.sort(key=lambda r: (abs(r.imag), r.imag < 0, -r.real))
    return np.array(roots[:K], dtype=complex)


def string_spectrum_oracle(rho: float, T_modulus: float, a: float, b: float, K: int) -> np.ndarray:
    """First K eigenvalues of the damped vibrating string from its characteristic equation."""
    from string_benchmark.string_benchmark import StringParams, build_string_model

    model = build_string_model(StringParams(rho=rho, T_modulus=T_modulus, a=a, b=b)).model
    return characteristic_roots(model, K)


class OracleConvergenceReport(BaseModel):
    Ns: List[int]
    modes: int
    max_errors: List[float]
    order: float


def oracle_convergence(model: PhsModel, Ns: Sequence[int], modes: int = 16) -> OracleConvergenceReport:
    """
    Max distance of the first `modes` finite-difference eigenvalues to the nearest
    characteristic root for each N, and the observed order in 1/N.
    """
    from spectral_basis.spectral_basis import discretize_operator, eigensystem

    Ns = sorted(int(N) for N in Ns)
    if len(Ns) < 2:
        raise ConfigurationError("Oracle convergence needs at least 2 grid sizes")
    if modes > Ns[0] // 4:
        raise ConfigurationError(f"{modes} modes exceed N/4 for N={Ns[0]}")
    roots = characteristic_roots(model, 2 * modes + 2)
    if roots.size == 0:
        raise ValidationFailure(f"{model.name} has no characteristic roots to compare against")
    errors = []
    for N in Ns:
        lambdas = eigensystem(discretize_operator(model, N), modes).lambdas
        errors.append(float(max(np.min(np.abs(roots - lam)) for lam in lambdas)))
    order = observed_order([1.0 / N for N in Ns], errors)
    logger.info(f"Spectral oracle errors {errors} over N={Ns}: observed order {order:.3f}")
    return OracleConvergenceReport(Ns=Ns, modes=modes, max_errors=errors, order=order)
