"""
Exact first and second moments of the modal mild solution and their Monte-Carlo
estimators.

In modal coordinates the semigroup is diagonal, so the mean solves a scalar linear
ODE per mode and the covariance P_kl(t) = E[(x_k - m_k)(x_l - m_l)*] has the closed form

    P(t) = exp((lambda_k + conj(lambda_l)) t) Q0_kl + G_kl t phi1((lambda_k + conj(lambda_l)) t)

with G = h diag(q) h^H.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel
from scipy.integrate import trapezoid

from mild_solver.mild_solver import (
    InputSignal,
    ModalSystem,
    PathEnsemble,
    check_time_grid,
    exponential_forcing,
    phi_functions,
    uniform_step,
)
from noise_model.noise_model import QWienerSpec, weighted_trace
from sphs_core.errors import ConfigurationError, NumericalError
from sphs_core.fitting import MonteCarloComparison, compare_samples

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
HERMITIAN_TOL = 1e-12


@dataclass
class MomentSolution:
    """Mean coefficients (T, K) and covariance (T, K, K) on a time grid."""

    times: np.ndarray
    mean_coeffs: np.ndarray
    cov: np.ndarray

    def second_moment(self, gram: np.ndarray) -> np.ndarray:
        """E||X(t)||^2 = m^H Gram m + Tr(Gram P)."""
        mean_part = np.real(np.einsum('tl,lk,tk->t', np.conj(self.mean_coeffs), gram, self.mean_coeffs))
        return mean_part + np.real(np.einsum('lk,tkl->t', gram, self.cov))

    def modal_variances(self) -> np.ndarray:
        """E|x_k - m_k|^2, shape (T, K)."""
        return np.real(np.diagonal(self.cov, axis1=1, axis2=2))


def check_psd(P: np.ndarray, label: str = "covariance") -> float:
    """Smallest eigenvalue of the Hermitian part; raises when below -1e-10 Tr P."""
    P = np.asarray(P)
    scale = float(np.linalg.norm(P)) if P.size else 0.0
    if scale and np.max(np.abs(P - np.conj(P).T)) > 1e-8 * scale:
        raise NumericalError(f"{label} is not Hermitian")
    smallest = float(np.linalg.eigvalsh(0.5 * (P + np.conj(P).T)).min()) if P.size else 0.0
    trace = float(np.real(np.trace(P)))
    if smallest < -PSD_TOL * max(trace, np.finfo(float).tiny):
        raise NumericalError(f"{label} is not positive semidefinite (eigenvalue {smallest:.3e}, trace {trace:.3e})")
    return smallest


def lyapunov_closed_form(lambdas: np.ndarray, G: np.ndarray, Q0: np.ndarray, t: float) -> np.ndarray:
    """P(t) for the diagonal generator diag(lambdas), noise image G and initial covariance Q0."""
    if t < 0:
        raise ConfigurationError(f"Covariance time must be non-negative, got {t}")
    rates = lambdas[:, None] + np.conj(lambdas)[None, :]
    if t == 0:
        return np.array(Q0, dtype=complex)
    phi1, _ = phi_functions(rates * t)
    return np.exp(rates * t) * Q0 + G * t * phi1


def _initial_covariance(K: int, Q0: Optional[np.ndarray]) -> np.ndarray:
    if Q0 is None:
        return np.zeros((K, K), dtype=complex)
    Q0 = np.asarray(Q0, dtype=complex)
    if Q0.shape != (K, K):
        raise ConfigurationError(f"Modal Q0 must be {K}x{K}, got {Q0.shape}")
    check_psd(Q0, "Initial covariance Q0")
    return Q0


def covariance_exact(system: ModalSystem, Q0: Optional[np.ndarray], t: float) -> np.ndarray:
    """Cov(X(t)) in modal coordinates."""
    Q0 = _initial_covariance(system.K, Q0)
    return lyapunov_closed_form(system.lambdas, system.noise_covariance(), Q0, t)


def covariance_trajectory(system: ModalSystem, Q0: Optional[np.ndarray], times: np.ndarray) -> np.ndarray:
    """Cov(X(t)) on a time grid, shape (T, K, K); every P(t) is checked to be PSD."""
    Q0 = _initial_covariance(system.K, Q0)
    G = system.noise_covariance()
    out = np.stack([lyapunov_closed_form(system.lambdas, G, Q0, float(t)) for t in times])
    for P in out:
        check_psd(P)
    return out


def mean_trajectory(system: ModalSystem, signal: InputSignal, m0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """
    m_k(t) = exp(lambda_k t) m_k(0) + integral exp(lambda_k (t - s)) g_k(s) ds with
    g = a u - b u', stepped exactly with the exponential trapezoid rule.
    """
    times = check_time_grid(times)
    dt = uniform_step(times)
    g = system.forcing(signal.value(times), signal.rate(times))
    forcing = exponential_forcing(system.lambdas, g, dt)
    decay = np.exp(system.lambdas * dt)
    mean = np.empty((times.size, system.K), dtype=complex)
    mean[0] = m0
    for n in range(times.size - 1):
        mean[n + 1] = decay * mean[n] + forcing[n]
    return mean


def moment_solution(system: ModalSystem, signal: InputSignal, m0: np.ndarray, times: np.ndarray,
                    Q0: Optional[np.ndarray] = None) -> MomentSolution:
    times = check_time_grid(times)
    return MomentSolution(
        times=times,
        mean_coeffs=mean_trajectory(system, signal, m0, times),
        cov=covariance_trajectory(system, Q0, times),
    )


def lyapunov_residual(system: ModalSystem, Q0: Optional[np.ndarray], times: np.ndarray) -> float:
    """
    Max over interior grid points of |dP/dt - (Lambda P + P Lambda^H + G)|, with dP/dt
    by central differences, relative to max |G|.
    """
    times = check_time_grid(times)
    P = covariance_trajectory(system, Q0, times)
    G = system.noise_covariance()
    lam = system.lambdas
    derivative = (P[2:] - P[:-2]) / (times[2:] - times[:-2])[:, None, None]
    rhs = lam[None, :, None] * P[1:-1] + P[1:-1] * np.conj(lam)[None, None, :] + G
    scale = max(float(np.max(np.abs(G))), np.finfo(float).tiny)
    return float(np.max(np.abs(derivative - rhs)) / scale)


@dataclass
class MonteCarloMoments:
    """Sample moments over the paths of an ensemble at its recorded times."""

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    second_moment: np.ndarray
    second_moment_se: np.ndarray
    modal_second_moment: np.ndarray
    modal_second_moment_se: np.ndarray
    paths: int


def mc_moments(ensemble: PathEnsemble, gram: Optional[np.ndarray] = None) -> MonteCarloMoments:
    """
    Unbiased sample mean and covariance per time point.

    Standard errors come from the sample variance over paths; mean_se holds the
    errors of the real and imaginary parts as se_re + 1j se_im. With a Gram matrix the
    squared state norm E||X||^2 is estimated too, otherwise the Euclidean norm of the
    coefficients is used.
    """
    x = ensemble.coeffs
    P = x.shape[0]
    if P < 2:
        raise ConfigurationError(f"Monte-Carlo moments need at least 2 paths, got {P}")
    mean = np.mean(x, axis=0)
    centered = x - mean
    cov = np.einsum('ptk,ptl->tkl', centered, np.conj(centered)) / (P - 1)
    mean_se = (np.std(x.real, axis=0, ddof=1) + 1j * np.std(x.imag, axis=0, ddof=1)) / np.sqrt(P)

    if gram is None:
        norms = np.sum(np.abs(x) ** 2, axis=-1)
    else:
        norms = np.real(np.einsum('ptl,lk,ptk->pt', np.conj(x), gram, x))
    modal = np.abs(x) ** 2
    return MonteCarloMoments(
        times=ensemble.times,
        mean=mean,
        cov=cov,
        mean_se=mean_se,
        second_moment=np.mean(norms, axis=0),
        second_moment_se=np.std(norms, axis=0, ddof=1) / np.sqrt(P),
        modal_second_moment=np.mean(modal, axis=0),
        modal_second_moment_se=np.std(modal, axis=0, ddof=1) / np.sqrt(P),
        paths=P,
    )


class MomentAgreement(BaseModel):
    t: float
    paths: int
    mean_projection: MonteCarloComparison
    covariance_trace: MonteCarloComparison
    second_moment: MonteCarloComparison
    passed: bool


def moment_agreement(ensemble: PathEnsemble, solution: MomentSolution, gram: np.ndarray, index: int = -1,
                     n_se: float = 3.0) -> MomentAgreement:
    """
    Monte-Carlo paths against the exact moments at one recorded time: the projection
    E<X, m> against ||m||^2, E|x - m|^2 against Tr P and E||X||^2 against its closed form.
    """
    t = float(ensemble.times[index])
    if not np.isclose(t, solution.times[index], rtol=0.0, atol=1e-12 * max(1.0, abs(t))):
        raise ConfigurationError(f"Ensemble time {t} does not match the moment grid time {solution.times[index]}")
    x = ensemble.coeffs[:, index]
    m = solution.mean_coeffs[index]
    P = solution.cov[index]
    projection = np.real(x @ gram.T @ np.conj(m))
    centered = np.sum(np.abs(x - m) ** 2, axis=1)
    second = np.real(np.einsum('pl,lk,pk->p', np.conj(x), gram, x))
    report = MomentAgreement(
        t=t,
        paths=ensemble.paths,
        mean_projection=compare_samples(projection, float(np.real(np.conj(m) @ gram @ m)), n_se),
        covariance_trace=compare_samples(centered, float(np.real(np.trace(P))), n_se),
        second_moment=compare_samples(second, float(solution.second_moment(gram)[index]), n_se),
        passed=False,
    )
    report.passed = report.mean_projection.passed and report.covariance_trace.passed and report.second_moment.passed
    if not report.passed:
        logger.warning(f"Monte-Carlo moments at t={t} disagree with the exact moments beyond {n_se} standard errors")
    return report


def energy_rate(spec: QWienerSpec) -> float:
    """
    Expected energy injected per unit time by the noise, 1/2 Tr[H_density H Q H*].

    Only defined for real-valued models.
    """
    model = spec.space.model
    if not model.is_real or np.iscomplexobj(spec.profiles):
        raise ConfigurationError("The noise energy rate is defined for real-valued models only")
    return 0.5 * weighted_trace(spec, spec.space.H)


def expected_state_energy(system: ModalSystem, solution: MomentSolution, u: np.ndarray) -> np.ndarray:
    """E||eps(t)||^2 = ||m + B u||^2 + Tr(Gram P) on the solution's time grid."""
    mean_part = system.energy(solution.mean_coeffs, u)
    return mean_part + np.real(np.einsum('lk,tkl->t', system.gram, solution.cov))


def expected_output_energy(system: ModalSystem, solution: MomentSolution, u: np.ndarray) -> float:
    """E integral ||y||^2 dt over the solution's time grid."""
    y_mean = solution.mean_coeffs @ system.c.T + u @ system.d.T
    fluctuation = np.real(np.einsum('pk,tkl,pl->t', system.c, solution.cov, np.conj(system.c)))
    integrand = np.sum(np.abs(y_mean) ** 2, axis=-1) + fluctuation
    return float(trapezoid(integrand, x=solution.times))
