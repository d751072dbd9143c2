"""
Numerical certificates: Ito isometry, admissibility and Hilbert-Schmidt sums,
mean-square continuity, the noise energy balance and the refinement studies of the
convolution series and the weak formulation.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.integrate import trapezoid

from mild_solver.mild_solver import (
    BatchResult,
    InputSignal,
    MildTrajectory,
    ModalSystem,
    PathEnsemble,
    convolution_series,
    map_path_batches,
    replay_path,
    simulate_ensemble,
    time_grid,
    weak_residual,
)
from moment_dynamics.moment_dynamics import covariance_exact
from noise_model.noise_model import BrownianPath, hs_norm_sq, sample_path, weighted_trace
from sphs_core.errors import ConfigurationError
from sphs_core.fitting import MonteCarloComparison, compare_samples, loglog_slope, observed_order
from sphs_core.parallel import DEFAULT_BATCH_SIZE

logger = logging.getLogger(__name__)

DIVERGENCE_EXPONENT = 0.5
ORDER_THRESHOLD = 0.9


class ItoReport(BaseModel):
    t: float
    paths: int
    hs_norm_sq: float
    flat: MonteCarloComparison
    convolution: MonteCarloComparison
    passed: bool


def ito_isometry_check(system: ModalSystem, t: float, paths: int, seed: int, dt: float,
                       scheme: str = "exact-gaussian", n_se: float = 3.0, batch_size: int = DEFAULT_BATCH_SIZE,
                       workers: int = 1) -> ItoReport:
    """
    Monte-Carlo check of E||integral_0^t H dw||^2 = t Tr[H Q H*] and of
    E||W_A(t)||^2 = Tr(Gram P(t)) with P the exact covariance from Q0 = 0.
    """
    spec = system.spec
    if spec is None:
        raise ConfigurationError("Ito isometry check needs a noise specification")
    if t < 0:
        raise ConfigurationError(f"t must be non-negative, got {t}")
    if paths < 2:
        raise ConfigurationError("Ito isometry check needs at least 2 paths")
    hs = hs_norm_sq(spec)

    if t == 0:
        zero = compare_samples(np.zeros(0), 0.0, n_se)
        return ItoReport(t=t, paths=paths, hs_norm_sq=hs, flat=zero, convolution=zero, passed=True)

    profile_gram = np.real(spec.space.gram(spec.profiles))
    flat_samples = np.empty(paths)
    for p in range(paths):
        beta = sample_path(spec, np.array([0.0, t]), seed, p).dW[0]
        flat_samples[p] = beta @ profile_gram @ beta
    flat = compare_samples(flat_samples, t * hs, n_se)

    steps = max(1, int(round(t / dt)))
    times = time_grid(t / steps, steps)
    ensemble = simulate_ensemble(system, InputSignal(m=system.m), np.zeros(system.K), times, scheme, seed,
                                 paths, batch_size=batch_size, workers=workers, record_stride=steps)
    final = ensemble.coeffs[:, -1]
    conv_samples = np.real(np.einsum('pl,lk,pk->p', np.conj(final), system.gram, final))
    P = covariance_exact(system, None, times[-1])
    convolution = compare_samples(conv_samples, float(np.real(np.trace(system.gram @ P))), n_se)

    logger.info(
        f"Ito isometry at t={t}: flat {flat.estimate:.6g} +- {flat.standard_error:.2g} vs {flat.expected:.6g}; "
        f"convolution {convolution.estimate:.6g} +- {convolution.standard_error:.2g} vs {convolution.expected:.6g}"
    )
    return ItoReport(t=t, paths=paths, hs_norm_sq=hs, flat=flat, convolution=convolution,
                     passed=flat.passed and convolution.passed)


class AdmissibilityReport(BaseModel):
    t: float
    K_grid: List[int]
    partial_sums: List[float]
    growth_exponent: float
    tail_ratio: float
    tolerance: float
    verdict: str


def admissibility_terms(system: ModalSystem, t: float) -> np.ndarray:
    """sum_i q_i |h_ki|^2 |lambda_k|^2 integral_0^t exp(2 Re lambda_k s) ds per mode k."""
    if t < 0:
        raise ConfigurationError(f"t must be non-negative, got {t}")
    weight = np.sum(system.q * np.abs(system.h) ** 2, axis=1)
    lam = system.lambdas
    rate = 2 * lam.real * t
    small = np.abs(rate) < 1e-10
    time_factor = np.where(small, t, np.expm1(np.where(small, 1.0, rate)) / np.where(small, 1.0, 2 * lam.real))
    return weight * np.abs(lam) ** 2 * time_factor


def _clip_grid(K_max: int, K_grid: Sequence[int]) -> List[int]:
    grid = sorted({min(int(K), K_max) for K in K_grid if K >= 1})
    if any(K > K_max for K in K_grid):
        logger.warning(f"K_grid {list(K_grid)} clipped to the basis size K={K_max}")
    return grid


def _growth_verdict(K_grid: List[int], sums: List[float], tolerance: float):
    if len(K_grid) < 2 or sums[-1] == 0:
        return 0.0, 0.0, "convergent"
    tail = (sums[-1] - sums[-2]) / sums[-1]
    positive = [(K, s) for K, s in zip(K_grid, sums) if s > 0]
    exponent = loglog_slope(*zip(*positive[-3:])) if len(positive) >= 2 else 0.0
    if tail <= tolerance:
        verdict = "convergent"
    elif exponent > DIVERGENCE_EXPONENT:
        verdict = "divergent"
    else:
        verdict = "inconclusive"
    return float(exponent), float(tail), verdict


def admissibility_integral(system: ModalSystem, t: float, K_grid: Optional[Sequence[int]] = None,
                           tolerance: float = 1e-6) -> AdmissibilityReport:
    """
    integral_0^t ||A T(s) H||^2 ds truncated to K modes, with partial sums over K_grid
    to tell convergence from divergence. Divergence is a finding, not an error.
    """
    terms = admissibility_terms(system, t)
    if K_grid is None:
        K_grid = [2 ** j for j in range(1, int(np.log2(max(terms.size, 2))) + 1)] + [terms.size]
    grid = _clip_grid(terms.size, K_grid)
    cumulative = np.cumsum(terms)
    sums = [float(cumulative[K - 1]) for K in grid]
    exponent, tail, verdict = _growth_verdict(grid, sums, tolerance)
    if verdict != "convergent":
        logger.warning(f"Admissibility sums at K={grid}: {verdict} (growth exponent {exponent:.2f}, tail {tail:.2e})")
    return AdmissibilityReport(t=t, K_grid=grid, partial_sums=sums, growth_exponent=exponent, tail_ratio=tail,
                               tolerance=tolerance, verdict=verdict)


class HsDomainReport(BaseModel):
    value: float
    K_grid: List[int]
    partial_sums: List[float]
    tail_ratio: float
    tolerance: float
    passed: bool


def hs_domain_check(system: ModalSystem, tolerance: float = 1e-6) -> HsDomainReport:
    """sum_i q_i sum_k |lambda_k|^2 |h_ki|^2, the truncated ||A H Q^{1/2}||^2_HS, and its tail."""
    terms = np.sum(system.q * np.abs(system.h) ** 2, axis=1) * np.abs(system.lambdas) ** 2
    K = terms.size
    grid = sorted({K // 2, K} - {0}) if K > 1 else [K]
    cumulative = np.cumsum(terms)
    sums = [float(cumulative[k - 1]) for k in grid]
    value = sums[-1]
    tail = (sums[-1] - sums[0]) / value if value > 0 and len(sums) > 1 else 0.0
    passed = bool(np.isfinite(value) and tail <= tolerance)
    if not passed:
        logger.warning(f"A H Q^1/2 partial sums not settled: tail ratio {tail:.3e} > {tolerance:.1e}")
    return HsDomainReport(value=value, K_grid=grid, partial_sums=sums, tail_ratio=float(tail),
                          tolerance=tolerance, passed=passed)


class ContinuityReport(BaseModel):
    t: float
    h: List[float]
    mean_sq_increments: List[float]
    slope: float
    passed: bool


def _continuity_window(times: np.ndarray, h_steps: Sequence[int], t: float):
    h_steps = sorted(set(int(s) for s in h_steps))
    if len(h_steps) < 3:
        raise ConfigurationError("Mean-square continuity fit needs at least 3 h points")
    if h_steps[0] < 1:
        raise ConfigurationError("h steps must be positive")
    j0 = int(np.argmin(np.abs(times - t)))
    if j0 + h_steps[-1] >= times.size:
        raise ConfigurationError(f"t={t} plus the largest h runs past the recorded horizon")
    return j0, h_steps


def _sq_increments(coeffs: np.ndarray, j0: int, h_steps: Sequence[int], gram: Optional[np.ndarray]) -> np.ndarray:
    """||X(t_j0 + h) - X(t_j0)||^2 per path and h, shape (P, len(h_steps))."""
    diff = coeffs[:, [j0 + s for s in h_steps]] - coeffs[:, j0:j0 + 1]
    if gram is None:
        return np.sum(np.abs(diff) ** 2, axis=-1)
    return np.real(np.einsum('phl,lk,phk->ph', np.conj(diff), gram, diff))


def _continuity_report(times: np.ndarray, j0: int, h_steps: Sequence[int], increments: np.ndarray) -> ContinuityReport:
    h_values = [float(times[j0 + s] - times[j0]) for s in h_steps]
    slope = loglog_slope(h_values, increments)
    logger.info(f"Mean-square continuity at t={times[j0]:.4g}: slope {slope:.3f}")
    return ContinuityReport(t=float(times[j0]), h=h_values, mean_sq_increments=[float(v) for v in increments],
                            slope=slope, passed=bool(slope > 0))


def ms_continuity_check(ensemble: PathEnsemble, h_steps: Sequence[int], t: float,
                        gram: Optional[np.ndarray] = None) -> ContinuityReport:
    """Log-log slope of E||X(t+h) - X(t)||^2 against h; a positive slope certifies mean-square continuity."""
    j0, h_steps = _continuity_window(ensemble.times, h_steps, t)
    increments = np.mean(_sq_increments(ensemble.coeffs, j0, h_steps, gram), axis=0)
    return _continuity_report(ensemble.times, j0, h_steps, increments)


def ms_continuity_study(system: ModalSystem, signal: InputSignal, x0: np.ndarray, times: np.ndarray,
                        scheme: str, seed: int, paths: int, h_steps: Sequence[int], t: float,
                        batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1) -> ContinuityReport:
    """Same fit, reduced batch by batch at full time resolution instead of from a stored ensemble."""
    j0, h_steps = _continuity_window(times, h_steps, t)

    def reduce(result: BatchResult) -> np.ndarray:
        return np.sum(_sq_increments(result.coeffs, j0, h_steps, system.gram), axis=0)

    sums = map_path_batches(system, signal, x0, times, scheme, seed, paths, reduce, batch_size=batch_size,
                            workers=workers)
    return _continuity_report(times, j0, h_steps, np.sum(sums, axis=0) / paths)


class EnergyBalanceReport(BaseModel):
    t_start: float
    t_end: float
    paths: int
    rate: MonteCarloComparison
    modal: MonteCarloComparison
    full_rate: float
    modal_rate: float
    projection_deficit: float
    passed: bool


def _drift_power(system: ModalSystem, x: np.ndarray, u: np.ndarray, u_rate: np.ndarray,
                 g: np.ndarray) -> np.ndarray:
    """d/dt of the energy of eps = X + B u along the drift, per path and time."""
    drift = x * system.lambdas + g
    modal = 2 * np.real(np.einsum('...l,lk,...k->...', np.conj(x), system.gram, drift))
    mixed = 2 * np.real(np.einsum('...j,jk,...k->...', u_rate, system.cross, x)
                        + np.einsum('...j,jk,...k->...', u, system.cross, drift))
    lifted = 2 * np.einsum('...j,jl,...l->...', u_rate, system.lift_gram, u)
    return modal + mixed + lifted


def energy_balance_check(system: ModalSystem, signal: InputSignal, x0: np.ndarray, times: np.ndarray,
                         scheme: str, seed: int, paths: int, t_start: float, t_end: Optional[float] = None,
                         n_se: float = 3.0, batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1
                         ) -> EnergyBalanceReport:
    """
    Per path, the energy increment of eps over [t_start, t_end] minus the integrated
    power of the drift (the boundary power of the modal dynamics); its mean rate must
    match the full noise energy rate 1/2 Tr[H_density H Q H*]. The rate captured by
    the K modes is compared as well, so a failure can be traced to the truncation.
    """
    t_end = float(times[-1]) if t_end is None else t_end
    start = int(np.argmin(np.abs(times - t_start)))
    stop = int(np.argmin(np.abs(times - t_end)))
    if stop <= start:
        raise ConfigurationError(f"Energy window [{t_start}, {t_end}] is empty on the time grid")
    window = times[start:stop + 1]
    u = signal.value(times)[start:stop + 1]
    u_rate = signal.rate(times)[start:stop + 1]
    g = system.forcing(u, u_rate)

    def reduce(result: BatchResult) -> np.ndarray:
        x = result.coeffs[:, start:stop + 1]
        energy = system.energy(x, u)
        power = _drift_power(system, x, u, u_rate, g)
        return (energy[:, -1] - energy[:, 0] - trapezoid(power, x=window, axis=1)) / (window[-1] - window[0])

    samples = np.concatenate(map_path_batches(system, signal, x0, times, scheme, seed, paths, reduce,
                                              batch_size=batch_size, workers=workers))
    modal_rate = float(np.real(np.trace(system.gram @ system.noise_covariance())))
    spec = system.spec
    full_rate = 0.5 * weighted_trace(spec, spec.space.H) if spec is not None else 0.0
    rate = compare_samples(samples, full_rate, n_se)
    modal = compare_samples(samples, modal_rate, n_se)
    deficit = full_rate - modal_rate
    logger.info(
        f"Energy balance on [{window[0]:.3g}, {window[-1]:.3g}]: rate {rate.estimate:.6g} +- "
        f"{rate.standard_error:.2g}, full {full_rate:.6g}, modal {modal_rate:.6g}"
    )
    if abs(deficit) > n_se * rate.standard_error:
        logger.warning(f"Noise outside the span of the K={system.K} modes carries {deficit:.3g} of the energy rate; "
                       f"raise K or project the noise onto the modes")
    return EnergyBalanceReport(t_start=float(window[0]), t_end=float(window[-1]), paths=paths, rate=rate,
                               modal=modal, full_rate=full_rate, modal_rate=modal_rate,
                               projection_deficit=deficit, passed=rate.passed)


class RefinementReport(BaseModel):
    dts: List[float]
    errors: List[float]
    order: float
    paths: int


def _nested_factors(dts: Sequence[float], t_final: float):
    dts = sorted(dts, reverse=True)
    finest = dts[-1]
    steps = int(round(t_final / finest))
    factors = []
    for dt in dts:
        factor = int(round(dt / finest))
        if abs(factor * finest - dt) > 1e-9 * dt or steps % factor:
            raise ConfigurationError(f"Step {dt} is not a multiple of the finest step {finest}")
        factors.append(factor)
    return dts, time_grid(finest, steps), factors


def _fine_path(system: ModalSystem, times: np.ndarray, seed: int, p: int) -> BrownianPath:
    if system.spec is None:
        return BrownianPath(times=times, dW=np.zeros((times.size - 1, 0)), seed=seed, path_index=p)
    return sample_path(system.spec, times, seed, p)


def convolution_series_study(system: ModalSystem, dts: Sequence[float], t: float, seed: int,
                             paths: int) -> RefinementReport:
    """
    RMS distance between the convolution series and the per-step increment scheme at
    time t on shared Brownian paths, for each step size.
    """
    dts, fine_times, factors = _nested_factors(dts, t)
    sq = np.zeros((len(dts), paths))
    for p in range(paths):
        fine = _fine_path(system, fine_times, seed, p)
        for j, factor in enumerate(factors):
            path = fine.coarsen(factor)
            stepped = replay_path(system, np.zeros((path.times.size, system.K)), np.zeros(system.K), path)[-1]
            diff = convolution_series(system, path, path.times[-1]) - stepped
            sq[j, p] = np.real(np.conj(diff) @ system.gram @ diff)
    errors = [float(e) for e in np.sqrt(np.mean(sq, axis=1))]
    order = observed_order(dts, errors)
    logger.info(f"Convolution series vs increment scheme: errors {errors}, observed order {order:.3f}")
    return RefinementReport(dts=dts, errors=errors, order=order, paths=paths)


def weak_residual_study(system: ModalSystem, signal: InputSignal, x0: np.ndarray, z: np.ndarray,
                        dts: Sequence[float], t_final: float, seed: int, paths: int) -> RefinementReport:
    """RMS over paths of sup_t |weak residual| for z = sum z_k psi_k at each step size."""
    dts, fine_times, factors = _nested_factors(dts, t_final)
    sup = np.zeros((len(dts), paths))
    for p in range(paths):
        fine = _fine_path(system, fine_times, seed, p)
        for j, factor in enumerate(factors):
            path = fine.coarsen(factor)
            times = path.times
            u = signal.value(times)
            coeffs = replay_path(system, system.forcing(u, signal.rate(times)), x0, path)
            trajectory = MildTrajectory(times=times, coeffs=coeffs, inputs=u, scheme="increment", path=path)
            sup[j, p] = np.max(np.abs(weak_residual(system, trajectory, z, signal)))
    errors = [float(e) for e in np.sqrt(np.mean(sup ** 2, axis=1))]
    order = observed_order(dts, errors)
    logger.info(f"Weak residuals {errors} over dt={dts}: observed order {order:.3f}")
    return RefinementReport(dts=dts, errors=errors, order=order, paths=paths)
