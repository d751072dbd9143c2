"""
Yosida approximation of the extended system on K^m (+) X.

The extended state (u, X) evolves with A^e = [[0, 0], [AB, A]], input map
B^e = [I; -B] for the input rate u~ = u' and noise [0; H]. Replacing B^e by
lambda R(lambda, A^e) B^e gives, mode by mode,

    du = u~ dt
    dx_k = (lambda_k x_k + a_k . u + (a_k - lambda b_k) . u~ / (lambda - lambda_k)) dt + h_k dbeta

which tends to the exact modal system as lambda grows.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.integrate import cumulative_simpson, cumulative_trapezoid

from mild_solver.mild_solver import (
    InputSignal,
    ModalSystem,
    check_time_grid,
    replay_path,
    simulate_modal,
    time_grid,
)
from noise_model.noise_model import BrownianPath, sample_path
from sphs_core.errors import ConfigurationError
from sphs_core.fitting import observed_order
from sphs_core.parallel import DEFAULT_BATCH_SIZE, batch_ranges

logger = logging.getLogger(__name__)


@dataclass
class ExtendedTrajectory:
    """u part (T, m) and modal X part (T, K) of X^e_lambda for one path."""

    times: np.ndarray
    u_part: np.ndarray
    x_part: np.ndarray
    lam: float
    path: Optional[BrownianPath] = None


def check_resolvent(system: ModalSystem, lam: float) -> None:
    """lambda must be real, positive and at least half the spectral gap away from every eigenvalue."""
    if not np.isfinite(lam) or lam <= 0:
        raise ConfigurationError(f"Yosida parameter must be real and positive, got {lam}")
    distance = float(np.min(np.abs(lam - system.lambdas)))
    gap = system.basis.gap
    if np.isfinite(gap) and distance <= gap / 2:
        raise ConfigurationError(
            f"Yosida parameter {lam} lies within {distance:.3g} of the spectrum (half gap {gap / 2:.3g})"
        )


def yosida_input_map(system: ModalSystem, lam: float) -> np.ndarray:
    """Modal X part of lambda R(lambda, A^e) B^e, shape (K, m)."""
    return (system.a - lam * system.b) / (lam - system.lambdas)[:, None]


def _integrate_rate(signal: InputSignal, times: np.ndarray, rate: np.ndarray) -> np.ndarray:
    """u part of the extended state: u(0) plus the trapezoid integral of u~."""
    integral = cumulative_trapezoid(rate, x=times, axis=0)
    return signal.value(times[:1]) + np.concatenate([np.zeros((1, signal.m)), integral])


def _extended_forcing(system: ModalSystem, u_part: np.ndarray, rate: np.ndarray, lam: float) -> np.ndarray:
    return u_part @ system.a.T + rate @ yosida_input_map(system, lam).T


def yosida_simulate(system: ModalSystem, signal: InputSignal, lam: float, times: np.ndarray,
                    scheme: str, seed: int, path_index: int = 0, x0: Optional[np.ndarray] = None) -> ExtendedTrajectory:
    """
    One path of the Yosida-approximate extended system driven by u~ = u'.

    The u part starts at u(0) and integrates u~ with the trapezoid rule. Paths with
    the same (seed, path_index) share their noise with simulate_mild.
    """
    check_resolvent(system, lam)
    times = check_time_grid(times)
    rate = signal.rate(times)
    u_part = _integrate_rate(signal, times, rate)
    x0 = np.zeros(system.K, dtype=complex) if x0 is None else x0
    g = _extended_forcing(system, u_part, rate, lam)
    result = simulate_modal(system, g, x0, times, scheme, seed, [path_index], keep_increments=True)
    path = None
    if result.dW is not None:
        path = BrownianPath(times=times, dW=result.dW[0], seed=seed, path_index=path_index)
    return ExtendedTrajectory(times=times, u_part=u_part, x_part=result.coeffs[0], lam=lam, path=path)


class YosidaReport(BaseModel):
    lambdas: List[float]
    sup_errors: List[float]
    monotone: bool
    paths: int
    residual_dts: List[float] = []
    residuals: List[float] = []
    residual_order: float = 0.0


def _extended_sq_distance(system: ModalSystem, du: np.ndarray, dx: np.ndarray) -> np.ndarray:
    modal = np.real(np.einsum('...l,lk,...k->...', np.conj(dx), system.gram, dx))
    return np.sum(du ** 2, axis=-1) + modal


def integral_residual(system: ModalSystem, trajectory: ExtendedTrajectory, signal: InputSignal) -> np.ndarray:
    """
    ||X^e_lambda(t) - X^e(0) - integral (A^e X^e_lambda + B^e_lambda u~) - integral H^e dw|| on the time grid.
    """
    times = trajectory.times
    rate = signal.rate(times)
    x = trajectory.x_part
    drift = x * system.lambdas + _extended_forcing(system, trajectory.u_part, rate, trajectory.lam)
    x_integral = np.concatenate([np.zeros((1, system.K)), cumulative_simpson(drift, x=times, axis=0)])
    u_integral = np.concatenate([np.zeros((1, system.m)), cumulative_simpson(rate, x=times, axis=0)])
    if system.I:
        if trajectory.path is None:
            raise ConfigurationError("Integral residual with noise needs the increment scheme's Brownian path")
        noise = trajectory.path.beta() @ system.h.T
    else:
        noise = np.zeros_like(x)
    rx = x - x[0] - x_integral - noise
    ru = trajectory.u_part - trajectory.u_part[0] - u_integral
    return np.sqrt(_extended_sq_distance(system, ru, rx))


def yosida_convergence(system: ModalSystem, signal: InputSignal, lambdas: Sequence[float], times: np.ndarray,
                       scheme: str, seed: int, paths: int, x0: Optional[np.ndarray] = None,
                       batch_size: int = DEFAULT_BATCH_SIZE) -> YosidaReport:
    """
    sup over t of E||X^e_lambda(t) - X^e(t)||^2 for each lambda, with common noise
    between the approximate and the exact extended system.
    """
    times = check_time_grid(times)
    x0 = np.zeros(system.K, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex)
    u = signal.value(times)
    rate = signal.rate(times)
    exact_g = system.forcing(u, rate)
    u_part = _integrate_rate(signal, times, rate)
    u_error = np.sum((u_part - u) ** 2, axis=-1)

    errors = []
    for lam in lambdas:
        check_resolvent(system, lam)
        g = _extended_forcing(system, u_part, rate, lam)
        total = np.zeros(times.size)
        for start, stop in batch_ranges(paths, batch_size):
            indices = range(start, stop)
            exact = simulate_modal(system, exact_g, x0, times, scheme, seed, indices).coeffs
            approx = simulate_modal(system, g, x0, times, scheme, seed, indices).coeffs
            total += np.sum(_extended_sq_distance(system, np.zeros((1, system.m)), approx - exact), axis=0)
        errors.append(float(np.max(total / paths + u_error)))
        logger.info(f"Yosida lambda={lam:g}: sup_t E||X^e_lambda - X^e||^2 = {errors[-1]:.6e}")

    monotone = bool(all(later < earlier for earlier, later in zip(errors, errors[1:])))
    if not monotone:
        logger.warning(f"Yosida errors do not decrease monotonically: {errors}")
    return YosidaReport(lambdas=list(lambdas), sup_errors=errors, monotone=monotone, paths=paths)


def residual_study(system: ModalSystem, signal: InputSignal, lam: float, dts: Sequence[float], t_final: float,
                   seed: int, paths: int) -> Tuple[List[float], float]:
    """
    RMS over paths of the sup-in-time integral residual for each step size, with the
    coarse Brownian paths obtained by summing the increments of the finest one.

    Returns:
        (residuals ordered like sorted(dts, reverse=True), observed order)
    """
    check_resolvent(system, lam)
    dts = sorted(dts, reverse=True)
    finest = dts[-1]
    steps = int(round(t_final / finest))
    fine_times = time_grid(finest, steps)
    factors = []
    for dt in dts:
        factor = int(round(dt / finest))
        if abs(factor * finest - dt) > 1e-9 * dt or steps % factor:
            raise ConfigurationError(f"Step {dt} is not a multiple of the finest step {finest}")
        factors.append(factor)

    sup = np.zeros((len(dts), paths))
    for p in range(paths):
        if system.I:
            fine = sample_path(system.spec, fine_times, seed, p)
        else:
            fine = BrownianPath(times=fine_times, dW=np.zeros((steps, 0)), seed=seed, path_index=p)
        for j, factor in enumerate(factors):
            trajectory = _replay(system, signal, lam, fine.coarsen(factor))
            sup[j, p] = np.max(integral_residual(system, trajectory, signal))
    residuals = [float(r) for r in np.sqrt(np.mean(sup ** 2, axis=1))]
    order = observed_order(dts, residuals)
    logger.info(f"Integral residuals {residuals} over dt={dts}: observed order {order:.3f}")
    return residuals, order


def _replay(system: ModalSystem, signal: InputSignal, lam: float, path: BrownianPath) -> ExtendedTrajectory:
    """Increment-scheme Yosida path driven by a given Brownian path."""
    times = path.times
    rate = signal.rate(times)
    u_part = _integrate_rate(signal, times, rate)
    g = _extended_forcing(system, u_part, rate, lam)
    x = replay_path(system, g, np.zeros(system.K, dtype=complex), path)
    return ExtendedTrajectory(times=times, u_part=u_part, x_part=x, lam=lam, path=path)
