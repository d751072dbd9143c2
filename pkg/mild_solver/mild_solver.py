"""
Spectral simulation of mild solutions.

With the change of variables X = eps - B u the boundary-controlled system becomes

    dX = (A X + AB u - B u') dt + H dw

and, in the eigenbasis, every mode is a scalar linear SDE

    dx_k = (lambda_k x_k + a_k . u - b_k . u') dt + sum_i h_ki dbeta_i

with a_k = <AB e_j, psi_k>, b_k = <B e_j, psi_k> and h_ki = <Hf_i, psi_k>. The linear
part is propagated exactly; forcing uses the exponential trapezoid rule.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, trapezoid

from noise_model.noise_model import (
    GAUSSIAN_STREAM,
    BrownianPath,
    QWienerSpec,
    check_time_grid,
    path_generator,
    sample_path,
)
from phs_model.phs_model import BoundaryLift, port_values
from spectral_basis.spectral_basis import ModalBasis, apply_operator
from sphs_core.config import InitialConfig, InputConfig
from sphs_core.errors import ConfigurationError, NumericalError
from sphs_core.parallel import DEFAULT_BATCH_SIZE, batch_ranges, ordered_map

logger = logging.getLogger(__name__)

SCHEMES = ("exact-gaussian", "increment")
SERIES_THRESHOLD = 1e-4
CLIP_TOL = 1e-12
UNIFORM_TOL = 1e-9


def phi_functions(z: np.ndarray):
    """phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2, by series near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    expm1 = np.expm1(safe)
    phi1 = np.where(small, 1 + z / 2 + z**2 / 6 + z**3 / 24, expm1 / safe)
    phi2 = np.where(small, 0.5 + z / 6 + z**2 / 24 + z**3 / 120, (expm1 - safe) / safe**2)
    return phi1, phi2


@dataclass(frozen=True)
class InputSignal:
    """
    Deterministic boundary input, the same scalar signal on every input channel.

    kinds: zero, constant (u = A), sine (u = A sin(2 pi f t + phase)), ramp (u = A t).
    """

    kind: str = "zero"
    amplitude: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0
    derivative: str = "analytic"
    m: int = 1

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "sine", "ramp"):
            raise ConfigurationError(f"Unknown input kind {self.kind!r}")
        if self.derivative not in ("analytic", "central-difference"):
            raise ConfigurationError(f"Unknown input derivative mode {self.derivative!r}")

    @classmethod
    def from_config(cls, config: InputConfig, m: int) -> "InputSignal":
        return cls(kind=config.type, amplitude=config.amplitude, frequency=config.frequency,
                   phase=config.phase, derivative=config.derivative, m=m)

    def scaled(self, factor: float) -> "InputSignal":
        return replace(self, amplitude=self.amplitude * factor)

    def _scalar(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(t)
        if self.kind == "constant":
            return np.full_like(t, self.amplitude)
        if self.kind == "sine":
            return self.amplitude * np.sin(2 * np.pi * self.frequency * t + self.phase)
        return self.amplitude * t

    def _scalar_rate(self, t: np.ndarray) -> np.ndarray:
        if self.kind in ("zero", "constant"):
            return np.zeros_like(t)
        if self.kind == "sine":
            omega = 2 * np.pi * self.frequency
            return self.amplitude * omega * np.cos(omega * t + self.phase)
        return np.full_like(t, self.amplitude)

    def value(self, t: np.ndarray) -> np.ndarray:
        """u(t) with shape (len(t), m)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.repeat(self._scalar(t)[:, None], self.m, axis=1)

    def rate(self, t: np.ndarray) -> np.ndarray:
        """u'(t) with shape (len(t), m), analytic or by second-order central differences on t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.derivative == "analytic":
            scalar = self._scalar_rate(t)
        else:
            if t.size < 3:
                raise ConfigurationError("Central-difference input derivative needs at least 3 time points")
            scalar = np.gradient(self._scalar(t), t, edge_order=2)
        return np.repeat(scalar[:, None], self.m, axis=1)

    def l2_norm_sq(self, times: np.ndarray) -> float:
        """integral of |u|^2 over the time grid."""
        return float(trapezoid(np.sum(self.value(times) ** 2, axis=1), x=times))


@dataclass(frozen=True)
class ModalSystem:
    """
    The boundary-controlled system projected on a ModalBasis.

    a, b: (K, m) input maps of AB and B; h: (K, I) noise map; c: (p, K) and d: (p, m)
    output maps; gram: Gram matrix of the phis; cross[j, k] = <phi_k, B e_j>;
    lift_gram[l, j] = <B e_j, B e_l>.
    """

    basis: ModalBasis
    lift: BoundaryLift
    spec: Optional[QWienerSpec]
    a: np.ndarray
    b: np.ndarray
    h: np.ndarray
    q: np.ndarray
    c: np.ndarray
    d: np.ndarray
    gram: np.ndarray
    cross: np.ndarray
    lift_gram: np.ndarray

    @property
    def lambdas(self) -> np.ndarray:
        return self.basis.lambdas

    @property
    def K(self) -> int:
        return self.basis.K

    @property
    def m(self) -> int:
        return self.lift.m

    @property
    def I(self) -> int:
        return self.q.size

    @property
    def model(self):
        return self.basis.model

    def noise_covariance(self) -> np.ndarray:
        """G = h diag(q) h^H, the modal image of H Q H*."""
        return (self.h * self.q) @ np.conj(self.h).T

    def with_noise(self, spec: Optional[QWienerSpec]) -> "ModalSystem":
        h, q = _noise_maps(self.basis, spec)
        return replace(self, spec=spec, h=h, q=q)

    def forcing(self, u: np.ndarray, u_rate: np.ndarray) -> np.ndarray:
        """g_k = a_k . u - b_k . u' sampled on the time grid, shape (T, K)."""
        return u @ self.a.T - u_rate @ self.b.T

    def energy(self, coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Energy of eps = sum x_k phi_k + B u for coeffs (..., K) and inputs (..., m)."""
        modal = np.real(np.einsum('...l,lk,...k->...', np.conj(coeffs), self.gram, coeffs))
        mixed = np.real(np.einsum('...j,jk,...k->...', u, self.cross, coeffs))
        lifted = np.einsum('...j,jl,...l->...', u, self.lift_gram, u)
        return modal + 2 * mixed + lifted

    def output(self, coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
        """y = W_C-ports of eps, shape (..., p)."""
        y = coeffs @ self.c.T + u @ self.d.T
        return np.real(y) if self.basis.is_real else y


def _noise_maps(basis: ModalBasis, spec: Optional[QWienerSpec]):
    if spec is None:
        return np.zeros((basis.K, 0), dtype=complex), np.zeros(0)
    return spec.coefficients(basis), spec.q.copy()


def project_system(basis: ModalBasis, lift: BoundaryLift, spec: Optional[QWienerSpec] = None) -> ModalSystem:
    """Modal coefficients of the lift, its image under the differential operator, noise and output maps."""
    space = basis.space
    model = basis.model
    lift_profiles = lift.profiles(space.zeta)
    a = basis.coefficients(apply_operator(space, lift_profiles)).T
    b = basis.coefficients(lift_profiles).T
    h, q = _noise_maps(basis, spec)
    c = model.WC @ port_values(model, space, basis.phis).T
    d = model.WC @ port_values(model, space, lift_profiles).T
    return ModalSystem(
        basis=basis,
        lift=lift,
        spec=spec,
        a=a,
        b=b,
        h=h,
        q=q,
        c=c,
        d=d,
        gram=basis.gram_phi(),
        cross=space.gram(basis.phis, lift_profiles),
        lift_gram=np.real(space.gram(lift_profiles)),
    )


def initial_coefficients(basis: ModalBasis, config: InitialConfig) -> np.ndarray:
    """Deterministic X0; a complex mode of a real model is paired with its conjugate so X0 is real."""
    x0 = np.zeros(basis.K, dtype=complex)
    if config.type == "mode":
        if config.mode >= basis.K:
            raise ConfigurationError(f"Initial mode {config.mode} is outside the basis (K={basis.K})")
        x0[config.mode] = config.amplitude
        partner = basis.partner[config.mode]
        if basis.is_real and partner != config.mode:
            x0[partner] = config.amplitude
    return x0


def uniform_step(times: np.ndarray) -> float:
    times = check_time_grid(times)
    steps = np.diff(times)
    dt = float(steps[0])
    if np.max(np.abs(steps - dt)) > UNIFORM_TOL * dt:
        raise ConfigurationError("Modal schemes need a uniform time grid")
    return dt


def time_grid(dt: float, steps: int) -> np.ndarray:
    if dt <= 0:
        raise ConfigurationError(f"Time step must be positive, got {dt}")
    return dt * np.arange(steps + 1)


def exponential_forcing(lambdas: np.ndarray, g: np.ndarray, dt: float) -> np.ndarray:
    """Step integrals of exp(lambda (t_{n+1} - s)) g(s) for g linear on each step; g is (T, K)."""
    phi1, phi2 = phi_functions(lambdas * dt)
    return dt * (g[:-1] * phi1 + (g[1:] - g[:-1]) * phi2)


def gaussian_increment_factor(system: ModalSystem, dt: float) -> np.ndarray:
    """
    Real square root L (2K x 2K) of the covariance of (Re xi, Im xi), where xi is the
    exact stochastic convolution increment over one step.

    Raises:
        NumericalError: the covariance has a negative eigenvalue beyond rounding
    """
    lam = system.lambdas
    K = system.K
    weighted = system.h * system.q
    C = (weighted @ np.conj(system.h).T) * dt * phi_functions((lam[:, None] + np.conj(lam)[None, :]) * dt)[0]
    C_pseudo = (weighted @ system.h.T) * dt * phi_functions((lam[:, None] + lam[None, :]) * dt)[0]

    S = np.zeros((2 * K, 2 * K))
    S[:K, :K] = 0.5 * np.real(C + C_pseudo)
    S[K:, K:] = 0.5 * np.real(C - C_pseudo)
    S[:K, K:] = 0.5 * np.imag(C_pseudo - C)
    S[K:, :K] = S[:K, K:].T
    S = 0.5 * (S + S.T)

    w, V = np.linalg.eigh(S)
    scale = max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    if w.min() < -CLIP_TOL * scale:
        raise NumericalError(f"Convolution increment covariance is not PSD (eigenvalue {w.min():.3e})")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class BatchResult:
    """Full-resolution trajectories of consecutive paths."""

    path_indices: np.ndarray
    coeffs: np.ndarray
    dW: Optional[np.ndarray] = None


def _propagate(system: ModalSystem, forcing: np.ndarray, x0: np.ndarray, dt: float, scheme: str,
               seed: int, indices: Sequence[int], times: np.ndarray, factor: Optional[np.ndarray],
               keep_increments: bool) -> BatchResult:
    P, S, K = len(indices), forcing.shape[0], system.K
    decay = np.exp(system.lambdas * dt)
    noisy = system.I > 0

    drive = None
    dW = None
    if noisy and scheme == "increment":
        dW = np.stack([sample_path(system.spec, times, seed, i).dW for i in indices])
        drive = decay * (dW @ system.h.T)
    elif noisy:
        normals = np.stack([path_generator(seed, i, GAUSSIAN_STREAM).standard_normal((S, 2 * K)) for i in indices])
        real = normals @ factor.T
        drive = real[..., :K] + 1j * real[..., K:]

    coeffs = np.empty((P, S + 1, K), dtype=complex)
    coeffs[:, 0] = x0
    x = np.broadcast_to(x0, (P, K)).astype(complex)
    for n in range(S):
        x = decay * x + forcing[n]
        if drive is not None:
            x = x + drive[:, n]
        coeffs[:, n + 1] = x
    return BatchResult(path_indices=np.asarray(indices), coeffs=coeffs, dW=dW if keep_increments else None)


def simulate_modal(system: ModalSystem, g: np.ndarray, x0: np.ndarray, times: np.ndarray, scheme: str,
                   seed: int, path_indices: Sequence[int], keep_increments: bool = False) -> BatchResult:
    """
    Propagate modal SDEs driven by the sampled forcing g (T, K) for the given paths.

    scheme "exact-gaussian" draws the exact convolution increment with its cross-mode
    covariance; "increment" uses exp(lambda dt) h dbeta and shares the Brownian path
    of sample_path.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"Unknown scheme {scheme!r}; expected one of {SCHEMES}")
    dt = uniform_step(times)
    if g.shape != (times.size, system.K):
        raise ConfigurationError(f"Forcing must have shape {(times.size, system.K)}, got {g.shape}")
    forcing = exponential_forcing(system.lambdas, g, dt)
    factor = gaussian_increment_factor(system, dt) if scheme == "exact-gaussian" and system.I else None
    return _propagate(system, forcing, np.asarray(x0, dtype=complex), dt, scheme, seed, path_indices,
                      times, factor, keep_increments)


@dataclass
class MildTrajectory:
    """Modal coefficients x_k(t) of one path, with the Brownian path when it was sampled."""

    times: np.ndarray
    coeffs: np.ndarray
    inputs: np.ndarray
    scheme: str
    path: Optional[BrownianPath] = None


def simulate_mild(system: ModalSystem, signal: InputSignal, x0: np.ndarray, times: np.ndarray,
                  scheme: str, seed: int, path_index: int = 0) -> MildTrajectory:
    """One mild-solution path X(t) in modal coordinates."""
    times = check_time_grid(times)
    u = signal.value(times)
    g = system.forcing(u, signal.rate(times))
    result = simulate_modal(system, g, x0, times, scheme, seed, [path_index], keep_increments=True)
    path = None
    if result.dW is not None:
        path = BrownianPath(times=times, dW=result.dW[0], seed=seed, path_index=path_index)
    return MildTrajectory(times=times, coeffs=result.coeffs[0], inputs=u, scheme=scheme, path=path)


@dataclass
class PathEnsemble:
    """Monte-Carlo paths recorded every record_stride steps, with optional full-resolution increments."""

    times: np.ndarray
    coeffs: np.ndarray
    inputs: np.ndarray
    path_indices: np.ndarray
    scheme: str
    seed: int
    record_stride: int = 1
    full_times: Optional[np.ndarray] = None
    dW: Optional[np.ndarray] = None

    @property
    def paths(self) -> int:
        return self.coeffs.shape[0]

    def brownian_path(self, p: int) -> BrownianPath:
        if self.dW is None:
            raise ConfigurationError("Ensemble was simulated without keeping its Brownian increments")
        return BrownianPath(times=self.full_times, dW=self.dW[p], seed=self.seed, path_index=int(self.path_indices[p]))


def map_path_batches(system: ModalSystem, signal: InputSignal, x0: np.ndarray, times: np.ndarray,
                     scheme: str, seed: int, paths: int, reducer: Callable[[BatchResult], object],
                     batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1,
                     keep_increments: bool = False) -> List[object]:
    """
    Simulate paths 0..paths-1 in fixed batches and reduce each batch; results come back
    in batch order whatever the number of workers.
    """
    if paths < 1:
        raise ConfigurationError("Need at least one path")
    times = check_time_grid(times)
    dt = uniform_step(times)
    if scheme not in SCHEMES:
        raise ConfigurationError(f"Unknown scheme {scheme!r}; expected one of {SCHEMES}")
    u = signal.value(times)
    forcing = exponential_forcing(system.lambdas, system.forcing(u, signal.rate(times)), dt)
    factor = gaussian_increment_factor(system, dt) if scheme == "exact-gaussian" and system.I else None
    x0 = np.asarray(x0, dtype=complex)

    def run(batch):
        start, stop = batch
        result = _propagate(system, forcing, x0, dt, scheme, seed, range(start, stop), times, factor,
                            keep_increments)
        logger.debug(f"Simulated paths {start}..{stop - 1}")
        return reducer(result)

    return ordered_map(run, batch_ranges(paths, batch_size), workers=workers)


def simulate_ensemble(system: ModalSystem, signal: InputSignal, x0: np.ndarray, times: np.ndarray,
                      scheme: str, seed: int, paths: int, batch_size: int = DEFAULT_BATCH_SIZE,
                      workers: int = 1, record_stride: int = 1, keep_increments: bool = False) -> PathEnsemble:
    """Monte-Carlo ensemble of mild solutions; bit-identical for any worker count."""
    times = check_time_grid(times)
    if record_stride < 1:
        raise ConfigurationError("record_stride must be >= 1")
    recorded = np.arange(0, times.size, record_stride)

    def keep(result: BatchResult):
        return result.coeffs[:, recorded], result.dW

    parts = map_path_batches(system, signal, x0, times, scheme, seed, paths, keep, batch_size=batch_size,
                             workers=workers, keep_increments=keep_increments)
    coeffs = np.concatenate([part[0] for part in parts])
    dW = np.concatenate([part[1] for part in parts]) if keep_increments and system.I else None
    logger.info(f"Simulated {paths} paths ({scheme}, {times.size - 1} steps, seed {seed})")
    return PathEnsemble(
        times=times[recorded],
        coeffs=coeffs,
        inputs=signal.value(times[recorded]),
        path_indices=np.arange(paths),
        scheme=scheme,
        seed=seed,
        record_stride=record_stride,
        full_times=times,
        dW=dW,
    )


@dataclass
class StateTrajectory:
    """eps(t) on the grid with its energy and the boundary output y(t)."""

    times: np.ndarray
    eps: np.ndarray
    energy: np.ndarray
    y: np.ndarray


def reconstruct_epsilon(system: ModalSystem, times: np.ndarray, coeffs: np.ndarray,
                        u: np.ndarray) -> StateTrajectory:
    """eps(t) = sum_k x_k(t) phi_k + B u(t) and y(t) = W_C [f; e](eps(t))."""
    basis = system.basis
    space = basis.space
    u = np.asarray(u, dtype=float).reshape(len(times), system.m)
    eps = basis.reconstruct(coeffs) + system.lift.apply(u, space.zeta)
    model = basis.model
    y = port_values(model, space, eps) @ model.WC.T
    return StateTrajectory(times=np.asarray(times), eps=eps, energy=space.energy(eps), y=y)


def convolution_series(system: ModalSystem, path: BrownianPath, t: float) -> np.ndarray:
    """
    Modal coefficients of the stochastic convolution W_A(t) from the series

        W_k(t) = sum_i h_ki (beta_i(t) + lambda_k integral_0^t exp(lambda_k (t - s)) beta_i(s) ds)

    with the time integral by the trapezoid rule on the path's grid.
    """
    times = path.times
    hits = np.flatnonzero(np.isclose(times, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))
    if hits.size == 0:
        raise ConfigurationError(f"t={t} is not a point of the Brownian path's time grid")
    j = int(hits[0])
    if j == 0:
        return np.zeros(system.K, dtype=complex)
    s = times[:j + 1]
    beta = path.beta()[:j + 1]
    kernel = np.exp(system.lambdas[:, None] * (s[j] - s[None, :]))
    integral = trapezoid(kernel[:, :, None] * beta[None, :, :], x=s, axis=1)
    return np.sum(system.h * (beta[j][None, :] + system.lambdas[:, None] * integral), axis=1)


def weak_residual(system: ModalSystem, trajectory: MildTrajectory, z: np.ndarray,
                  signal: InputSignal) -> np.ndarray:
    """
    Residual of the weak identity for z = sum_k z_k psi_k:

        <X(t), z> - <X0, z> - integral_0^t (<X, A* z> + <AB u - B u', z>) ds - <H w(t), z>

    Integrals use cumulative Simpson on the trajectory grid; the stochastic pairing is
    rebuilt from the trajectory's Brownian path.
    """
    z = np.asarray(z, dtype=complex)
    if z.shape != (system.K,):
        raise ConfigurationError(f"z must have {system.K} psi-coefficients")
    times = trajectory.times
    x = trajectory.coeffs
    zc = np.conj(z)
    pairing = x @ zc
    drift = (x * system.lambdas) @ zc + system.forcing(signal.value(times), signal.rate(times)) @ zc
    integral = np.concatenate([[0.0], cumulative_simpson(drift, x=times)])
    if system.I:
        if trajectory.path is None:
            raise ConfigurationError("Weak residual with noise needs the increment scheme's Brownian path")
        noise = trajectory.path.beta() @ system.h.T @ zc
    else:
        noise = np.zeros(times.size)
    return pairing - pairing[0] - integral - noise


def replay_path(system: ModalSystem, g: np.ndarray, x0: np.ndarray, path: BrownianPath) -> np.ndarray:
    """Increment-scheme propagation along a given Brownian path; returns coeffs (T, K)."""
    times = path.times
    dt = uniform_step(times)
    forcing = exponential_forcing(system.lambdas, g, dt)
    decay = np.exp(system.lambdas * dt)
    drive = decay * (path.dW @ system.h.T)
    coeffs = np.empty((times.size, system.K), dtype=complex)
    coeffs[0] = x0
    for n in range(times.size - 1):
        coeffs[n + 1] = decay * coeffs[n] + forcing[n] + drive[n]
    return coeffs
