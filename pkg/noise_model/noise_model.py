"""
Q-Wiener noise: covariance eigenvalues q_i, the intensity profiles Hf_i on the
quadrature grid, Brownian increment sampling and trace quantities.

The intensity is given in channel-injection form. Noise mode i drives the state
through the grid function Hf_i = e_c * v_i(zeta) (optionally scaled by the diagonal
entry H_cc of the Hamiltonian density), or through explicit modal profiles.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.linalg
from scipy.integrate import trapezoid

from phs_model.phs_model import StateSpace
from sphs_core.config import NoiseConfig, QSpec
from sphs_core.errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

BROWNIAN_STREAM = 0
GAUSSIAN_STREAM = 1


@dataclass(frozen=True)
class QWienerSpec:
    """Truncated Q-Wiener process w = sum_i beta_i v_i with intensity profiles Hf_i."""

    q: np.ndarray
    profiles: np.ndarray
    space: StateSpace
    basis_id: str = "sine"
    tail_tolerance: float = 1e-6

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        profiles = np.asarray(self.profiles)
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ConfigurationError("Noise variances q_i must be finite and non-negative")
        if profiles.ndim != 3 or profiles.shape[0] != q.size:
            raise ConfigurationError(f"Expected {q.size} intensity profiles, got array of shape {profiles.shape}")
        self.space.check_grid_function(profiles)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "profiles", profiles)

    @property
    def I(self) -> int:
        return self.q.size

    @property
    def trace(self) -> float:
        """Truncated Tr Q."""
        return float(np.sum(self.q))

    @property
    def tail_ratio(self) -> float:
        total = self.trace
        return float(self.q[-1] / total) if total > 0 else 0.0

    @property
    def tail_ok(self) -> bool:
        return self.tail_ratio <= self.tail_tolerance

    def coefficients(self, basis) -> np.ndarray:
        """Modal intensity h[k, i] = <Hf_i, psi_k>, shape (K, I)."""
        if basis.space.N != self.space.N:
            raise ConfigurationError(f"Noise grid N={self.space.N} does not match basis grid N={basis.space.N}")
        return basis.coefficients(self.profiles).T

    def scaled(self, factor: float) -> "QWienerSpec":
        return replace(self, q=self.q * factor)


def q_values(spec: QSpec, I: int) -> np.ndarray:
    """q_i for i = 1..I from an explicit list, a power law q0 i^-r or a constant."""
    if spec.type == "explicit":
        values = np.asarray(spec.values, dtype=float)
        if values.size != I:
            raise ConfigurationError(f"Explicit q has {values.size} entries, expected {I}")
        return values
    index = np.arange(1, I + 1, dtype=float)
    if spec.type == "power":
        return spec.q0 * index ** (-spec.r)
    return np.full(I, spec.q0)


def sine_family(zeta: np.ndarray, a: float, b: float, I: int) -> np.ndarray:
    """L2-orthonormal sqrt(2/L) sin(i pi (zeta - a)/L), i = 1..I."""
    L = b - a
    i = np.arange(1, I + 1)[:, None]
    return np.sqrt(2.0 / L) * np.sin(i * np.pi * (zeta[None, :] - a) / L)


def cosine_family(zeta: np.ndarray, a: float, b: float, I: int) -> np.ndarray:
    """L2-orthonormal cosine family starting with the constant 1/sqrt(L)."""
    L = b - a
    i = np.arange(I)[:, None]
    family = np.sqrt(2.0 / L) * np.cos(i * np.pi * (zeta[None, :] - a) / L)
    family[0] = 1.0 / np.sqrt(L)
    return family


def load_profile_file(path: Union[str, Path], zeta: np.ndarray, I: int) -> np.ndarray:
    """
    Scalar noise profiles from JSON {"zeta": [...], "profiles": [[...], ...]},
    interpolated piecewise-linearly onto the quadrature grid.
    """
    profile_path = Path(path)
    if not profile_path.is_file():
        raise ConfigurationError(f"Noise profile file not found: {path}")
    try:
        data = json.loads(profile_path.read_text(encoding="utf-8"))
        nodes = np.asarray(data["zeta"], dtype=float)
        values = np.atleast_2d(np.asarray(data["profiles"], dtype=float))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Noise profile file {path} is malformed: {e}") from e
    if values.shape[0] < I or values.shape[1] != nodes.size:
        raise ConfigurationError(
            f"Noise profile file {path} has shape {values.shape}; need at least {I} profiles on {nodes.size} nodes"
        )
    return np.stack([np.interp(zeta, nodes, values[i]) for i in range(I)])


def modal_profiles(basis, I: int) -> np.ndarray:
    """
    Real finite-rank intensity profiles spanning the leading eigenfunctions,
    orthonormalized in the energy inner product.

    Real modes contribute phi_k, conjugate pairs contribute Re phi_k and Im phi_k.
    """
    candidates = []
    for k, lam in enumerate(basis.lambdas):
        if len(candidates) >= I:
            break
        phi = basis.phis[k]
        if basis.partner[k] == k:
            candidates.append(np.real(phi))
        elif lam.imag > 0:
            candidates.extend([np.real(phi), np.imag(phi)])
    if len(candidates) < I:
        raise ConfigurationError(f"Basis with K={basis.K} yields only {len(candidates)} real modal profiles, need I={I}")
    F = np.stack(candidates[:I])
    gram = np.real(basis.space.gram(F))
    try:
        lower = scipy.linalg.cholesky(gram, lower=True)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Modal noise profiles are linearly dependent: {e}") from e
    flat = scipy.linalg.solve_triangular(lower, F.reshape(I, -1), lower=True)
    return flat.reshape(F.shape)


def build_noise(config: NoiseConfig, space: StateSpace, basis=None,
                base_dir: Optional[Path] = None) -> QWienerSpec:
    """
    QWienerSpec from the noise block of a run configuration.

    Args:
        config: noise block
        space: quadrature grid the profiles are sampled on
        basis: ModalBasis, required for basis="modal"
        base_dir: directory relative profile files are resolved against
    """
    I = config.I
    q = q_values(config.q, I)
    if config.basis == "modal":
        if basis is None:
            raise ConfigurationError("Modal noise needs the eigenbasis")
        profiles = modal_profiles(basis, I)
    else:
        if config.channel >= space.n:
            raise ConfigurationError(f"Noise channel {config.channel} out of range for n={space.n}")
        model = space.model
        if config.basis == "sine":
            scalar = sine_family(space.zeta, model.a, model.b, I)
        elif config.basis == "cosine":
            scalar = cosine_family(space.zeta, model.a, model.b, I)
        else:
            path = Path(config.profile_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            scalar = load_profile_file(path, space.zeta, I)
        if config.weighting == "hamiltonian":
            scalar = scalar * space.H[None, :, config.channel, config.channel]
        profiles = np.zeros((I, space.n, space.N + 1))
        profiles[:, config.channel, :] = scalar

    spec = QWienerSpec(q=q, profiles=profiles, space=space, basis_id=config.basis,
                       tail_tolerance=config.tail_tolerance)
    if not spec.tail_ok:
        logger.warning(
            f"Noise tail q_I/sum q = {spec.tail_ratio:.3e} exceeds tolerance {spec.tail_tolerance:.1e}; "
            f"truncation at I={I} may be too coarse"
        )
    logger.debug(f"Noise: I={I}, basis={config.basis}, Tr Q={spec.trace:.6g}")
    return spec


@dataclass(frozen=True)
class BrownianPath:
    """Increments dW[s, i] of beta_i over [times[s], times[s+1]]."""

    times: np.ndarray
    dW: np.ndarray
    seed: int = 0
    path_index: int = 0

    @property
    def steps(self) -> int:
        return self.dW.shape[0]

    def beta(self) -> np.ndarray:
        """beta_i(t) on the time grid, shape (S+1, I), starting at 0."""
        out = np.zeros((self.steps + 1, self.dW.shape[1]))
        np.cumsum(self.dW, axis=0, out=out[1:])
        return out

    def coarsen(self, factor: int) -> "BrownianPath":
        """The same path on every factor-th time point (increments summed)."""
        if factor < 1 or self.steps % factor:
            raise ConfigurationError(f"Cannot coarsen {self.steps} steps by a factor {factor}")
        dW = self.dW.reshape(self.steps // factor, factor, -1).sum(axis=1)
        return BrownianPath(times=self.times[::factor], dW=dW, seed=self.seed, path_index=self.path_index)


def check_time_grid(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ConfigurationError("Time grid needs at least two points")
    if np.any(np.diff(times) <= 0):
        raise ConfigurationError("Time grid must be strictly increasing")
    return times


def path_generator(seed: int, path_index: int, stream: int = BROWNIAN_STREAM) -> np.random.Generator:
    """Counter-based Philox stream owned by one (seed, path, stream) triple."""
    sequence = np.random.SeedSequence(seed, spawn_key=(path_index, stream))
    return np.random.Generator(np.random.Philox(sequence))


def sample_path(spec: QWienerSpec, times: np.ndarray, seed: int, path_index: int) -> BrownianPath:
    """Gaussian increments with variance q_i dt; identical for identical (seed, path_index)."""
    times = check_time_grid(times)
    dt = np.diff(times)
    rng = path_generator(seed, path_index, BROWNIAN_STREAM)
    normals = rng.standard_normal((dt.size, spec.I))
    dW = normals * np.sqrt(dt[:, None] * spec.q[None, :])
    return BrownianPath(times=times, dW=dW, seed=seed, path_index=path_index)


def hs_norm_sq(spec: QWienerSpec, basis=None) -> float:
    """
    Tr[H Q H*] in the energy norm.

    On the grid this is sum_i q_i ||Hf_i||^2; with a ModalBasis the profiles are first
    projected onto the span of the K eigenfunctions.
    """
    if basis is None:
        return float(np.sum(spec.q * spec.space.norm_sq(spec.profiles)))
    h = spec.coefficients(basis)
    gram = basis.gram_phi()
    per_mode = np.real(np.einsum('li,lk,ki->i', np.conj(h), gram, h))
    return float(np.sum(spec.q * per_mode))


def weighted_trace(spec: QWienerSpec, weight: np.ndarray) -> float:
    """sum_i q_i * integral of (Hf_i)* weight (Hf_i); weight is (n, n) or sampled (N+1, n, n)."""
    space = spec.space
    weight = np.asarray(weight)
    if weight.ndim == 2:
        weight = np.broadcast_to(weight, (space.N + 1,) + weight.shape)
    if weight.shape != (space.N + 1, space.n, space.n):
        raise ConfigurationError(f"Weight must be ({space.n}, {space.n}) or sampled on the grid, got {weight.shape}")
    weighted = np.einsum('jcd,idj->icj', weight, spec.profiles)
    integrand = np.real(np.sum(np.conj(spec.profiles) * weighted, axis=1))
    return float(np.sum(spec.q * trapezoid(integrand, x=space.zeta, axis=-1)))
