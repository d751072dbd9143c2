"""
Truncated Riesz-spectral decomposition of the port-Hamiltonian generator.

The generator is realized by second-order finite differences on the quadrature grid of
StateSpace. Boundary conditions are imposed by eliminating one grid unknown per boundary
row, so the reduced matrix acts on the remaining (free) unknowns and every eigenvector
satisfies the boundary rows exactly.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic import BaseModel

from phs_model.phs_model import PhsModel, StateSpace
from sphs_core.errors import ConfigurationError, NumericalError, ValidationFailure

logger = logging.getLogger(__name__)

MIN_GRID = 8
COLLISION_TOL = 1e-8
SMOOTHNESS_LIMIT = 2.0
PAIR_TOL = 1e-8


@dataclass
class DiscreteGenerator:
    """Finite-difference generator A_N on the free unknowns, with expansion to the full grid."""

    model: PhsModel
    space: StateSpace
    mode: str
    A_full: np.ndarray
    A: np.ndarray
    E: np.ndarray
    free: np.ndarray
    dependent: np.ndarray
    W: np.ndarray

    @property
    def N(self) -> int:
        return self.space.N

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        """Free-unknown vectors (..., r) to grid functions (..., n, N+1)."""
        full = np.asarray(reduced) @ self.E.T
        return full.reshape(full.shape[:-1] + (self.model.n, self.N + 1))

    def apply_full(self, grid_function: np.ndarray) -> np.ndarray:
        """The unconstrained differential operator P1 (H f)' + P0 H f on grid functions."""
        flat = np.asarray(grid_function).reshape(grid_function.shape[:-2] + (-1,))
        out = flat @ self.A_full.T
        return out.reshape(grid_function.shape)


def derivative_matrix(N: int, h: float, periodic: bool = False) -> np.ndarray:
    """First-derivative stencil on N+1 nodes: central inside, one-sided second order at the ends."""
    D = np.zeros((N + 1, N + 1))
    rows = np.arange(1, N)
    D[rows, rows + 1] = 1.0
    D[rows, rows - 1] = -1.0
    if periodic:
        # node N duplicates node 0
        D[0, 1], D[0, N - 1] = 1.0, -1.0
        D[N, 1], D[N, N - 1] = 1.0, -1.0
    else:
        D[0, :3] = [-3.0, 4.0, -1.0]
        D[N, N - 2:] = [1.0, -4.0, 3.0]
    return D / (2.0 * h)


def apply_operator(space: StateSpace, f: np.ndarray) -> np.ndarray:
    """P1 (H f)' + P0 H f on grid functions (..., n, N+1), with the same stencil as A_N."""
    model = space.model
    w = space.apply_hamiltonian(f)
    dw = w @ derivative_matrix(space.N, space.h).T
    return np.einsum('cd,...dj->...cj', model.P1, dw) + np.einsum('cd,...dj->...cj', model.P0, w)


def _hamiltonian_block(space: StateSpace) -> np.ndarray:
    n, size = space.n, space.N + 1
    Hblock = np.zeros((n * size, n * size))
    for c in range(n):
        for d in range(n):
            Hblock[c * size:(c + 1) * size, d * size:(d + 1) * size] = np.diag(space.H[:, c, d])
    return Hblock


def _eliminate(C: np.ndarray, candidates: np.ndarray, size: int):
    """Solve C e = 0 for as many candidate unknowns as there are rows; return (free, dependent, E)."""
    _, R, piv = scipy.linalg.qr(C[:, candidates], pivoting=True)
    rows = C.shape[0]
    if rows and abs(R[rows - 1, rows - 1]) <= 1e-12 * abs(R[0, 0]):
        raise ValidationFailure("Boundary rows cannot be solved for boundary unknowns (rank deficient)")
    dependent = np.sort(candidates[piv[:rows]])
    free = np.setdiff1d(np.arange(size), dependent)
    E = np.zeros((size, free.size))
    E[free, np.arange(free.size)] = 1.0
    if rows:
        E[dependent, :] = -np.linalg.solve(C[:, dependent], C[:, free])
    return free, dependent, E


def discretize_operator(model: PhsModel, N: int, mode: str = "boundary") -> DiscreteGenerator:
    """
    Finite-difference realization of eps -> P1 (H eps)' + P0 H eps.

    Args:
        model: the port-Hamiltonian model
        N: number of grid intervals (N >= 8)
        mode: "boundary" imposes all rows of W_B (inputs set to zero);
            "periodic" is a diagnostic mode identifying both ends

    Returns:
        DiscreteGenerator with the reduced matrix A on the free unknowns
    """
    if N < MIN_GRID:
        raise ConfigurationError(f"Grid size N={N} is below the minimum {MIN_GRID}")
    if mode not in ("boundary", "periodic"):
        raise ConfigurationError(f"Unknown discretization mode {mode!r}")

    space = StateSpace(model, N)
    n, nodes = model.n, N + 1
    size = n * nodes
    D = derivative_matrix(N, space.h, periodic=(mode == "periodic"))
    A_full = (np.kron(model.P1, D) + np.kron(model.P0, np.eye(nodes))) @ _hamiltonian_block(space)

    left = np.array([c * nodes for c in range(n)])
    right = left + N
    if mode == "boundary":
        rows = model.WB @ model.port_matrix()
        C = np.zeros((n, size), dtype=rows.dtype)
        # rows act on [w(b); w(a)] with w = H eps
        C[:, right] = rows[:, :n] @ space.H[N]
        C[:, left] = rows[:, n:] @ space.H[0]
        candidates = np.concatenate([left, right])
    else:
        C = np.zeros((n, size))
        C[np.arange(n), right] = 1.0
        C[np.arange(n), left] = -1.0
        candidates = right

    free, dependent, E = _eliminate(C, candidates, size)
    A = A_full[free, :] @ E
    W = E.T @ space.mass_matrix() @ E
    logger.debug(f"Discretized {model.name} ({mode}) on N={N}: {free.size} free unknowns")
    return DiscreteGenerator(
        model=model, space=space, mode=mode, A_full=A_full, A=A, E=E, free=free, dependent=dependent, W=W
    )


@dataclass
class ModalBasis:
    """
    K eigenpairs of the generator with their biorthogonal adjoint family.

    phis and psis are grid functions of shape (K, n, N+1); partner[k] is the index of
    the conjugate mode of a real model (k itself for real eigenvalues).
    """

    lambdas: np.ndarray
    phis: np.ndarray
    psis: np.ndarray
    gap: float
    nice: bool
    gram_defect: float
    space: StateSpace
    partner: np.ndarray
    smoothness: np.ndarray
    dropped_unresolved: int = 0
    is_real: bool = True

    @property
    def K(self) -> int:
        return self.lambdas.size

    @property
    def abscissa(self) -> float:
        return float(np.max(self.lambdas.real))

    @property
    def model(self) -> PhsModel:
        return self.space.model

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """<f, psi_k> for grid functions of shape (..., n, N+1); returns (..., K)."""
        f = np.asarray(f)
        self.space.check_grid_function(f)
        weighted = self.space.apply_hamiltonian(f) * (0.5 * self.space.weights)
        flat = weighted.reshape(f.shape[:-2] + (-1,))
        return flat @ np.conj(self.psis.reshape(self.K, -1)).T

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """sum_k x_k phi_k for coefficient arrays (..., K); returns (..., n, N+1)."""
        coeffs = np.asarray(coeffs)
        out = coeffs @ self.phis.reshape(self.K, -1)
        return out.reshape(coeffs.shape[:-1] + self.phis.shape[1:])

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """Like synthesize, but real-valued for real models with conjugate-symmetric coefficients."""
        out = self.synthesize(coeffs)
        return np.real(out) if self.is_real else out

    def gram_phi(self) -> np.ndarray:
        """Gram[l, k] = <phi_k, phi_l>, so that ||sum x_k phi_k||^2 = x^H Gram x."""
        return self.space.gram(self.phis)

    def biorthogonality(self) -> np.ndarray:
        """G[l, k] = <phi_k, psi_l>, re-measured by quadrature."""
        return self.space.gram(self.phis, self.psis)


def _smoothness(phis: np.ndarray) -> np.ndarray:
    second = phis[..., 2:] - 2.0 * phis[..., 1:-1] + phis[..., :-2]
    norms = np.linalg.norm(phis.reshape(len(phis), -1), axis=1)
    return np.linalg.norm(second.reshape(len(phis), -1), axis=1) / np.where(norms > 0, norms, 1.0)


def _find_partners(lambdas: np.ndarray) -> np.ndarray:
    partner = np.full(lambdas.size, -1)
    for k, lam in enumerate(lambdas):
        if abs(lam.imag) <= PAIR_TOL * max(1.0, abs(lam)):
            partner[k] = k
            continue
        distances = np.abs(lambdas - np.conj(lam))
        distances[k] = np.inf
        j = int(np.argmin(distances))
        if distances[j] <= PAIR_TOL * max(1.0, abs(lam)):
            partner[k] = j
    return partner


def _phase_factor(grid_function: np.ndarray) -> complex:
    """Unit factor making the largest-magnitude sample real and positive."""
    flat = grid_function.ravel()
    pivot = flat[int(np.argmax(np.abs(flat)))]
    return np.conj(pivot) / abs(pivot)


def eigensystem(generator: DiscreteGenerator, K: int) -> ModalBasis:
    """
    K well-resolved eigenpairs of A_N, sorted by |Im lambda| with positive imaginary
    parts first, and the adjoint family in the energy inner product.

    Eigenvectors whose second-difference ratio exceeds 2 (wavenumber beyond pi/(2h))
    are unresolved and discarded. For real models conjugate pairs are kept together.
    """
    N = generator.N
    if K < 1 or K > N // 4:
        raise ConfigurationError(f"K={K} must lie in [1, N/4={N // 4}]")

    try:
        evals, vl, vr = scipy.linalg.eig(generator.A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"Eigen-solver failed for {generator.model.name}: {e}") from e

    phis_all = generator.expand(vr.T)
    ratio = _smoothness(phis_all)
    resolved = np.flatnonzero(ratio <= SMOOTHNESS_LIMIT)
    dropped = evals.size - resolved.size
    if dropped:
        logger.debug(f"Discarded {dropped} unresolved eigenvectors (second-difference ratio > {SMOOTHNESS_LIMIT})")

    order = sorted(resolved, key=lambda i: (abs(evals[i].imag), evals[i].imag < 0, -evals[i].real))
    chosen = list(order[:K])
    if len(chosen) < K:
        logger.warning(f"Only {len(chosen)} resolved modes available, requested K={K}")

    is_real = generator.model.is_real and np.isrealobj(generator.A)
    if is_real and chosen:
        last = evals[chosen[-1]]
        if last.imag > PAIR_TOL * max(1.0, abs(last)):
            logger.warning(f"Truncation at K={K} splits the conjugate pair of {last:.6g}; dropping it")
            chosen = chosen[:-1]
    if not chosen:
        raise NumericalError("No resolved eigenpairs found")

    idx = np.array(chosen)
    lambdas = evals[idx].astype(complex)
    phis_red = vr[:, idx].astype(complex)
    try:
        psis_red = scipy.linalg.solve(generator.W, vl[:, idx].astype(complex), assume_a='pos')
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"Energy weight matrix is not positive definite: {e}") from e

    if lambdas.size > 1:
        diffs = np.abs(lambdas[:, None] - lambdas[None, :])
        np.fill_diagonal(diffs, np.inf)
        gap = float(diffs.min())
    else:
        gap = float("inf")
    nice = gap >= COLLISION_TOL
    if not nice:
        logger.warning(f"Eigenvalue gap {gap:.3e} below {COLLISION_TOL}: basis is not nice, normalization skipped")

    W = generator.W
    for k in range(lambdas.size):
        phi = phis_red[:, k]
        phi = phi / np.sqrt(np.real(np.vdot(phi, W @ phi)))
        phi = phi * _phase_factor(generator.expand(phi))
        if is_real and abs(lambdas[k].imag) <= PAIR_TOL * max(1.0, abs(lambdas[k])):
            lambdas[k] = lambdas[k].real
            phi = np.real(phi).astype(complex)
        phis_red[:, k] = phi
        if nice:
            pairing = np.vdot(psis_red[:, k], W @ phi)
            psis_red[:, k] = psis_red[:, k] / np.conj(pairing)
            if is_real and lambdas[k].imag == 0:
                psis_red[:, k] = np.real(psis_red[:, k]).astype(complex)

    partner = _find_partners(lambdas) if is_real else np.arange(lambdas.size)
    if is_real:
        for k in range(lambdas.size):
            j = partner[k]
            if j > k and lambdas[k].imag > 0:
                lambdas[j] = np.conj(lambdas[k])
                phis_red[:, j] = np.conj(phis_red[:, k])
                psis_red[:, j] = np.conj(psis_red[:, k])

    phis = generator.expand(phis_red.T)
    psis = generator.expand(psis_red.T)
    space = generator.space
    defect = float(np.max(np.abs(space.gram(phis, psis) - np.eye(lambdas.size))))
    logger.info(
        f"Eigensystem of {generator.model.name}: K={lambdas.size}, gap={gap:.6g}, "
        f"abscissa={np.max(lambdas.real):.6g}, Gram defect={defect:.2e}"
    )
    return ModalBasis(
        lambdas=lambdas,
        phis=phis,
        psis=psis,
        gap=gap,
        nice=nice,
        gram_defect=defect,
        space=space,
        partner=partner,
        smoothness=ratio[idx],
        dropped_unresolved=int(dropped),
        is_real=bool(is_real),
    )


def semigroup_apply(basis: ModalBasis, t: float, x: np.ndarray) -> np.ndarray:
    """T(t) x = sum_k exp(lambda_k t) <x, psi_k> phi_k on the truncated span."""
    if t < 0:
        raise ConfigurationError(f"Semigroup time must be non-negative, got {t}")
    out = basis.synthesize(np.exp(basis.lambdas * t) * basis.coefficients(x))
    return np.real(out) if basis.is_real and np.isrealobj(x) else out


@dataclass
class FluxFactorization:
    """P1 H(zeta) = S^{-1}(zeta) diag(Delta(zeta)) S(zeta) on the sample points."""

    zeta: np.ndarray
    S: np.ndarray
    Delta: np.ndarray
    residual: float


def factorize_flux(model: PhsModel, N: int = 64) -> FluxFactorization:
    """
    Continuous diagonalization of P1 H along the interval.

    Eigenvalues are sorted in decreasing order and eigenvector signs follow the
    previous sample point, so the factors vary continuously with zeta.

    Raises:
        ValidationFailure: complex or colliding eigenvalues (not hyperbolic)
    """
    zeta = np.linspace(model.a, model.b, N + 1)
    H = model.hamiltonian(zeta)
    n = model.n
    S = np.zeros((zeta.size, n, n))
    Delta = np.zeros((zeta.size, n))
    residual = 0.0
    previous: Optional[np.ndarray] = None
    for j in range(zeta.size):
        flux = model.P1 @ H[j]
        values, vectors = np.linalg.eig(flux)
        scale = max(np.max(np.abs(values)), 1e-300)
        if np.max(np.abs(values.imag)) > 1e-12 * scale:
            raise ValidationFailure(f"P1 H has complex eigenvalues at zeta={zeta[j]:.6g}")
        values = values.real
        order = np.argsort(-values)
        values, vectors = values[order], np.real(vectors[:, order])
        if n > 1 and np.min(-np.diff(values)) <= 1e-10 * scale:
            raise ValidationFailure(f"Eigenvalues of P1 H collide at zeta={zeta[j]:.6g}")
        vectors = vectors / np.linalg.norm(vectors, axis=0)
        if previous is None:
            signs = np.sign(vectors[np.argmax(np.abs(vectors), axis=0), np.arange(n)])
        else:
            signs = np.sign(np.sum(vectors * previous, axis=0))
        vectors = vectors * np.where(signs == 0, 1.0, signs)
        previous = vectors
        S[j] = np.linalg.inv(vectors)
        Delta[j] = values
        rebuilt = vectors @ np.diag(values) @ S[j]
        residual = max(residual, float(np.max(np.abs(rebuilt - flux))))
    return FluxFactorization(zeta=zeta, S=S, Delta=Delta, residual=residual)


class GapStudyReport(BaseModel):
    Ns: List[int]
    K: int
    gaps: List[float]
    abscissas: List[float]
    gap_variation: float
    abscissa_variation: float
    tolerance: float
    stable: bool


def _relative_spread(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    scale = max(float(np.max(np.abs(values))), 1e-300)
    return float((values.max() - values.min()) / scale)


def uniform_gap_study(model: PhsModel, Ns: Sequence[int], K: int, tolerance: float = 0.05) -> GapStudyReport:
    """
    Numerical surrogate for a uniform spectral gap: the gap and the spectral abscissa
    of the first K modes must stay within a relative tolerance across grid sizes.
    """
    gaps, abscissas = [], []
    for N in Ns:
        basis = eigensystem(discretize_operator(model, N), K)
        gaps.append(basis.gap)
        abscissas.append(basis.abscissa)
    gap_variation = _relative_spread(gaps)
    abscissa_variation = _relative_spread(abscissas)
    stable = bool(min(gaps) > COLLISION_TOL and gap_variation <= tolerance and abscissa_variation <= tolerance)
    if not stable:
        logger.warning(
            f"Spectrum of {model.name} is not uniformly separated across N={list(Ns)}: "
            f"gap spread {gap_variation:.3f}, abscissa spread {abscissa_variation:.3f}"
        )
    return GapStudyReport(
        Ns=list(Ns),
        K=K,
        gaps=gaps,
        abscissas=abscissas,
        gap_variation=gap_variation,
        abscissa_variation=abscissa_variation,
        tolerance=tolerance,
        stable=stable,
    )
