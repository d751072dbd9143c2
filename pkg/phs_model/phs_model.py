"""
Port-Hamiltonian model definition, structural checks, boundary ports, energy and the
boundary lift.

Grid functions are arrays of shape (n, N+1): component-major samples of a state on the
uniform quadrature grid of [a, b]. Batched grid functions put extra axes in front.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel
from scipy.integrate import trapezoid

from sphs_core.errors import ConfigurationError, ValidationFailure

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 512
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10
LIFT_TOL = 1e-10


class HamiltonianDensity:
    """
    Matrix-valued density H(zeta), constant or sampled on nodes.

    Sampled densities are interpolated piecewise-linearly between nodes, which keeps
    mI <= H <= MI for the diagonal densities used by the benchmarks.
    """

    def __init__(self, values: np.ndarray, nodes: Optional[np.ndarray] = None):
        values = np.asarray(values, dtype=float)
        if nodes is None:
            if values.ndim != 2 or values.shape[0] != values.shape[1]:
                raise ConfigurationError(f"Constant Hamiltonian density must be square, got shape {values.shape}")
        else:
            nodes = np.asarray(nodes, dtype=float)
            if values.ndim != 3 or values.shape[1] != values.shape[2] or values.shape[0] != nodes.size:
                raise ConfigurationError(
                    f"Sampled Hamiltonian density needs shape (len(nodes), n, n), got {values.shape}"
                )
            if nodes.size < 2 or np.any(np.diff(nodes) <= 0):
                raise ConfigurationError("Hamiltonian density nodes must be strictly increasing")
        self.values = values
        self.nodes = nodes

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def is_constant(self) -> bool:
        return self.nodes is None

    def __call__(self, zeta: Union[float, np.ndarray]) -> np.ndarray:
        """Evaluate H at the points zeta; returns shape (len(zeta), n, n)."""
        zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
        if self.nodes is None:
            return np.broadcast_to(self.values, (zeta.size, self.n, self.n)).copy()
        flat = self.values.reshape(self.nodes.size, -1)
        out = np.stack([np.interp(zeta, self.nodes, flat[:, j]) for j in range(flat.shape[1])], axis=-1)
        return out.reshape(zeta.size, self.n, self.n)


@dataclass(frozen=True)
class PhsModel:
    """A 1-D linear port-Hamiltonian system with boundary control and observation."""

    n: int
    a: float
    b: float
    P1: np.ndarray
    P0: np.ndarray
    hamiltonian: HamiltonianDensity
    WB1: np.ndarray
    WB2: np.ndarray
    WC: np.ndarray
    name: str = "model"

    def __post_init__(self):
        for label in ("P1", "P0", "WB1", "WB2", "WC"):
            value = np.asarray(getattr(self, label))
            # empty row blocks (e.g. WB2 when every boundary row is an input)
            value = value.reshape(0, 2 * self.n) if value.size == 0 else np.atleast_2d(value)
            object.__setattr__(self, label, value)
        self.check_dimensions()

    def check_dimensions(self) -> None:
        n = self.n
        if n < 1:
            raise ConfigurationError(f"State dimension must be positive, got {n}")
        if not self.b > self.a:
            raise ConfigurationError(f"Interval must satisfy a < b, got [{self.a}, {self.b}]")
        for label, matrix in (("P1", self.P1), ("P0", self.P0)):
            if np.shape(matrix) != (n, n):
                raise ConfigurationError(f"{label} must be {n}x{n}, got {np.shape(matrix)}")
        if self.hamiltonian.n != n:
            raise ConfigurationError(f"Hamiltonian density is {self.hamiltonian.n}x{self.hamiltonian.n}, expected {n}x{n}")
        for label, matrix in (("WB1", self.WB1), ("WB2", self.WB2), ("WC", self.WC)):
            if np.ndim(matrix) != 2 or np.shape(matrix)[1] != 2 * n:
                raise ConfigurationError(f"{label} must have {2 * n} columns, got shape {np.shape(matrix)}")
        if self.WB1.shape[0] + self.WB2.shape[0] != n:
            raise ConfigurationError(
                f"WB1 and WB2 must have n={n} rows together, got {self.WB1.shape[0]}+{self.WB2.shape[0]}"
            )

    @property
    def m(self) -> int:
        """Number of boundary inputs."""
        return self.WB1.shape[0]

    @property
    def p(self) -> int:
        """Number of boundary outputs."""
        return self.WC.shape[0]

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def WB(self) -> np.ndarray:
        return np.vstack([self.WB1, self.WB2])

    @property
    def is_real(self) -> bool:
        return all(np.isrealobj(M) for M in (self.P1, self.P0, self.WB1, self.WB2, self.WC))

    def port_matrix(self) -> np.ndarray:
        """R with [f; e] = R [w(b); w(a)] for w = H eps."""
        n = self.n
        eye = np.eye(n)
        return np.block([[self.P1, -self.P1], [eye, eye]]) / np.sqrt(2.0)


class StateSpace:
    """
    Quadrature grid of a model together with the energy inner product

        <f, g> = 1/2 * integral of g* H f

    evaluated with the composite trapezoid rule on N+1 uniform nodes.
    """

    def __init__(self, model: PhsModel, N: int = DEFAULT_GRID_SIZE):
        if N < 2:
            raise ConfigurationError(f"Quadrature grid needs N >= 2, got {N}")
        self.model = model
        self.N = N
        self.zeta = np.linspace(model.a, model.b, N + 1)
        self.h = model.length / N
        self.H = model.hamiltonian(self.zeta)

        weights = np.full(N + 1, self.h)
        weights[0] = weights[-1] = self.h / 2
        self.weights = weights

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def size(self) -> int:
        return self.n * (self.N + 1)

    def check_grid_function(self, f: np.ndarray) -> None:
        if np.shape(f)[-2:] != (self.n, self.N + 1):
            raise ConfigurationError(
                f"Grid function has trailing shape {np.shape(f)[-2:]}, expected {(self.n, self.N + 1)}"
            )

    def apply_hamiltonian(self, f: np.ndarray) -> np.ndarray:
        """Pointwise H(zeta) f(zeta)."""
        self.check_grid_function(f)
        return np.einsum('jcd,...dj->...cj', self.H, f)

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Energy inner product <f, g>, broadcasting over leading axes."""
        integrand = np.sum(np.conj(g) * self.apply_hamiltonian(f), axis=-2)
        return 0.5 * trapezoid(integrand, x=self.zeta, axis=-1)

    def norm_sq(self, f: np.ndarray) -> np.ndarray:
        return np.real(self.inner(f, f))

    def l2_norm_sq(self, f: np.ndarray) -> np.ndarray:
        self.check_grid_function(f)
        return trapezoid(np.sum(np.abs(f) ** 2, axis=-2), x=self.zeta, axis=-1)

    def gram(self, f: np.ndarray, g: Optional[np.ndarray] = None) -> np.ndarray:
        """Matrix G[l, k] = <f_k, g_l> for stacks f of shape (K, n, N+1) and g of shape (L, n, N+1)."""
        g = f if g is None else g
        weighted = self.apply_hamiltonian(f) * (0.5 * self.weights)
        return np.conj(g.reshape(len(g), -1)) @ weighted.reshape(len(f), -1).T

    def mass_matrix(self) -> np.ndarray:
        """M with <f, g> = g_flat^H M f_flat for component-major flattening."""
        n, size = self.n, self.N + 1
        M = np.zeros((n * size, n * size))
        for c in range(n):
            for d in range(n):
                M[c * size:(c + 1) * size, d * size:(d + 1) * size] = np.diag(0.5 * self.weights * self.H[:, c, d])
        return M

    def energy(self, state: np.ndarray) -> np.ndarray:
        return self.norm_sq(state)


class CheckResult(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = None
    detail: str = ""


class ValidationReport(BaseModel):
    """Outcome of validate_model: one entry per structural invariant."""

    model_name: str
    passed: bool
    checks: List[CheckResult]
    m_lower: float
    M_upper: float
    rank_WB: int
    rank_WB1_WC: int
    p1_symmetry_defect: float
    p0_skew_defect: float


class GenerationReport(BaseModel):
    passed: bool
    product: List[List[float]]
    eigenvalues: List[float]
    tolerance: float


@dataclass(frozen=True)
class BoundaryPorts:
    f_boundary: np.ndarray
    e_boundary: np.ndarray

    @property
    def power(self) -> float:
        """Boundary power f^H e (real part)."""
        return float(np.real(np.vdot(self.f_boundary, self.e_boundary)))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.f_boundary, self.e_boundary])


@dataclass(frozen=True)
class BoundaryLift:
    """
    Affine lift B: input channel j maps to the profile d_j * (alpha_j + beta_j * zeta).

    directions has shape (m, n); alpha and beta have shape (m,).
    """

    directions: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    residual: float = 0.0

    @property
    def m(self) -> int:
        return self.directions.shape[0]

    def profiles(self, zeta: np.ndarray) -> np.ndarray:
        """Per-channel profiles B e_j on the points zeta, shape (m, n, len(zeta))."""
        zeta = np.asarray(zeta, dtype=float)
        scalar = self.alpha[:, None] + self.beta[:, None] * zeta[None, :]
        return self.directions[:, :, None] * scalar[:, None, :]

    def apply(self, u: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """B u on the grid for inputs u of shape (..., m); returns (..., n, len(zeta))."""
        return np.einsum('...j,jcz->...cz', np.asarray(u, dtype=float), self.profiles(zeta))


def _spectral_norm(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def validate_model(model: PhsModel, N: int = DEFAULT_GRID_SIZE) -> ValidationReport:
    """
    Check the structural invariants of a model.

    Failed properties are reported, not raised; only inconsistent dimensions raise
    a ConfigurationError.
    """
    model.check_dimensions()
    checks: List[CheckResult] = []

    p1_norm = _spectral_norm(model.P1)
    p1_defect = _spectral_norm(model.P1 - model.P1.conj().T)
    checks.append(CheckResult(
        name="P1 self-adjoint",
        passed=p1_defect <= SYMMETRY_TOL * max(p1_norm, 1.0),
        value=p1_defect,
    ))

    singular = np.linalg.svd(model.P1, compute_uv=False)
    p1_invertible = singular.size > 0 and singular[-1] > SYMMETRY_TOL * singular[0]
    checks.append(CheckResult(
        name="P1 invertible",
        passed=bool(p1_invertible),
        value=float(singular[-1]) if singular.size else 0.0,
        detail=f"smallest singular value {singular[-1]:.3e}" if singular.size else "",
    ))

    p0_defect = _spectral_norm(model.P0 + model.P0.conj().T)
    checks.append(CheckResult(
        name="P0 skew-adjoint",
        passed=p0_defect <= SYMMETRY_TOL * max(_spectral_norm(model.P0), 1e-300),
        value=p0_defect,
    ))

    # Sample the density on the quadrature grid and at its own nodes
    zeta = np.linspace(model.a, model.b, N + 1)
    if model.hamiltonian.nodes is not None:
        inside = model.hamiltonian.nodes[(model.hamiltonian.nodes >= model.a) & (model.hamiltonian.nodes <= model.b)]
        zeta = np.union1d(zeta, inside)
    H = model.hamiltonian(zeta)
    h_defect = float(np.max(np.abs(H - np.conj(np.transpose(H, (0, 2, 1))))))
    eigs = np.linalg.eigvalsh(0.5 * (H + np.conj(np.transpose(H, (0, 2, 1)))))
    m_lower, M_upper = float(eigs.min()), float(eigs.max())
    checks.append(CheckResult(name="H self-adjoint", passed=h_defect <= SYMMETRY_TOL * max(M_upper, 1.0), value=h_defect))
    checks.append(CheckResult(
        name="H coercive",
        passed=m_lower > 0,
        value=m_lower,
        detail=f"m={m_lower:.6g}, M={M_upper:.6g}",
    ))

    rank_wb = int(np.linalg.matrix_rank(model.WB))
    checks.append(CheckResult(name="W_B full row rank", passed=rank_wb == model.n, value=float(rank_wb)))
    rank_obs = int(np.linalg.matrix_rank(np.vstack([model.WB1, model.WC])))
    checks.append(CheckResult(
        name="[W_B1; W_C] full row rank",
        passed=rank_obs == model.m + model.p,
        value=float(rank_obs),
    ))

    passed = all(c.passed for c in checks)
    for check in checks:
        if not check.passed:
            logger.warning(f"Model {model.name}: check '{check.name}' failed (value {check.value})")

    return ValidationReport(
        model_name=model.name,
        passed=passed,
        checks=checks,
        m_lower=m_lower,
        M_upper=M_upper,
        rank_WB=rank_wb,
        rank_WB1_WC=rank_obs,
        p1_symmetry_defect=p1_defect,
        p0_skew_defect=p0_defect,
    )


def boundary_ports(trace_a: np.ndarray, trace_b: np.ndarray, model: PhsModel,
                   apply_hamiltonian: bool = False) -> BoundaryPorts:
    """
    Boundary flow and effort from the traces of H eps at a and b.

    With apply_hamiltonian=True the traces are raw eps values and H is applied first.
    """
    trace_a = np.asarray(trace_a)
    trace_b = np.asarray(trace_b)
    if trace_a.shape != (model.n,) or trace_b.shape != (model.n,):
        raise ConfigurationError(f"Boundary traces must have shape ({model.n},)")
    if apply_hamiltonian:
        trace_a = model.hamiltonian(model.a)[0] @ trace_a
        trace_b = model.hamiltonian(model.b)[0] @ trace_b
    f = model.P1 @ (trace_b - trace_a) / np.sqrt(2.0)
    e = (trace_b + trace_a) / np.sqrt(2.0)
    return BoundaryPorts(f_boundary=f, e_boundary=e)


def port_values(model: PhsModel, space: StateSpace, states: np.ndarray) -> np.ndarray:
    """Stacked [f; e] of grid functions with shape (..., n, N+1); returns (..., 2n)."""
    w = space.apply_hamiltonian(states)
    traces = np.concatenate([w[..., :, -1], w[..., :, 0]], axis=-1)
    return traces @ model.port_matrix().T


def energy(state: np.ndarray, model: PhsModel) -> float:
    """Hamiltonian 1/2 * integral of eps* H eps of a state sampled on the quadrature grid."""
    state = np.asarray(state)
    if state.ndim != 2 or state.shape[0] != model.n:
        raise ConfigurationError(f"State must have shape ({model.n}, N+1), got {state.shape}")
    return float(StateSpace(model, state.shape[1] - 1).energy(state))


def _lift_direction(model: PhsModel, row: np.ndarray) -> np.ndarray:
    """Unit vector on the state component the input row weighs most."""
    n = model.n
    weights = np.abs(row[:n]) + np.abs(row[n:])
    direction = np.zeros(n)
    direction[int(np.argmax(weights))] = 1.0
    return direction


def build_boundary_lift(model: PhsModel) -> BoundaryLift:
    """
    Find an affine lift with B(u) mapped to u by the input rows and to 0 by the
    remaining boundary rows, so that B u lies in the domain of the free operator.

    Raises:
        ValidationFailure: when no profile in the affine family satisfies both
            port identities
    """
    n, m = model.n, model.m
    H_a = model.hamiltonian(model.a)[0]
    H_b = model.hamiltonian(model.b)[0]
    rows = model.WB @ model.port_matrix()

    directions = np.zeros((m, n))
    alpha = np.zeros(m)
    beta = np.zeros(m)
    worst = 0.0
    for j in range(m):
        d = _lift_direction(model, rows[j])
        trace_const = np.concatenate([H_b @ d, H_a @ d])
        trace_slope = np.concatenate([model.b * (H_b @ d), model.a * (H_a @ d)])
        system = np.column_stack([rows @ trace_const, rows @ trace_slope])
        target = np.zeros(n)
        target[j] = 1.0
        coef, *_ = np.linalg.lstsq(system, target, rcond=None)
        residual = float(np.max(np.abs(system @ coef - target)))
        if residual > LIFT_TOL:
            raise ValidationFailure(
                f"No affine boundary lift for input {j} of {model.name}: residual {residual:.3e} "
                f"along state component {int(np.argmax(d))}"
            )
        directions[j], alpha[j], beta[j] = d, coef[0], coef[1]
        worst = max(worst, residual)

    logger.debug(f"Boundary lift for {model.name}: alpha={alpha}, beta={beta}")
    return BoundaryLift(directions=directions, alpha=alpha, beta=beta, residual=worst)


class LiftResiduals(BaseModel):
    input_residual: float
    domain_residual: float
    passed: bool


ProfileFunction = Callable[[np.ndarray], np.ndarray]


def lift_port_residuals(model: PhsModel, lift: Union[BoundaryLift, ProfileFunction],
                        tol: float = 1e-12) -> LiftResiduals:
    """
    Audit a candidate lift: max deviation of the input rows from the identity and of
    the remaining boundary rows from zero.

    A callable lift maps points zeta to profiles of shape (m, n, len(zeta)).
    """
    profile = lift.profiles if isinstance(lift, BoundaryLift) else lift
    ends = profile(np.array([model.a, model.b]))
    H_a = model.hamiltonian(model.a)[0]
    H_b = model.hamiltonian(model.b)[0]
    traces = np.concatenate([ends[:, :, 1] @ H_b.T, ends[:, :, 0] @ H_a.T], axis=1)
    ports = traces @ model.port_matrix().T
    input_rows = ports @ model.WB1.T
    domain_rows = ports @ model.WB2.T
    input_residual = float(np.max(np.abs(input_rows - np.eye(model.m)))) if model.m else 0.0
    domain_residual = float(np.max(np.abs(domain_rows))) if domain_rows.size else 0.0
    return LiftResiduals(
        input_residual=input_residual,
        domain_residual=domain_residual,
        passed=max(input_residual, domain_residual) <= tol,
    )


def generation_check(model: PhsModel) -> GenerationReport:
    """PSD test of W_B Sigma W_B^* with Sigma = [[0, I], [I, 0]]."""
    n = model.n
    sigma = np.block([[np.zeros((n, n)), np.eye(n)], [np.eye(n), np.zeros((n, n))]])
    WB = model.WB
    product = WB @ sigma @ WB.conj().T
    hermitian = 0.5 * (product + product.conj().T)
    eigenvalues = np.linalg.eigvalsh(hermitian)
    tolerance = PSD_TOL * max(_spectral_norm(product), 1e-300)
    passed = bool(eigenvalues.min() >= -tolerance)
    if not passed:
        logger.warning(f"W_B Sigma W_B* of {model.name} has eigenvalue {eigenvalues.min():.6g} < 0")
    return GenerationReport(
        passed=passed,
        product=np.real(product).tolist(),
        eigenvalues=eigenvalues.tolist(),
        tolerance=tolerance,
    )
