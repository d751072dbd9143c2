"""
The damped vibrating string as a packaged benchmark.

State eps = (rho z_t, z_zeta) on [a, b] with H = diag(1/rho, T). The left end is
force-controlled (T z_zeta(a) = u), the right end carries a unit damper
(T z_zeta(b) + z_t(b) = 0) and the output is the left-end velocity z_t(a).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, field_validator

from phs_model.model_io import model_to_dict
from phs_model.phs_model import BoundaryLift, HamiltonianDensity, PhsModel, build_boundary_lift

logger = logging.getLogger(__name__)

SQRT_HALF = 1.0 / np.sqrt(2.0)

STRING_P1 = np.array([[0.0, 1.0], [1.0, 0.0]])
STRING_WB1 = SQRT_HALF * np.array([[-1.0, 0.0, 0.0, 1.0]])
STRING_WB2 = SQRT_HALF * np.array([[1.0, 1.0, 1.0, 1.0]])
STRING_WC = SQRT_HALF * np.array([[0.0, -1.0, 1.0, 0.0]])

ACCEPTANCE_NAMES = (
    "damped-string-mc",
    "moments-vs-mc",
    "yosida-ladder",
    "admissibility-pass",
    "admissibility-fail",
)


class StringParams(BaseModel):
    """Mass density and Young's modulus, constant or sampled on nodes."""

    rho: Union[float, List[float]] = 1.0
    T_modulus: Union[float, List[float]] = 4.0
    a: float = 0.0
    b: float = 1.0
    nodes: Optional[List[float]] = None

    @field_validator("rho", "T_modulus")
    @classmethod
    def _positive(cls, value):
        if np.any(np.asarray(value, dtype=float) <= 0):
            raise ValueError("must be positive")
        return value

    @property
    def is_constant(self) -> bool:
        return np.ndim(self.rho) == 0 and np.ndim(self.T_modulus) == 0

    @property
    def impedance(self) -> float:
        """sqrt(T rho) at the right end, where the damper sits."""
        return float(np.sqrt(np.atleast_1d(self.T_modulus)[-1] * np.atleast_1d(self.rho)[-1]))

    @property
    def wave_speed(self) -> float:
        return float(np.sqrt(np.atleast_1d(self.T_modulus)[-1] / np.atleast_1d(self.rho)[-1]))

    @property
    def regime(self) -> str:
        """Eigenvalue lattice: "even" ((2k)pi) for impedance > 1, "odd" ((2k+1)pi) below, "matched" at 1."""
        Z = self.impedance
        if np.isclose(Z, 1.0, rtol=1e-12, atol=0.0):
            return "matched"
        return "even" if Z > 1 else "odd"


@dataclass(frozen=True)
class StringBenchmark:
    params: StringParams
    model: PhsModel
    lift: BoundaryLift
    noise: Dict[str, Any]


def string_hamiltonian(params: StringParams) -> HamiltonianDensity:
    if params.is_constant:
        return HamiltonianDensity(np.diag([1.0 / float(params.rho), float(params.T_modulus)]))
    if params.nodes is None:
        raise ValueError("Sampled rho or T_modulus needs nodes")
    nodes = np.asarray(params.nodes, dtype=float)
    rho = np.broadcast_to(np.asarray(params.rho, dtype=float), nodes.shape)
    T = np.broadcast_to(np.asarray(params.T_modulus, dtype=float), nodes.shape)
    values = np.zeros((nodes.size, 2, 2))
    values[:, 0, 0] = 1.0 / rho
    values[:, 1, 1] = T
    return HamiltonianDensity(values, nodes)


def default_string_noise() -> Dict[str, Any]:
    """Momentum-channel sine noise with q_i = i^-6."""
    return {
        "I": 16,
        "q": {"type": "power", "q0": 1.0, "r": 6.0},
        "basis": "sine",
        "channel": 0,
        "weighting": "unit",
    }


def build_string_model(params: Optional[StringParams] = None) -> StringBenchmark:
    """Model matrices, corrected affine lift and default noise of the damped string."""
    params = params or StringParams()
    Z = params.impedance
    name = f"string-rho{np.atleast_1d(params.rho)[-1]:g}-T{np.atleast_1d(params.T_modulus)[-1]:g}"
    model = PhsModel(
        n=2,
        a=params.a,
        b=params.b,
        P1=STRING_P1.copy(),
        P0=np.zeros((2, 2)),
        hamiltonian=string_hamiltonian(params),
        WB1=STRING_WB1.copy(),
        WB2=STRING_WB2.copy(),
        WC=STRING_WC.copy(),
        name=name,
    )
    if params.regime == "matched":
        logger.warning(f"{name}: impedance sqrt(T rho)={Z:g} is matched; the spectrum has no uniform gap")
    return StringBenchmark(params=params, model=model, lift=build_boundary_lift(model), noise=default_string_noise())


def _string_block(rho: float = 1.0, T_modulus: float = 4.0) -> Dict[str, Any]:
    return {"type": "string", "rho": rho, "T_modulus": T_modulus, "a": 0.0, "b": 1.0}


def string_acceptance_configs() -> Dict[str, Dict[str, Any]]:
    """The named acceptance runs on the default string (rho=1, T=4 on [0, 1])."""
    return {
        "damped-string-mc": {
            "model": _string_block(),
            "noise": default_string_noise(),
            "sim": {"K": 32, "N": 256, "dt": 0.001, "t_final": 1.0, "paths": 10000,
                    "seed": 20240611, "scheme": "exact-gaussian", "record_stride": 100},
            "energy": {"t_start": 0.2, "n_se": 3.0},
            "ito": {"t": 1.0, "n_se": 3.0},
            "wellposed": {"tf_grid": [0.5, 1.0, 2.0, 4.0], "members": 20},
        },
        "moments-vs-mc": {
            "model": _string_block(),
            "noise": default_string_noise(),
            "sim": {"K": 32, "N": 256, "dt": 0.001, "t_final": 1.0, "paths": 10000,
                    "seed": 20240612, "scheme": "exact-gaussian", "record_stride": 100},
            "inputs": {"type": "sine", "amplitude": 1.0, "frequency": 1.0},
            "initial": {"type": "mode", "mode": 0, "amplitude": 0.5},
            "continuity": {"h_steps": [1, 2, 4, 8, 16], "t": 0.5},
        },
        "yosida-ladder": {
            "model": _string_block(),
            "noise": default_string_noise(),
            "sim": {"K": 32, "N": 256, "dt": 0.001, "t_final": 1.0, "paths": 1000,
                    "seed": 20240613, "scheme": "increment"},
            "inputs": {"type": "sine", "amplitude": 1.0, "frequency": 1.0},
            "yosida": {"lambdas": [10.0, 100.0, 1000.0, 10000.0], "residual_dts": [0.004, 0.002, 0.001]},
        },
        "admissibility-pass": {
            "model": _string_block(),
            "noise": {"I": 8, "q": {"type": "power", "q0": 1.0, "r": 8.0}, "basis": "modal"},
            "sim": {"K": 256, "N": 1024, "dt": 0.001, "t_final": 1.0, "paths": 1, "seed": 20240614},
            "admissibility": {"K_grid": [16, 32, 64, 128, 256], "t": 1.0, "tolerance": 1e-06},
        },
        "admissibility-fail": {
            "model": _string_block(),
            "noise": {"I": 256, "q": {"type": "constant", "q0": 1.0}, "basis": "sine", "channel": 0},
            "sim": {"K": 256, "N": 1024, "dt": 0.001, "t_final": 1.0, "paths": 1, "seed": 20240615},
            "admissibility": {"K_grid": [16, 32, 64, 128, 256], "t": 1.0, "tolerance": 1e-06},
        },
    }


def symmetric_p0_model() -> Dict[str, Any]:
    """The string with a symmetric (non-skew) P0, which validate_model must reject."""
    data = model_to_dict(build_string_model().model)
    data["name"] = "string-symmetric-p0"
    data["P0"] = [[0.0, 1.0], [1.0, 0.0]]
    return data


def generation_fail_model() -> Dict[str, Any]:
    """The string with W_B = [[1, 0, -1, 0], [1, 1, 1, 1]] / sqrt(2), for which W_B Sigma W_B* is indefinite."""
    data = model_to_dict(build_string_model().model)
    data["name"] = "string-generation-fail"
    data["WB1"] = (SQRT_HALF * np.array([[1.0, 0.0, -1.0, 0.0]])).tolist()
    return data


def string_extra_configs() -> Dict[str, Dict[str, Any]]:
    """Regime and negative-example runs beside the acceptance set."""
    small_sim = {"K": 16, "N": 256, "dt": 0.001, "t_final": 1.0, "paths": 2000, "seed": 20240616,
                 "scheme": "exact-gaussian", "record_stride": 10}
    weighted = default_string_noise()
    weighted["weighting"] = "hamiltonian"
    return {
        "matched-impedance": {
            "model": _string_block(rho=1.0, T_modulus=1.0),
            "noise": default_string_noise(),
            "sim": dict(small_sim, seed=20240616),
        },
        "odd-regime": {
            "model": _string_block(rho=1.0, T_modulus=0.25),
            "noise": default_string_noise(),
            "sim": dict(small_sim, seed=20240617),
        },
        "hamiltonian-weighted-noise": {
            "model": _string_block(),
            "noise": weighted,
            "sim": dict(small_sim, seed=20240618),
            "energy": {"t_start": 0.2, "n_se": 3.0},
        },
        "symmetric-p0": {
            "model": {"type": "inline", "data": symmetric_p0_model()},
            "sim": dict(small_sim, seed=20240619),
        },
        "generation-fail": {
            "model": {"type": "inline", "data": generation_fail_model()},
            "sim": dict(small_sim, seed=20240620),
        },
    }


def config_bytes(config: Dict[str, Any]) -> bytes:
    """Canonical file form of a benchmark config."""
    return (json.dumps(config, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_acceptance_configs(directory: Union[str, Path], include_extra: bool = True) -> List[Path]:
    """Write every named config as <name>.json; the files are byte-stable."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    configs = string_acceptance_configs()
    if include_extra:
        configs.update(string_extra_configs())
    written = []
    for name, config in configs.items():
        path = directory / f"{name}.json"
        path.write_bytes(config_bytes(config))
        written.append(path)
    logger.info(f"Wrote {len(written)} benchmark configs to {directory}")
    return written
