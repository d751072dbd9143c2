"""
Run configuration for the toolkit.

A run is described by one JSON file validated into RunConfig. Environment variables
prefixed with SPHS_ (optionally loaded from a .env file) override the file, and
command-line flags override both.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sphs_core.errors import ConfigurationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "SPHS_"
MAX_SEED = 2**64 - 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSource(_Block):
    """Where the port-Hamiltonian model comes from."""

    type: Literal["string", "file", "inline"] = "string"
    rho: float = 1.0
    T_modulus: float = 4.0
    a: float = 0.0
    b: float = 1.0
    path: Optional[str] = None
    data: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def _check_source(self) -> "ModelSource":
        if self.type == "file" and not self.path:
            raise ValueError("model.type 'file' requires model.path")
        if self.type == "inline" and not self.data:
            raise ValueError("model.type 'inline' requires model.data")
        if self.type == "string":
            if self.rho <= 0 or self.T_modulus <= 0:
                raise ValueError("string model needs rho > 0 and T_modulus > 0")
            if self.b <= self.a:
                raise ValueError("string model needs b > a")
        return self


class QSpec(_Block):
    """Noise covariance eigenvalues q_i."""

    type: Literal["explicit", "power", "constant"] = "power"
    values: Optional[List[float]] = None
    q0: float = 1.0
    r: float = 6.0

    @model_validator(mode="after")
    def _check_q(self) -> "QSpec":
        if self.type == "explicit":
            if not self.values:
                raise ValueError("q.type 'explicit' requires q.values")
            if any(v < 0 for v in self.values):
                raise ValueError("q.values must be non-negative")
        if self.q0 < 0:
            raise ValueError("q.q0 must be non-negative")
        if self.type == "power" and self.r <= 1.0:
            raise ValueError("q.r must exceed 1 for a trace-class power law")
        return self


class NoiseConfig(_Block):
    I: int = Field(16, ge=1)
    q: QSpec = Field(default_factory=QSpec)
    basis: Literal["sine", "cosine", "grid", "modal"] = "sine"
    channel: int = Field(0, ge=0)
    weighting: Literal["unit", "hamiltonian"] = "unit"
    profile_file: Optional[str] = None
    tail_tolerance: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def _check_profiles(self) -> "NoiseConfig":
        if self.basis == "grid" and not self.profile_file:
            raise ValueError("noise.basis 'grid' requires noise.profile_file")
        if self.q.type == "explicit" and self.q.values and len(self.q.values) != self.I:
            raise ValueError(f"noise.q.values has {len(self.q.values)} entries, expected I={self.I}")
        return self


class SimConfig(_Block):
    K: int = Field(32, ge=1)
    N: int = Field(256, ge=8)
    dt: float = 1e-3
    t_final: float = 1.0
    paths: int = Field(1000, ge=1)
    seed: int
    scheme: Literal["exact-gaussian", "increment"] = "exact-gaussian"
    batch_size: int = Field(128, ge=1)
    record_stride: int = Field(1, ge=1)

    @field_validator("dt", "t_final")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("seed")
    @classmethod
    def _u64(cls, value: int) -> int:
        if not 0 <= value <= MAX_SEED:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return value

    @model_validator(mode="after")
    def _check_truncation(self) -> "SimConfig":
        if self.K > self.N // 4:
            raise ValueError(f"K={self.K} exceeds N/4={self.N // 4}; only well-resolved modes are kept")
        return self

    @property
    def steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))


class InputConfig(_Block):
    type: Literal["zero", "constant", "sine", "ramp"] = "zero"
    amplitude: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0
    derivative: Literal["analytic", "central-difference"] = "analytic"


class InitialConfig(_Block):
    type: Literal["zero", "mode"] = "zero"
    mode: int = Field(0, ge=0)
    amplitude: float = 0.0


class EnergyConfig(_Block):
    t_start: float = Field(0.2, ge=0)
    t_end: Optional[float] = None
    n_se: float = Field(3.0, gt=0)


class ItoConfig(_Block):
    t: float = Field(1.0, ge=0)
    n_se: float = Field(3.0, gt=0)


class MomentsConfig(_Block):
    n_se: float = Field(3.0, gt=0)


class WellposedConfig(_Block):
    tf_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    members: int = Field(20, ge=1)
    method: Literal["moments", "monte-carlo"] = "moments"
    growth_tolerance: float = 0.1
    initial_modes: int = Field(6, ge=1)

    @field_validator("tf_grid")
    @classmethod
    def _sorted_positive(cls, value: List[float]) -> List[float]:
        if not value or any(t <= 0 for t in value) or sorted(value) != value:
            raise ValueError("tf_grid must be a non-empty increasing list of positive times")
        return value


class YosidaConfig(_Block):
    lambdas: List[float] = Field(default_factory=lambda: [10.0, 100.0, 1000.0, 10000.0])
    residual_dts: List[float] = Field(default_factory=lambda: [0.004, 0.002, 0.001])


class AdmissibilityConfig(_Block):
    K_grid: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    t: float = Field(1.0, gt=0)
    tolerance: float = Field(1e-6, gt=0)


class ContinuityConfig(_Block):
    h_steps: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    t: float = Field(0.5, ge=0)


class RefinementConfig(_Block):
    """Step ladder of the convolution-series and weak-residual refinement studies."""

    dts: List[float] = Field(default_factory=lambda: [0.004, 0.002, 0.001])
    paths: int = Field(200, ge=1)
    weak_modes: List[int] = Field(default_factory=lambda: [1, 5])


class RunConfig(_Block):
    """Resolved configuration of one toolkit run."""

    model: ModelSource = Field(default_factory=ModelSource)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    sim: SimConfig
    inputs: InputConfig = Field(default_factory=InputConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    energy: EnergyConfig = Field(default_factory=EnergyConfig)
    ito: ItoConfig = Field(default_factory=ItoConfig)
    moments: MomentsConfig = Field(default_factory=MomentsConfig)
    wellposed: WellposedConfig = Field(default_factory=WellposedConfig)
    yosida: YosidaConfig = Field(default_factory=YosidaConfig)
    admissibility: AdmissibilityConfig = Field(default_factory=AdmissibilityConfig)
    continuity: ContinuityConfig = Field(default_factory=ContinuityConfig)
    refinement: RefinementConfig = Field(default_factory=RefinementConfig)

    def canonical_json(self) -> str:
        """Compact, key-sorted JSON of the resolved config (the hashed form)."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def env_overrides(environ: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """Collect SPHS_* variables, loading a .env file first when present."""
    if environ is None:
        load_dotenv()
        environ = dict(os.environ)
    return {key[len(ENV_PREFIX):].lower(): value for key, value in environ.items() if key.startswith(ENV_PREFIX)}


def parse_run_config(data: Dict[str, Any], seed: Optional[int] = None) -> RunConfig:
    """Validate a config dict (or a run manifest) into a RunConfig."""
    if "resolved_config" in data:
        data = data["resolved_config"]
    data = json.loads(json.dumps(data))
    if seed is not None:
        data.setdefault("sim", {})["seed"] = seed
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}") from e


def load_run_config(path: str, seed: Optional[int] = None, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Load a run configuration file.

    Args:
        path: JSON config or run manifest
        seed: seed from the command line, wins over SPHS_SEED and the file
        environ: environment mapping (defaults to os.environ after load_dotenv)

    Returns:
        The validated RunConfig
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config {path} is not valid JSON: {e}") from e

    if seed is None:
        env_seed = env_overrides(environ).get("seed")
        if env_seed is not None:
            try:
                seed = int(env_seed)
            except ValueError as e:
                raise ConfigurationError(f"SPHS_SEED must be an integer, got {env_seed!r}") from e

    config = parse_run_config(data, seed=seed)
    logger.info(f"Loaded config {path} (hash {config.config_hash()[:12]}, seed {config.sim.seed})")
    return config
