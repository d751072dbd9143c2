import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from phs_model.phs_model import HamiltonianDensity, PhsModel
from sphs_core.errors import ConfigurationError

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("n", "a", "b", "P0", "P1", "hamiltonian", "WB1", "WB2", "WC")


def _matrix(data: Dict[str, Any], key: str) -> np.ndarray:
    try:
        return np.array(data[key], dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Model entry '{key}' is not a numeric row-major matrix: {e}") from e


def _hamiltonian(spec: Dict[str, Any]) -> HamiltonianDensity:
    kind = spec.get("type")
    data = spec.get("data")
    if kind == "constant":
        return HamiltonianDensity(np.array(data, dtype=float))
    if kind == "grid":
        if not isinstance(data, dict) or "nodes" not in data or "values" not in data:
            raise ConfigurationError("Grid Hamiltonian needs data {nodes, values}")
        return HamiltonianDensity(np.array(data["values"], dtype=float), np.array(data["nodes"], dtype=float))
    raise ConfigurationError(f"Unknown hamiltonian type {kind!r}; expected 'constant' or 'grid'")


def model_from_dict(data: Dict[str, Any], name: str = "model") -> PhsModel:
    """Build a PhsModel from the JSON model layout (matrices as row-major arrays)."""
    missing = [key for key in REQUIRED_KEYS if key not in data]
    if missing:
        raise ConfigurationError(f"Model is missing keys: {', '.join(missing)}")
    n = int(data["n"])
    model = PhsModel(
        n=n,
        a=float(data["a"]),
        b=float(data["b"]),
        P1=_matrix(data, "P1"),
        P0=_matrix(data, "P0"),
        hamiltonian=_hamiltonian(data["hamiltonian"]),
        WB1=_matrix(data, "WB1").reshape(-1, 2 * n),
        WB2=_matrix(data, "WB2").reshape(-1, 2 * n),
        WC=_matrix(data, "WC").reshape(-1, 2 * n),
        name=str(data.get("name", name)),
    )
    logger.debug(f"Built model {model.name}: n={model.n}, m={model.m}, p={model.p}")
    return model


def model_to_dict(model: PhsModel) -> Dict[str, Any]:
    density = model.hamiltonian
    if density.is_constant:
        hamiltonian = {"type": "constant", "data": density.values.tolist()}
    else:
        hamiltonian = {"type": "grid", "data": {"nodes": density.nodes.tolist(), "values": density.values.tolist()}}
    return {
        "name": model.name,
        "n": model.n,
        "a": model.a,
        "b": model.b,
        "P0": np.real(model.P0).tolist(),
        "P1": np.real(model.P1).tolist(),
        "hamiltonian": hamiltonian,
        "WB1": np.real(model.WB1).tolist(),
        "WB2": np.real(model.WB2).tolist(),
        "WC": np.real(model.WC).tolist(),
    }


def load_model(path: Union[str, Path]) -> PhsModel:
    model_path = Path(path)
    if not model_path.is_file():
        raise ConfigurationError(f"Model file not found: {path}")
    try:
        data = json.loads(model_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Model file {path} is not valid JSON: {e}") from e
    return model_from_dict(data, name=model_path.stem)
