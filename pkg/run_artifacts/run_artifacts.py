"""
Run directories, CSV/JSON artifact writers and the run manifest.

Artifacts are byte-deterministic for a fixed (config, seed): floats are written with
17 significant digits, JSON keys are sorted and nothing time-dependent is recorded.
"""

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from sphs_core.config import RunConfig
from sphs_core.errors import ConfigurationError

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"
FLOAT_FORMAT = "{:.17g}"


def format_float(value: float) -> str:
    return FLOAT_FORMAT.format(float(value))


def to_jsonable(value: Any) -> Any:
    """numpy arrays and scalars, complex numbers and pydantic models to plain JSON types."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": to_jsonable(value.real), "im": to_jsonable(value.imag)}
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not np.isfinite(value):
            return "inf" if value > 0 else "-inf" if value < 0 else "nan"
        return value
    return value


def json_bytes(data: Any) -> bytes:
    return (json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n").encode("utf-8")


def csv_bytes(header: Sequence[str], rows: Union[np.ndarray, Sequence[Sequence[Any]]]) -> bytes:
    """CSV with floats at 17 significant digits; complex columns must be split by the caller."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ConfigurationError(f"CSV row has {len(row)} fields, header has {len(header)}")
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buffer.getvalue().encode("utf-8")


def complex_columns(prefix: str, values: np.ndarray) -> Dict[str, np.ndarray]:
    """Split a (T, K) complex array into prefix_k_re / prefix_k_im columns."""
    columns = {}
    for k in range(values.shape[1]):
        columns[f"{prefix}_{k}_re"] = np.real(values[:, k])
        columns[f"{prefix}_{k}_im"] = np.imag(values[:, k])
    return columns


def table_bytes(columns: Dict[str, np.ndarray]) -> bytes:
    """Equal-length named columns to CSV, in insertion order."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[name], dtype=float) for name in names]) if names else np.zeros((0, 0))
    return csv_bytes(names, [[float(v) for v in row] for row in data])


def run_directory_name(command: str, config_hash: str, seed: int) -> str:
    return f"{command}-{config_hash[:12]}-seed{seed}"


class RunDirectory:
    """
    One directory per run under the output root; an existing directory is never
    reused, later runs get -2, -3, ... suffixes.
    """

    def __init__(self, out_root: Union[str, Path], command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.config_hash = config.config_hash()
        self.seed = config.sim.seed
        root = Path(out_root)
        root.mkdir(parents=True, exist_ok=True)
        base = run_directory_name(command, self.config_hash, self.seed)
        path = root / base
        suffix = 2
        while path.exists():
            path = root / f"{base}-{suffix}"
            suffix += 1
        path.mkdir()
        self.path = path
        self.artifacts: Dict[str, str] = {}
        logger.info(f"Writing {command} artifacts to {path}")

    def write_bytes(self, name: str, content: bytes) -> Path:
        if name == MANIFEST_NAME or name in self.artifacts:
            raise ConfigurationError(f"Artifact {name} is written twice")
        target = self.path / name
        target.write_bytes(content)
        self.artifacts[name] = hashlib.sha256(content).hexdigest()
        logger.debug(f"Wrote {name} ({len(content)} bytes)")
        return target

    def write_json(self, name: str, data: Any) -> Path:
        return self.write_bytes(name, json_bytes(data))

    def write_csv(self, name: str, columns: Dict[str, np.ndarray]) -> Path:
        return self.write_bytes(name, table_bytes(columns))

    def manifest(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        manifest = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": TOOLKIT_VERSION,
            "resolved_config": self.config.model_dump(mode="json"),
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        if extra:
            manifest.update(extra)
        return manifest

    def finalize(self, extra: Optional[Dict[str, Any]] = None) -> Path:
        """Write manifest.json with the sha256 of every artifact written so far."""
        target = self.path / MANIFEST_NAME
        target.write_bytes(json_bytes(self.manifest(extra)))
        return target


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read run manifest {path}: {e}") from e


def verify_artifacts(run_dir: Union[str, Path]) -> List[str]:
    """Names of artifacts whose sha256 no longer matches the manifest."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    mismatched = []
    for name, digest in manifest.get("artifacts", {}).items():
        target = run_dir / name
        if not target.is_file() or hashlib.sha256(target.read_bytes()).hexdigest() != digest:
            mismatched.append(name)
    return mismatched
