import json
from pathlib import Path

import pytest

from database.database import Database
from main import SphsOrchestrator, main
from run_artifacts.run_artifacts import read_manifest, verify_artifacts
from sphs_core.config import parse_run_config
from sphs_core.errors import ConfigurationError

BENCHMARK_DIR = Path(__file__).resolve().parent.parent / "benchmarks"

SMALL_SIM = {"K": 8, "N": 64, "dt": 0.01, "t_final": 0.2, "paths": 24, "seed": 5, "batch_size": 8}


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for key in ("SPHS_SEED", "SPHS_WORKERS", "SPHS_LOG_LEVEL", "SPHS_OUT"):
        monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)


def write_config(directory: Path, data, name="config.json") -> str:
    path = directory / name
    path.write_text(json.dumps(data))
    return str(path)


def run_dirs(out: Path, command: str):
    return sorted(p for p in out.iterdir() if p.is_dir() and p.name.startswith(command))


def test_validate_string(tmp_path):
    config = write_config(tmp_path, {"sim": SMALL_SIM})
    out = tmp_path / "runs"
    assert main(["validate", "--config", config, "--out", str(out)]) == 0
    (run_dir,) = run_dirs(out, "validate")
    manifest = read_manifest(run_dir)
    assert manifest["passed"] is True
    assert "validation.json" in manifest["artifacts"]
    assert verify_artifacts(run_dir) == []
    validation = json.loads((run_dir / "validation.json").read_text())
    assert validation["generation"]["passed"] and validation["lift"]["found"]
    ledger = Database(str(out / "ledger.db")).get_runs_for_config(manifest["config_hash"])
    assert [run["exit_code"] for run in ledger] == [0]


@pytest.mark.parametrize("name", ["symmetric-p0", "generation-fail"])
def test_validate_negative_examples(tmp_path, name):
    out = tmp_path / "runs"
    assert main(["validate", "--config", str(BENCHMARK_DIR / f"{name}.json"), "--out", str(out)]) == 1
    (run_dir,) = run_dirs(out, "validate")
    assert read_manifest(run_dir)["passed"] is False


def test_configuration_errors(tmp_path):
    out = str(tmp_path / "runs")
    missing_seed = write_config(tmp_path, {"sim": {"K": 8}}, "no-seed.json")
    assert main(["validate", "--config", missing_seed, "--out", out]) == 3
    assert main(["validate", "--config", str(tmp_path / "absent.json"), "--out", out]) == 3
    good = write_config(tmp_path, {"sim": SMALL_SIM})
    assert main(["validate", "--config", good, "--out", out, "--log-level", "LOUD"]) == 3
    assert main(["validate", "--config", good, "--out", out, "--workers", "0"]) == 3


def test_seed_precedence(tmp_path, monkeypatch):
    config = write_config(tmp_path, {"sim": SMALL_SIM})
    out = tmp_path / "runs"
    monkeypatch.setenv("SPHS_SEED", "99")
    assert main(["validate", "--config", config, "--out", str(out)]) == 0
    assert main(["validate", "--config", config, "--out", str(out), "--seed", "123"]) == 0
    seeds = sorted(read_manifest(d)["seed"] for d in run_dirs(out, "validate"))
    assert seeds == [99, 123]


def test_out_from_environment(tmp_path, monkeypatch):
    config = write_config(tmp_path, {"sim": SMALL_SIM})
    monkeypatch.setenv("SPHS_OUT", str(tmp_path / "env-runs"))
    assert main(["validate", "--config", config]) == 0
    assert len(run_dirs(tmp_path / "env-runs", "validate")) == 1


def test_manifest_rerun(tmp_path):
    config = write_config(tmp_path, {"sim": SMALL_SIM})
    out = tmp_path / "runs"
    assert main(["validate", "--config", config, "--out", str(out)]) == 0
    (first,) = run_dirs(out, "validate")
    assert main(["validate", "--config", str(first / "manifest.json"), "--out", str(out)]) == 0
    second = [d for d in run_dirs(out, "validate") if d != first][0]
    assert second.name == f"{first.name}-2"
    assert (second / "validation.json").read_bytes() == (first / "validation.json").read_bytes()
    assert read_manifest(second)["config_hash"] == read_manifest(first)["config_hash"]


def test_simulate_is_independent_of_workers(tmp_path):
    data = {"sim": SMALL_SIM, "inputs": {"type": "sine", "amplitude": 1.0},
            "refinement": {"dts": [0.004, 0.002, 0.001], "paths": 2, "weak_modes": [1]}}
    config = write_config(tmp_path, data)
    out = tmp_path / "runs"
    codes = [main(["simulate", "--config", config, "--out", str(out), "--workers", w]) for w in ("1", "3")]
    assert codes[0] == codes[1] and codes[0] in (0, 1)
    first, second = run_dirs(out, "simulate")
    for name in ("trajectory.csv", "ensemble_summary.csv", "weak_residual.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def csv_header(path: Path):
    return path.read_text().splitlines()[0].split(",")


def test_spectrum_columns(tmp_path):
    out = tmp_path / "runs"
    assert main(["spectrum", "--config", write_config(tmp_path, {"sim": SMALL_SIM}), "--out", str(out)]) in (0, 1)
    (run_dir,) = run_dirs(out, "spectrum")
    header = csv_header(run_dir / "spectrum.csv")
    assert header[:5] == ["k", "re", "im", "gap", "biorth_defect"]
    rows = [line.split(",") for line in (run_dir / "spectrum.csv").read_text().splitlines()[1:]]
    assert len(rows) == SMALL_SIM["K"]
    summary = json.loads((run_dir / "spectrum.json").read_text())
    gaps = [float(row[3]) for row in rows]
    defects = [float(row[4]) for row in rows]
    assert min(gaps) == pytest.approx(summary["gap"])
    assert max(defects) == pytest.approx(summary["gram_defect"], rel=1e-12, abs=1e-300)
    assert max(defects) < 1e-6


def test_trajectory_columns(tmp_path):
    data = {"sim": SMALL_SIM, "refinement": {"dts": [0.004, 0.002, 0.001], "paths": 2, "weak_modes": [1]}}
    out = tmp_path / "runs"
    assert main(["simulate", "--config", write_config(tmp_path, data), "--out", str(out)]) in (0, 1)
    (run_dir,) = run_dirs(out, "simulate")
    header = csv_header(run_dir / "trajectory.csv")
    assert header[:3] == ["t", "path_index", "energy"]
    assert {"u_0", "y_0", "x_0_re", "x_0_im", f"x_{SMALL_SIM['K'] - 1}_im"} <= set(header)
    lines = (run_dir / "trajectory.csv").read_text().splitlines()[1:]
    assert {float(line.split(",")[1]) for line in lines} == {0.0}


def test_moments_columns(tmp_path):
    data = {"sim": SMALL_SIM, "continuity": {"t": 0.05, "h_steps": [1, 2, 4]}, "moments": {"n_se": 4.0}}
    out = tmp_path / "runs"
    assert main(["moments", "--config", write_config(tmp_path, data), "--out", str(out)]) in (0, 1)
    (run_dir,) = run_dirs(out, "moments")
    header = csv_header(run_dir / "moments.csv")
    K = SMALL_SIM["K"]
    assert header[0] == "t"
    assert header[1:1 + 2 * K:2] == [f"mean_exact_{k}_re" for k in range(K)]
    assert header[1 + 2 * K:1 + 3 * K] == [f"P_{k}_{k}" for k in range(K)]
    assert header[1 + 3 * K:3 + 3 * K] == ["cov_trace_exact", "energy_rate"]
    rates = {line.split(",")[header.index("energy_rate")]
             for line in (run_dir / "moments.csv").read_text().splitlines()[1:]}
    assert len(rates) == 1 and float(rates.pop()) > 0
    agreement = json.loads((run_dir / "moments.json").read_text())["agreement"]
    assert agreement["second_moment"]["n_se"] == 4.0


def test_admissibility_divergence_is_not_a_failure(tmp_path):
    data = {"sim": dict(SMALL_SIM, K=16), "noise": {"I": 16, "q": {"type": "constant"}},
            "admissibility": {"K_grid": [2, 4, 8, 16]}}
    out = tmp_path / "runs"
    assert main(["admissibility", "--config", write_config(tmp_path, data), "--out", str(out)]) == 0
    (run_dir,) = run_dirs(out, "admissibility")
    report = json.loads((run_dir / "admissibility.json").read_text())
    assert report["admissibility"]["verdict"] == "divergent"
    assert (run_dir / "admissibility.csv").read_text().startswith("K,partial_sum\n")


def test_energy_and_ito_artifacts(tmp_path):
    data = {"sim": dict(SMALL_SIM, paths=40), "ito": {"t": 0.1}, "energy": {"t_start": 0.05},
            "refinement": {"dts": [0.004, 0.002, 0.001], "paths": 2}}
    config = write_config(tmp_path, data)
    out = tmp_path / "runs"
    assert main(["energy", "--config", config, "--out", str(out)]) in (0, 1)
    assert main(["ito", "--config", config, "--out", str(out)]) in (0, 1)
    (energy_dir,) = run_dirs(out, "energy")
    (ito_dir,) = run_dirs(out, "ito")
    assert "rate" in json.loads((energy_dir / "energy.json").read_text())
    ito = json.loads((ito_dir / "ito.json").read_text())
    assert set(ito) == {"isometry", "convolution_series", "hs_norm_sq_modal"}


def test_unexpected_exception_is_numerical(tmp_path, mocker):
    mocker.patch.object(SphsOrchestrator, "run_validate", side_effect=RuntimeError("boom"))
    config = write_config(tmp_path, {"sim": SMALL_SIM})
    out = tmp_path / "runs"
    assert main(["validate", "--config", config, "--out", str(out)]) == 2
    (run_row,) = Database(str(out / "ledger.db")).get_runs_for_config(parse_run_config({"sim": SMALL_SIM}).config_hash())
    assert run_row["status"] == "failed"


def test_unknown_command():
    orchestrator = SphsOrchestrator(parse_run_config({"sim": SMALL_SIM}))
    with pytest.raises(ConfigurationError):
        orchestrator.run("plot")
