#!/usr/bin/env python3
"""
Stochastic port-Hamiltonian toolkit - command-line orchestrator

Loads a run configuration, builds the model, its eigenbasis and the Q-Wiener noise,
runs one subcommand and writes its CSV/JSON artifacts plus a manifest into a fresh
run directory.

Key Features:
- Model from the string benchmark, a model JSON file or an inline definition
- Reproducible Monte Carlo (per-path random streams, fixed path batches)
- One run directory per run with sha256-checked artifacts and a re-runnable manifest
- sqlite run ledger with system metrics next to the run directories

Usage:
    python main.py <command> --config PATH [--out DIR] [--seed U64] [--workers N] [--log-level LEVEL]

Commands:
    validate       structural checks, generation condition and boundary lift
    spectrum       eigenvalues of the discretized generator (with the string oracle)
    simulate       Monte-Carlo mild solutions and the weak-residual refinement study
    moments        exact mean/covariance against Monte Carlo, mean-square continuity
    energy         noise energy balance
    ito            Ito isometry and the convolution-series refinement study
    wellposed      empirical well-posedness constants over t_f
    yosida         Yosida approximation ladder and extended-system residuals
    admissibility  admissibility integral and Hilbert-Schmidt domain sums

Exit codes: 0 success, 1 failed check, 2 numerical failure, 3 configuration error.
Environment: SPHS_SEED, SPHS_WORKERS, SPHS_LOG_LEVEL, SPHS_OUT (a .env file is read).
"""

import argparse
import logging
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from diagnostics.diagnostics import (
    ORDER_THRESHOLD,
    admissibility_integral,
    convolution_series_study,
    energy_balance_check,
    hs_domain_check,
    ito_isometry_check,
    ms_continuity_study,
    weak_residual_study,
)
from diagnostics.wellposedness import default_members, deterministic_ratio, wellposedness_ratio
from mild_solver.mild_solver import (
    InputSignal,
    ModalSystem,
    initial_coefficients,
    project_system,
    reconstruct_epsilon,
    simulate_ensemble,
    simulate_mild,
    time_grid,
)
from mild_solver.yosida import residual_study, yosida_convergence
from moment_dynamics.moment_dynamics import (
    MomentSolution,
    covariance_trajectory,
    energy_rate,
    lyapunov_residual,
    mc_moments,
    mean_trajectory,
    moment_agreement,
)
from noise_model.noise_model import build_noise, hs_norm_sq
from phs_model.model_io import load_model, model_from_dict
from phs_model.phs_model import (
    BoundaryLift,
    PhsModel,
    build_boundary_lift,
    generation_check,
    lift_port_residuals,
    validate_model,
)
from run_artifacts.run_artifacts import RunDirectory, complex_columns, to_jsonable
from spectral_basis.spectral_basis import (
    ModalBasis,
    discretize_operator,
    eigensystem,
    factorize_flux,
    uniform_gap_study,
)
from spectral_basis.string_oracle import oracle_convergence, string_spectrum_oracle
from sphs_core.config import RunConfig, env_overrides, load_run_config
from sphs_core.errors import ConfigurationError, NumericalError, SphsError, ValidationFailure
from sphs_core.logging import RunLogger, setup_logging
from string_benchmark.string_benchmark import StringParams, build_string_model

COMMANDS = ("validate", "spectrum", "simulate", "moments", "energy", "ito", "wellposed", "yosida", "admissibility")
DEFAULT_OUT = "runs"
SPECTRAL_ORDER = 1.9
ORACLE_MODES = 16


@dataclass
class CommandResult:
    passed: bool
    summary: Dict[str, Any]


class SphsOrchestrator:
    """
    Runs one toolkit command end to end.

    Components (model, lift, basis, noise, modal system) are built on demand from the
    resolved configuration; every run is recorded in the ledger next to the run
    directories.
    """

    def __init__(self,
                 config: RunConfig,
                 config_path: Optional[str] = None,
                 out_dir: str = DEFAULT_OUT,
                 workers: int = 1):
        self.config = config
        self.base_dir = Path(config_path).resolve().parent if config_path else Path.cwd()
        self.out_dir = Path(out_dir)
        self.workers = max(1, int(workers))
        self.logger = logging.getLogger("SphsOrchestrator")

        self.model: Optional[PhsModel] = None
        self.lift: Optional[BoundaryLift] = None
        self.basis: Optional[ModalBasis] = None
        self.system: Optional[ModalSystem] = None

        self._handlers: Dict[str, Callable[[RunDirectory], CommandResult]] = {
            "validate": self.run_validate,
            "spectrum": self.run_spectrum,
            "simulate": self.run_simulate,
            "moments": self.run_moments,
            "energy": self.run_energy,
            "ito": self.run_ito,
            "wellposed": self.run_wellposed,
            "yosida": self.run_yosida,
            "admissibility": self.run_admissibility,
        }

    def _string_params(self) -> StringParams:
        source = self.config.model
        return StringParams(rho=source.rho, T_modulus=source.T_modulus, a=source.a, b=source.b)

    def build_model(self) -> PhsModel:
        if self.model is not None:
            return self.model
        source = self.config.model
        if source.type == "string":
            self.model = build_string_model(self._string_params()).model
        elif source.type == "file":
            path = Path(source.path)
            self.model = load_model(path if path.is_absolute() else self.base_dir / path)
        else:
            self.model = model_from_dict(source.data, name="inline")
        self.logger.info(f"Model {self.model.name}: n={self.model.n}, m={self.model.m}, p={self.model.p}")
        return self.model

    def build_system(self) -> ModalSystem:
        """Model, lift, eigenbasis, noise and their modal projection."""
        if self.system is not None:
            return self.system
        model = self.build_model()
        sim = self.config.sim
        self.lift = build_boundary_lift(model)
        self.basis = eigensystem(discretize_operator(model, sim.N), sim.K)
        spec = build_noise(self.config.noise, self.basis.space, self.basis, base_dir=self.base_dir)
        self.system = project_system(self.basis, self.lift, spec)
        self.logger.info(
            f"Modal system: K={self.system.K}, m={self.system.m}, I={self.system.I}, "
            f"Tr Q={spec.trace:.6g}, abscissa={self.basis.abscissa:.6g}"
        )
        return self.system

    def _signal(self) -> InputSignal:
        return InputSignal.from_config(self.config.inputs, self.system.m)

    def _x0(self) -> np.ndarray:
        return initial_coefficients(self.basis, self.config.initial)

    def _times(self) -> np.ndarray:
        return time_grid(self.config.sim.dt, self.config.sim.steps)

    def _energy_rate(self, system: ModalSystem) -> float:
        if system.spec is None:
            return 0.0
        try:
            return energy_rate(system.spec)
        except ConfigurationError:
            return float("nan")

    def run_validate(self, run: RunDirectory) -> CommandResult:
        model = self.build_model()
        report = validate_model(model, self.config.sim.N)
        generation = generation_check(model)
        lift_report: Dict[str, Any]
        try:
            lift = build_boundary_lift(model)
            residuals = lift_port_residuals(model, lift, tol=1e-10)
            lift_report = {"found": True, "alpha": lift.alpha, "beta": lift.beta, "residuals": residuals}
            lift_ok = residuals.passed
        except ValidationFailure as e:
            self.logger.warning(f"No affine boundary lift: {e}")
            lift_report = {"found": False, "error": str(e)}
            lift_ok = False
        run.write_json("validation.json", {"model": report, "generation": generation, "lift": lift_report})
        passed = report.passed and generation.passed and lift_ok
        return CommandResult(passed, {"model_checks": report.passed, "generation": generation.passed,
                                      "lift": lift_ok})

    def run_spectrum(self, run: RunDirectory) -> CommandResult:
        self.build_system()
        basis = self.basis
        model = basis.model
        sim = self.config.sim
        distances = np.abs(basis.lambdas[:, None] - basis.lambdas[None, :])
        np.fill_diagonal(distances, np.inf)
        # column k of the measured biorthogonality matrix belongs to phi_k
        biorth = np.abs(basis.biorthogonality() - np.eye(basis.K))
        columns: Dict[str, Any] = {
            "k": np.arange(basis.K, dtype=float),
            "re": basis.lambdas.real,
            "im": basis.lambdas.imag,
            "gap": distances.min(axis=1),
            "biorth_defect": biorth.max(axis=0),
            "partner": basis.partner.astype(float),
            "smoothness": basis.smoothness,
        }
        summary: Dict[str, Any] = {
            "K": basis.K,
            "gap": basis.gap,
            "nice": basis.nice,
            "abscissa": basis.abscissa,
            "gram_defect": basis.gram_defect,
            "dropped_unresolved": basis.dropped_unresolved,
        }
        passed = basis.nice

        if self.config.model.type == "string" and self._string_params().is_constant:
            source = self.config.model
            params = self._string_params()
            summary["regime"] = params.regime
            roots = string_spectrum_oracle(source.rho, source.T_modulus, source.a, source.b, 2 * basis.K + 2)
            if roots.size:
                nearest = np.array([roots[np.argmin(np.abs(roots - lam))] for lam in basis.lambdas])
                error = np.abs(basis.lambdas - nearest)
                columns.update(oracle_re=nearest.real, oracle_im=nearest.imag, abs_error=error)
                summary["oracle_max_error"] = float(np.max(error))
                modes = min(ORACLE_MODES, basis.K)
                Ns = [N for N in (sim.N // 2, sim.N, 2 * sim.N) if modes <= N // 4]
                convergence = oracle_convergence(model, Ns, modes)
                summary["oracle_convergence"] = convergence
                passed = passed and convergence.order >= SPECTRAL_ORDER
            else:
                summary["oracle_max_error"] = None
                passed = False

        study = uniform_gap_study(model, [sim.N, 2 * sim.N], basis.K)
        summary["gap_study"] = study
        try:
            summary["flux_residual"] = factorize_flux(model).residual
        except ValidationFailure as e:
            summary["flux_residual"] = None
            summary["flux_error"] = str(e)
        run.write_csv("spectrum.csv", columns)
        run.write_json("spectrum.json", summary)
        passed = passed and study.stable
        return CommandResult(passed, {"gap": basis.gap, "stable": study.stable})

    def run_simulate(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        signal, x0, times = self._signal(), self._x0(), self._times()

        single = simulate_mild(system, signal, x0, times, sim.scheme, sim.seed, path_index=0)
        state = reconstruct_epsilon(system, times, single.coeffs, single.inputs)
        columns: Dict[str, Any] = {"t": times, "path_index": np.zeros(times.size), "energy": state.energy}
        for j in range(system.m):
            columns[f"u_{j}"] = single.inputs[:, j]
        for j in range(state.y.shape[1]):
            columns[f"y_{j}"] = np.real(state.y[:, j])
        columns.update(complex_columns("x", single.coeffs))
        run.write_csv("trajectory.csv", columns)

        ensemble = simulate_ensemble(system, signal, x0, times, sim.scheme, sim.seed, sim.paths,
                                     batch_size=sim.batch_size, workers=self.workers,
                                     record_stride=sim.record_stride)
        energies = system.energy(ensemble.coeffs, ensemble.inputs)
        if ensemble.paths > 1:
            energy_se = np.std(energies, axis=0, ddof=1) / np.sqrt(ensemble.paths)
        else:
            energy_se = np.zeros(ensemble.times.size)
        run.write_csv("ensemble_summary.csv", {"t": ensemble.times, "mean_energy": np.mean(energies, axis=0),
                                               "energy_se": energy_se})

        refinement = self.config.refinement
        studies = {}
        for mode in refinement.weak_modes:
            if mode >= system.K:
                self.logger.warning(f"Weak-residual mode {mode} is outside the basis (K={system.K}); skipped")
                continue
            z = np.zeros(system.K, dtype=complex)
            z[mode] = 1.0
            studies[f"psi_{mode}"] = weak_residual_study(system, signal, x0, z, refinement.dts, sim.t_final,
                                                         sim.seed, refinement.paths)
        run.write_json("weak_residual.json", studies)
        passed = all(study.order >= ORDER_THRESHOLD for study in studies.values())
        return CommandResult(passed, {"paths": sim.paths, "weak_orders": {k: v.order for k, v in studies.items()}})

    def run_moments(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        signal, x0, times = self._signal(), self._x0(), self._times()
        recorded = np.arange(0, times.size, sim.record_stride)

        mean = mean_trajectory(system, signal, x0, times)[recorded]
        cov = covariance_trajectory(system, None, times[recorded])
        solution = MomentSolution(times=times[recorded], mean_coeffs=mean, cov=cov)
        ensemble = simulate_ensemble(system, signal, x0, times, sim.scheme, sim.seed, sim.paths,
                                     batch_size=sim.batch_size, workers=self.workers,
                                     record_stride=sim.record_stride)
        agreement = moment_agreement(ensemble, solution, system.gram, n_se=self.config.moments.n_se)

        columns: Dict[str, Any] = {"t": solution.times}
        columns.update(complex_columns("mean_exact", mean))
        variances = solution.modal_variances()
        for k in range(system.K):
            columns[f"P_{k}_{k}"] = variances[:, k]
        columns.update(
            cov_trace_exact=np.real(np.trace(cov, axis1=1, axis2=2)),
            energy_rate=np.full(solution.times.size, self._energy_rate(system)),
            second_moment_exact=solution.second_moment(system.gram),
        )
        if ensemble.paths > 1:
            mc = mc_moments(ensemble, system.gram)
            columns.update(
                second_moment_mc=mc.second_moment,
                second_moment_se=mc.second_moment_se,
                cov_trace_mc=np.real(np.trace(mc.cov, axis1=1, axis2=2)),
            )
            columns.update(complex_columns("mean_mc", mc.mean))
        run.write_csv("moments.csv", columns)

        continuity_config = self.config.continuity
        continuity = ms_continuity_study(system, signal, x0, times, sim.scheme, sim.seed, sim.paths,
                                         continuity_config.h_steps, continuity_config.t,
                                         batch_size=sim.batch_size, workers=self.workers)
        residual = lyapunov_residual(system, None, times) if times.size > 2 else 0.0
        run.write_json("moments.json", {"agreement": agreement, "continuity": continuity,
                                        "lyapunov_residual": residual})
        return CommandResult(agreement.passed and continuity.passed,
                             {"agreement": agreement.passed, "continuity_slope": continuity.slope})

    def run_energy(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        energy = self.config.energy
        report = energy_balance_check(system, self._signal(), self._x0(), self._times(), sim.scheme, sim.seed,
                                      sim.paths, energy.t_start, energy.t_end, n_se=energy.n_se,
                                      batch_size=sim.batch_size, workers=self.workers)
        run.write_json("energy.json", report)
        return CommandResult(report.passed, {"rate": report.rate.estimate, "full_rate": report.full_rate,
                                              "modal_rate": report.modal_rate})

    def run_ito(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        ito = self.config.ito
        report = ito_isometry_check(system, ito.t, sim.paths, sim.seed, sim.dt, scheme=sim.scheme, n_se=ito.n_se,
                                    batch_size=sim.batch_size, workers=self.workers)
        refinement = self.config.refinement
        series = None
        if ito.t > 0:
            series = convolution_series_study(system, refinement.dts, ito.t, sim.seed, refinement.paths)
        run.write_json("ito.json", {"isometry": report, "convolution_series": series,
                                    "hs_norm_sq_modal": hs_norm_sq(system.spec, self.basis)})
        passed = report.passed and (series is None or series.order >= ORDER_THRESHOLD)
        return CommandResult(passed, {"isometry": report.passed,
                                      "series_order": series.order if series else None})

    def run_wellposed(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        config = self.config.wellposed
        members = default_members(system, config.members, config.initial_modes)
        report = wellposedness_ratio(system, config.tf_grid, sim.dt, members=members, method=config.method,
                                     scheme=sim.scheme, seed=sim.seed, paths=sim.paths,
                                     growth_tolerance=config.growth_tolerance, batch_size=sim.batch_size,
                                     workers=self.workers)
        payload: Dict[str, Any] = {"report": report}
        if report.trace_q == 0:
            accepted = [j for j in range(len(members)) if j not in report.rejected]
            deterministic = [[deterministic_ratio(system, members[j], tf, sim.dt) for tf in report.tf_grid]
                             for j in accepted]
            payload["deterministic_ratios"] = deterministic
            payload["max_path_difference"] = float(np.max(np.abs(np.asarray(deterministic)
                                                                   - np.asarray(report.member_ratios))))
        run.write_json("wellposed.json", payload)
        run.write_csv("wellposed.csv", {"t_f": report.tf_grid, "max_ratio": report.ratios})
        return CommandResult(report.verdict == "consistent with well-posedness",
                             {"ratios": report.ratios, "verdict": report.verdict})

    def run_yosida(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        sim = self.config.sim
        config = self.config.yosida
        signal = self._signal()
        report = yosida_convergence(system, signal, config.lambdas, self._times(), sim.scheme, sim.seed, sim.paths,
                                    x0=self._x0(), batch_size=sim.batch_size)
        residuals, order = residual_study(system, signal, max(config.lambdas), config.residual_dts, sim.t_final,
                                          sim.seed, min(sim.paths, self.config.refinement.paths))
        report.residual_dts = sorted(config.residual_dts, reverse=True)
        report.residuals = residuals
        report.residual_order = order
        run.write_json("yosida.json", report)
        run.write_csv("yosida.csv", {"lambda": report.lambdas, "sup_error": report.sup_errors})
        return CommandResult(report.monotone, {"sup_errors": report.sup_errors, "residual_order": order})

    def run_admissibility(self, run: RunDirectory) -> CommandResult:
        system = self.build_system()
        config = self.config.admissibility
        report = admissibility_integral(system, config.t, config.K_grid, config.tolerance)
        domain = hs_domain_check(system, config.tolerance)
        run.write_json("admissibility.json", {"admissibility": report, "hs_domain": domain})
        run.write_csv("admissibility.csv", {"K": report.K_grid, "partial_sum": report.partial_sums})
        # a divergent verdict describes the configuration; the run itself succeeded
        return CommandResult(True, {"verdict": report.verdict, "hs_domain": domain.passed})

    def run(self, command: str, ledger: Optional[RunLogger] = None) -> Tuple[int, Optional[Path]]:
        """Run one command; returns (exit code, run directory)."""
        if command not in self._handlers:
            raise ConfigurationError(f"Unknown command {command!r}; expected one of {COMMANDS}")
        run_id = ledger.start_run(command, self.config.config_hash(), self.config.sim.seed) if ledger else None
        run_dir: Optional[RunDirectory] = None
        try:
            run_dir = RunDirectory(self.out_dir, command, self.config)
            result = self._handlers[command](run_dir)
            run_dir.finalize({"passed": result.passed})
            exit_code = 0 if result.passed else 1
            if ledger:
                ledger.log_event(run_id, "summary", to_jsonable(result.summary))
            self.logger.info(f"{command} finished: {'passed' if result.passed else 'FAILED'}")
        except SphsError as e:
            exit_code = e.exit_code
            if ledger:
                ledger.log_error(run_id, e, traceback.format_exc())
            else:
                self.logger.error(f"{command} failed with {type(e).__name__}: {e}")
        except Exception as e:
            # unexpected breakdowns inside numpy/scipy count as numerical failures
            exit_code = NumericalError.exit_code
            if ledger:
                ledger.log_error(run_id, e, traceback.format_exc())
            self.logger.exception(f"{command} failed unexpectedly: {e}")
        if ledger:
            ledger.end_run(run_id, exit_code, str(run_dir.path) if run_dir else None)
        return exit_code, run_dir.path if run_dir else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Stochastic port-Hamiltonian systems toolkit")
    parser.add_argument('command', choices=COMMANDS, help='Toolkit command to run')
    parser.add_argument('--config', type=str, required=True, help='Run configuration JSON (or a run manifest)')
    parser.add_argument('--out', type=str, default=None, help=f'Output root for run directories (default {DEFAULT_OUT})')
    parser.add_argument('--seed', type=int, default=None, help='Seed override (unsigned 64-bit)')
    parser.add_argument('--workers', type=int, default=None, help='Worker threads; results do not depend on it')
    parser.add_argument('--log-level', type=str, default=None, help='Logging level (default INFO)')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    env = env_overrides()
    out_dir = args.out if args.out is not None else env.get("out", DEFAULT_OUT)
    log_level = args.log_level if args.log_level is not None else env.get("log_level", "INFO")
    try:
        setup_logging(log_level, Path(out_dir) / "sphs.log")
    except ValueError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return ConfigurationError.exit_code
    logger = logging.getLogger("SphsOrchestrator")

    try:
        workers = args.workers if args.workers is not None else int(env.get("workers", "1"))
        if workers < 1:
            raise ConfigurationError(f"--workers must be >= 1, got {workers}")
        config = load_run_config(args.config, seed=args.seed,
                                 environ={f"SPHS_{key.upper()}": value for key, value in env.items()})
    except ValueError as e:
        logger.error(f"Configuration error: {e}")
        return ConfigurationError.exit_code
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_code

    orchestrator = SphsOrchestrator(config, config_path=args.config, out_dir=out_dir, workers=workers)
    ledger = RunLogger(Path(out_dir) / "ledger.db")
    try:
        exit_code, run_dir = orchestrator.run(args.command, ledger)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    if run_dir is not None:
        logger.info(f"Artifacts in {run_dir}")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
