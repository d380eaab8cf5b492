#!/usr/bin/env python3
"""
Bloch Beam Study Manager

Loads project defaults and environment overrides, builds the band, beam and
field machinery for one study config, and runs the band table, beam
propagation, field snapshots, residual diagnostics and the full convergence
study over the epsilon ladder.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import dotenv
import numpy as np
import psutil

from reporting import StudyResult, StudyRow, emit_plot, fill_orders, write_csv, write_meta, write_table
from solvers.beam_dynamics import default_beam_dt, propagate_beams, residual_coefficients
from solvers.cell_spectral import band_path, regularity_bound
from solvers.errors import BlochBeamError
from solvers.reference_solver import SplitStepConfig, mass_drift, resolution_gate, run_reference
from solvers.wavefield import (
    EDGE_TOL,
    beams_at_final,
    build_superposition_spec,
    edge_ratio,
    exact_initial,
    hj_residual,
    initial_superposition,
    l2_error,
    make_grid,
    superpose,
    write_field_csv,
)
from study_config import StudyConfig, load_config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RESOLUTION_TOL = 1e-8

# failures that abort one epsilon row; numpy and scipy raise the last three directly
ROW_ERRORS = (BlochBeamError, np.linalg.LinAlgError, ValueError, ArithmeticError)

logger = logging.getLogger(__name__)


def _epsilon_tag(epsilon: float) -> str:
    inverse = 1.0 / epsilon
    return f"eps{int(round(inverse))}" if abs(inverse - round(inverse)) < 1e-9 else f"eps{epsilon:.6g}"


def run_epsilon_row(study: StudyConfig, epsilon: float, cell, executor=None, check_resolution: bool = True) -> StudyRow:
    """One ladder entry: initial error, reference run, beam field at T and monitors.

    Module errors abort the row; the message is stored and the row is returned.
    """
    started = time.perf_counter()
    row = StudyRow(epsilon=epsilon)
    excursions_before = cell.diagnostics.snapshot()["taylor_excursions"]
    try:
        initial = study.build_initial()
        external = study.build_external()
        grid = make_grid(study.box, epsilon, study.points_per_period)
        sup_spec = build_superposition_spec(initial, epsilon, study.with_A1, study.dx0_factor, study.r_cut_factor)

        exact0 = exact_initial(initial, grid, epsilon, cell)
        approx0 = initial_superposition(initial, sup_spec, grid, epsilon, external, cell, executor)
        row.err_initial_L2 = l2_error(approx0, exact0)
        row.initial_constant = row.err_initial_L2 / np.sqrt(epsilon)

        ref_cfg = SplitStepConfig.for_grid(grid, study.periodic_potential(), external, study.ref_ct)
        reference = run_reference(exact0, ref_cfg, study.T)
        row.ref_mass_drift = mass_drift(exact0, reference)
        if check_resolution:
            row.resolution_change = resolution_gate(exact0, ref_cfg, study.T, coarse=reference)
            if row.resolution_change > RESOLUTION_TOL:
                logger.warning(
                    f"eps={epsilon:.6g}: doubling the grid changes the reference field by "
                    f"{row.resolution_change:.2e} (> {RESOLUTION_TOL:.0e})"
                )

        dt = default_beam_dt(study.T, study.beam_dt_factor)
        trajectories = propagate_beams(
            sup_spec.x0_nodes, sup_spec.bands, initial, external, cell, study.T, dt, study.with_A1, executor
        )
        field = superpose(beams_at_final(trajectories), sup_spec, grid, epsilon, cell, executor)
        row.err_total_L2 = l2_error(field, reference)

        row.min_ImM = min(trajectory.min_im_m for trajectory in trajectories)
        row.max_solvability = max(trajectory.max_solvability for trajectory in trajectories)
        row.min_gap = min(
            cell.local(state.p, state.band).gap for trajectory in trajectories for state in trajectory.states
        )
        row.max_regularity = max(
            regularity_bound(cell.local(trajectory.final.p, trajectory.band, with_second=True))
            for trajectory in trajectories
        )
        row.max_beam_modulus = field.max_modulus()
        row.edge_ratio = max(edge_ratio(reference), edge_ratio(field))
        if row.edge_ratio > EDGE_TOL:
            logger.warning(f"eps={epsilon:.6g}: field reaches the box edge (ratio {row.edge_ratio:.2e})")
    except ROW_ERRORS as exc:
        row.error = f"{type(exc).__name__}: {exc}"
        logger.error(f"eps={epsilon:.6g} aborted: {row.error}")
    row.taylor_excursions = cell.diagnostics.snapshot()["taylor_excursions"] - excursions_before
    row.runtime_s = time.perf_counter() - started
    return row


def run_convergence_study(study: StudyConfig, executor=None, cell=None, check_resolution: bool = True) -> StudyResult:
    """Every ladder entry in order, then observed orders between neighbours."""
    cell = cell or study.build_cell()
    result = StudyResult()
    for epsilon in study.epsilons:
        result.rows.append(run_epsilon_row(study, epsilon, cell, executor, check_resolution))
        rss_mb = psutil.Process().memory_info().rss / 2 ** 20
        result.metadata["peak_rss_mb"] = max(result.metadata.get("peak_rss_mb", 0.0), rss_mb)
    fill_orders(result.rows)
    result.metadata["cell_diagnostics"] = cell.diagnostics.snapshot()
    moduli = [row.max_beam_modulus for row in result.rows if row.completed]
    result.metadata["max_beam_modulus"] = max(moduli) if moduli else float("nan")
    return result


def run_a1_ablation(study: StudyConfig, epsilon: float, cell, executor=None) -> Dict[str, Any]:
    """Total error at one epsilon with and without the first-order corrector."""
    with_row = run_epsilon_row(study.model_copy(update={"with_A1": True}), epsilon, cell, executor,
                               check_resolution=False)
    without_row = run_epsilon_row(study.model_copy(update={"with_A1": False}), epsilon, cell, executor,
                                  check_resolution=False)
    ablation = {
        "epsilon": epsilon,
        "err_total_with_A1": with_row.err_total_L2,
        "err_total_without_A1": without_row.err_total_L2,
        "no_a1_not_better": None,
    }
    if not (with_row.completed and without_row.completed):
        return ablation
    ablation["no_a1_not_better"] = bool(without_row.err_total_L2 >= with_row.err_total_L2)
    if not ablation["no_a1_not_better"]:
        logger.warning(
            f"eps={epsilon:.6g}: dropping A1 lowers the total error "
            f"({without_row.err_total_L2:.3e} < {with_row.err_total_L2:.3e})"
        )
    return ablation


class StudyManager:
    """Runs one study config through the requested subcommand."""

    def __init__(self, config_path, output_dir: Optional[str] = None, workers: Optional[int] = None,
                 serial: bool = False, with_a1: Optional[bool] = None, epsilon: Optional[float] = None,
                 verbose: bool = False):
        # Load environment variables from .env file
        dotenv.load_dotenv()

        self.project_root = Path(__file__).parent.resolve()
        self.config_file = self.project_root / "config.json"

        self.logger = logging.getLogger('StudyManager')
        self._load_config()

        level = os.getenv("BLOCHBEAM_LOG_LEVEL") or ("INFO" if verbose else self.default_log_level)
        logging.basicConfig(level=getattr(logging, level.upper(), logging.WARNING), format=LOG_FORMAT)

        self.config_path = Path(config_path)
        self.study = load_config(self.config_path, self.study_defaults)
        for warning in self.study.warnings:
            self.logger.warning(warning)

        overrides: Dict[str, Any] = {}
        if with_a1 is not None:
            overrides["with_A1"] = with_a1
        if serial:
            overrides["parallel"] = False
        if epsilon is not None:
            overrides["epsilons"] = [epsilon]
        if overrides:
            self.study = self.study.model_copy(update=overrides)

        self.output_dir = Path(output_dir or self.study.output_dir or self.default_output_dir)
        self.workers = workers or self.study.workers or self.default_workers
        self.cell = self.study.build_cell()
        if not self.study.build_external().bounded:
            self.logger.info(f"external potential '{self.study.external_form}' is unbounded; box {self.study.box} must contain the dynamics")

    def _load_config(self):
        """Load project defaults from config.json, then apply environment overrides."""
        defaults: Dict[str, Any] = {}
        try:
            if self.config_file.exists():
                with open(self.config_file, 'r') as f:
                    defaults = json.load(f).get("study_defaults", {})
        except (OSError, ValueError) as e:
            self.logger.error(f"Error loading config file {self.config_file}: {e}")
            defaults = {}

        self.default_log_level = str(defaults.get("log_level", "WARNING"))
        self.default_output_dir = os.getenv("BLOCHBEAM_OUTPUT_DIR", defaults.get("output_dir", "results"))
        workers = os.getenv("BLOCHBEAM_WORKERS", defaults.get("workers"))
        try:
            self.default_workers = int(workers) if workers else (psutil.cpu_count(logical=False) or 1)
        except ValueError:
            self.logger.error(f"Ignoring invalid worker count '{workers}'")
            self.default_workers = psutil.cpu_count(logical=False) or 1
        self.study_defaults = {
            key: defaults[key] for key in ("gap_min", "points_per_period", "taylor_radius", "fd_step")
            if key in defaults
        }

    @contextmanager
    def _executor(self) -> Iterator[Optional[ThreadPoolExecutor]]:
        if not self.study.parallel or self.workers <= 1:
            yield None
            return
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            yield executor

    def _metadata(self) -> Dict[str, Any]:
        return {
            "config": str(self.config_path),
            "workers": self.workers if self.study.parallel else 1,
            "with_A1": self.study.with_A1,
            "T": self.study.T,
            "epsilons": list(self.study.epsilons),
        }

    def run_bands(self, k_points: int = 101) -> Path:
        """Band energies over the Brillouin zone -> bands.csv."""
        n_bands = max(self.study.bands) + 2
        ks, energies, min_gap = band_path(self.cell.potential, self.cell.basis, n_bands, k_points)
        header = ["k"] + [f"E_{n}" for n in range(1, n_bands + 1)] + ["min_gap"]
        records = [[float(k)] + [float(e) for e in row] + [float(gap)] for k, row, gap in zip(ks, energies, min_gap)]
        path = write_table(self.output_dir / "bands.csv", header, records)
        self.logger.info(f"wrote {path}")
        return path

    def run_propagate(self) -> Path:
        """Final beam states and drift monitors for the first ladder entry -> trajectories.csv."""
        epsilon = self.study.epsilons[0]
        initial = self.study.build_initial()
        external = self.study.build_external()
        sup_spec = build_superposition_spec(initial, epsilon, self.study.with_A1, self.study.dx0_factor)
        dt = default_beam_dt(self.study.T, self.study.beam_dt_factor)
        with self._executor() as executor:
            trajectories = propagate_beams(sup_spec.x0_nodes, sup_spec.bands, initial, external, self.cell,
                                           self.study.T, dt, self.study.with_A1, executor)
        header = ["x0", "band", "t", "xt", "p", "S", "re_M", "im_M", "re_a", "im_a",
                  "min_ImM", "energy_drift", "max_solvability"]
        records = []
        for trajectory in trajectories:
            s = trajectory.final
            records.append([s.x0, s.band, s.t, s.xt, s.p, s.S, s.M.real, s.M.imag, s.a.real, s.a.imag,
                            trajectory.min_im_m, trajectory.energy_drift, trajectory.max_solvability])
        path = write_table(self.output_dir / "trajectories.csv", header, records)
        self.logger.info(f"wrote {path} ({len(trajectories)} beams)")
        return path

    def run_simulate(self) -> List[Path]:
        """Beam superposition at T for every ladder entry -> field_beam_eps<i>.csv."""
        initial = self.study.build_initial()
        external = self.study.build_external()
        dt = default_beam_dt(self.study.T, self.study.beam_dt_factor)
        paths = []
        with self._executor() as executor:
            for epsilon in self.study.epsilons:
                grid = make_grid(self.study.box, epsilon, self.study.points_per_period)
                sup_spec = build_superposition_spec(initial, epsilon, self.study.with_A1,
                                                    self.study.dx0_factor, self.study.r_cut_factor)
                trajectories = propagate_beams(sup_spec.x0_nodes, sup_spec.bands, initial, external, self.cell,
                                               self.study.T, dt, self.study.with_A1, executor)
                field = superpose(beams_at_final(trajectories), sup_spec, grid, epsilon, self.cell, executor)
                paths.append(write_field_csv(field, self.output_dir / f"field_beam_{_epsilon_tag(epsilon)}.csv"))
        return paths

    def run_reference(self) -> List[Path]:
        """Split-step reference at T for every ladder entry -> field_ref_eps<i>.csv."""
        initial = self.study.build_initial()
        external = self.study.build_external()
        paths = []
        for epsilon in self.study.epsilons:
            grid = make_grid(self.study.box, epsilon, self.study.points_per_period)
            exact0 = exact_initial(initial, grid, epsilon, self.cell)
            cfg = SplitStepConfig.for_grid(grid, self.study.periodic_potential(), external, self.study.ref_ct)
            reference = run_reference(exact0, cfg, self.study.T)
            self.logger.info(f"eps={epsilon:.6g}: reference mass drift {mass_drift(exact0, reference):.2e}")
            paths.append(write_field_csv(reference, self.output_dir / f"field_ref_{_epsilon_tag(epsilon)}.csv"))
        return paths

    def run_residual(self) -> Path:
        """Hamilton-Jacobi residual and residual coefficients at T per beam -> residual.csv."""
        epsilon = self.study.epsilons[0]
        initial = self.study.build_initial()
        external = self.study.build_external()
        with_a1 = self.study.with_A1
        sup_spec = build_superposition_spec(initial, epsilon, with_a1, self.study.dx0_factor)
        dt = default_beam_dt(self.study.T, self.study.beam_dt_factor)
        offsets = self.study.residual_offsets
        with self._executor() as executor:
            trajectories = propagate_beams(sup_spec.x0_nodes, sup_spec.bands, initial, external, self.cell,
                                           self.study.T, dt, with_a1, executor)
        header = (["x0", "band"] + [f"h{i}" for i in range(len(offsets))]
                  + [f"F{i}" for i in range(len(offsets))]
                  + [f"ratio_{i}" for i in range(len(offsets) - 1)]
                  + ["c1_slope", "c2_norm", "a1_norm", "solvability"])
        records = []
        for trajectory in trajectories:
            state = trajectory.final
            values = hj_residual(state, offsets, external, self.cell, self.study.residual_taylor_order)
            ratios = [a / b if b > 0 else float("nan") for a, b in zip(values, values[1:])]
            coefficients = residual_coefficients(state, external, self.cell, trajectory.final_A1(), with_a1)
            records.append([state.x0, state.band] + [float(h) for h in offsets] + values + ratios + [
                coefficients["c1_slope"], coefficients["c2_norm"],
                coefficients["a1_norm"], coefficients["solvability"],
            ])
        return write_table(self.output_dir / "residual.csv", header, records)

    def run_converge(self) -> StudyResult:
        """Full pipeline -> convergence.csv, convergence.svg, study_meta.json."""
        with self._executor() as executor:
            result = run_convergence_study(self.study, executor, self.cell)
            if self.study.with_A1:
                result.metadata["a1_ablation"] = run_a1_ablation(self.study, max(self.study.epsilons), self.cell, executor)
        result.metadata.update(self._metadata())
        write_csv(result, self.output_dir / "convergence.csv")
        emit_plot(result, self.output_dir / "convergence.svg")
        write_meta(result, self.output_dir / "study_meta.json")
        for row in result.rows:
            status = "ok" if row.completed else f"FAILED ({row.error})"
            self.logger.info(f"eps={row.epsilon:.6g}: initial {row.err_initial_L2:.3e}, total {row.err_total_L2:.3e} {status}")
        return result
