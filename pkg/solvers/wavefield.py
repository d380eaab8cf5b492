"""
Wave Fields and Gaussian Beam Superposition

Physical-space fields at fixed epsilon on a uniform periodic grid, the beam
superposition

    Psi(t, x) = (2 pi eps)^-1/2 dx0 sum_{x0} sum_n (a z(k, x/eps) + eps A1(x/eps)) e^{i Phi / eps},
    k = p + M (x - xt),  Phi = S + p (x - xt) + M (x - xt)^2 / 2

the exact two-scale initial data, discrete L2 norms, the Hamilton-Jacobi
residual monitor and the CSV snapshot format.
"""

import csv
import math
import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from solvers.beam_dynamics import BeamState, BeamTrajectory, compute_A1_on_ray, init_beam, ode_rhs
from solvers.catalog import ExternalPotential, InitialDataSpec
from solvers.cell_spectral import cell_function
from solvers.errors import ConfigurationError, GapViolationError

logger = logging.getLogger(__name__)

MIN_POINTS_PER_PERIOD = 16
DEFAULT_DX0_FACTOR = 0.25
DEFAULT_R_CUT_FACTOR = 6.0
EDGE_TOL = 1e-10
K_ROUNDING = 10


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid x_j = x_lo + j dx, j = 0..n_points-1."""

    x_lo: float
    n_points: int
    dx: float
    epsilon: float

    @property
    def x(self) -> np.ndarray:
        return self.x_lo + self.dx * np.arange(self.n_points)

    @property
    def length(self) -> float:
        return self.n_points * self.dx

    def same_as(self, other: "SpatialGrid") -> bool:
        return (self.x_lo, self.n_points, self.dx, self.epsilon) == (
            other.x_lo, other.n_points, other.dx, other.epsilon
        )

    def refined(self, factor: int = 2) -> "SpatialGrid":
        return SpatialGrid(self.x_lo, self.n_points * factor, self.dx / factor, self.epsilon)


def make_grid(box: Tuple[float, float], epsilon: float, points_per_period: int = MIN_POINTS_PER_PERIOD) -> SpatialGrid:
    """Grid over a box stretched to a whole number of 2*pi*eps periods.

    The point count is the next power of two above points_per_period per period.
    """
    lo, hi = box
    if not 0.0 < epsilon < 1.0:
        raise ConfigurationError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not lo < hi:
        raise ConfigurationError(f"box must satisfy x_lo < x_hi, got {box}")
    if points_per_period < MIN_POINTS_PER_PERIOD:
        raise ConfigurationError(
            f"points_per_period = {points_per_period} does not resolve the eps-period "
            f"(need at least {MIN_POINTS_PER_PERIOD})"
        )
    period = 2.0 * np.pi * epsilon
    cells = int(np.ceil((hi - lo) / period - 1e-9))
    length = cells * period
    n_points = 1 << int(np.ceil(np.log2(points_per_period * cells)))
    return SpatialGrid(x_lo=float(lo), n_points=n_points, dx=length / n_points, epsilon=float(epsilon))


@dataclass
class WaveField:
    grid: SpatialGrid
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.grid.n_points,):
            raise ConfigurationError(
                f"field has {self.values.shape} samples for a grid of {self.grid.n_points} points"
            )

    @property
    def epsilon(self) -> float:
        return self.grid.epsilon

    def copy(self) -> "WaveField":
        return WaveField(self.grid, self.values.copy(), self.t)

    def max_modulus(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0


@dataclass(frozen=True)
class SuperpositionSpec:
    """Quadrature over launch points and the per-beam cutoff rule."""

    x0_nodes: np.ndarray
    dx0: float
    bands: Tuple[int, ...]
    with_A1: bool = True
    r_cut_factor: float = DEFAULT_R_CUT_FACTOR
    r_cut: Optional[float] = None

    def required_r_cut(self, epsilon: float, delta_min: float) -> float:
        return DEFAULT_R_CUT_FACTOR * np.sqrt(epsilon / delta_min)

    def cutoff(self, epsilon: float, delta_min: float) -> float:
        required = self.required_r_cut(epsilon, delta_min)
        radius = self.r_cut if self.r_cut is not None else self.r_cut_factor * np.sqrt(epsilon / delta_min)
        if radius < required * (1.0 - 1e-12):
            raise ConfigurationError(
                f"beam cutoff radius {radius:.4g} below {required:.4g} = 6 sqrt(eps/delta_min)"
            )
        return radius

    def validate(self, epsilon: float) -> None:
        errors = []
        limit = DEFAULT_DX0_FACTOR * np.sqrt(epsilon)
        if self.dx0 > limit * (1.0 + 1e-12):
            errors.append(f"launch spacing dx0 = {self.dx0:.4g} exceeds sqrt(eps)/4 = {limit:.4g}")
        if len(self.x0_nodes) == 0:
            errors.append("no launch points")
        if not self.bands:
            errors.append("no bands selected")
        if errors:
            raise ConfigurationError("; ".join(errors), errors)


def build_superposition_spec(
    initial: InitialDataSpec,
    epsilon: float,
    with_A1: bool = True,
    dx0_factor: float = DEFAULT_DX0_FACTOR,
    r_cut_factor: float = DEFAULT_R_CUT_FACTOR,
    bands: Optional[Sequence[int]] = None,
) -> SuperpositionSpec:
    """Midpoint nodes over K0 with spacing at most dx0_factor * sqrt(eps)."""
    lo, hi = initial.K0
    count = int(np.ceil((hi - lo) / (dx0_factor * np.sqrt(epsilon)) - 1e-9))
    dx0 = (hi - lo) / count
    nodes = lo + dx0 * (np.arange(count) + 0.5)
    spec = SuperpositionSpec(
        x0_nodes=nodes,
        dx0=dx0,
        bands=tuple(sorted(bands if bands is not None else initial.bands)),
        with_A1=with_A1,
        r_cut_factor=r_cut_factor,
    )
    spec.validate(epsilon)
    return spec


def beam_phase(state: BeamState, x):
    """Phi = S + p (x - xt) + M (x - xt)^2 / 2."""
    h = np.asarray(x, dtype=float) - state.xt
    phase = state.S + state.p * h + 0.5 * state.M * h ** 2
    return phase if np.ndim(phase) else complex(phase)


def _window(state: BeamState, grid: SpatialGrid, r_cut: float) -> slice:
    first = int(np.ceil((state.xt - r_cut - grid.x_lo) / grid.dx))
    last = int(np.floor((state.xt + r_cut - grid.x_lo) / grid.dx))
    return slice(max(first, 0), max(min(last + 1, grid.n_points), 0))


def _beam_window(state: BeamState, A1: Optional[np.ndarray], grid: SpatialGrid, epsilon: float,
                 cell, r_cut: float) -> Tuple[slice, np.ndarray]:
    window = _window(state, grid, r_cut)
    x = grid.x_lo + grid.dx * np.arange(window.start, window.stop)
    if x.size == 0:
        return window, np.zeros(0, dtype=complex)
    data = cell.local(state.p, state.band, with_second=True)
    modes = data.pair.basis.modes
    y = x / epsilon
    kappa = state.p + state.M * (x - state.xt)
    profile = state.a * cell_function(cell.evaluate_z(data, kappa), modes, y)
    if A1 is not None:
        profile = profile + epsilon * cell_function(A1, modes, y)
    return window, profile * np.exp(1j * beam_phase(state, x) / epsilon)


def eval_beam(state: BeamState, A1: Optional[np.ndarray], grid: SpatialGrid, epsilon: float,
              cell, r_cut: float) -> np.ndarray:
    """Contribution of one beam on the whole grid (zero beyond r_cut from the ray)."""
    contribution = np.zeros(grid.n_points, dtype=complex)
    window, values = _beam_window(state, A1, grid, epsilon, cell, r_cut)
    contribution[window] = values
    return contribution


def beams_at_final(trajectories: Sequence[BeamTrajectory]) -> List[Tuple[BeamState, Optional[np.ndarray]]]:
    return [(trajectory.final, trajectory.final_A1()) for trajectory in trajectories]


def superpose(
    beams: Sequence[Tuple[BeamState, Optional[np.ndarray]]],
    spec: SuperpositionSpec,
    grid: SpatialGrid,
    epsilon: float,
    cell,
    executor: Optional[Executor] = None,
) -> WaveField:
    """Rectangle-rule superposition of beams sharing one time.

    Each band is accumulated in ascending x0 order and scaled on its own, then
    the bands are added in ascending order, so the field is the sum of the
    single-band fields and serial and threaded assembly give the same bits.
    The cutoff radius is taken per band.
    """
    spec.validate(epsilon)
    ordered = sorted(
        (item for item in beams if item[0].band in spec.bands),
        key=lambda item: (item[0].band, item[0].x0),
    )
    if not ordered:
        raise ConfigurationError("no beams to superpose")
    times = [state.t for state, _ in ordered]
    if max(times) - min(times) > 1e-12:
        raise ConfigurationError(f"beams are not at a common time: t in [{min(times)}, {max(times)}]")
    r_cuts = {}
    for state, _ in ordered:
        r_cuts[state.band] = min(r_cuts.get(state.band, np.inf), state.M.imag / 2.0)
    r_cuts = {band: spec.cutoff(epsilon, delta_min) for band, delta_min in r_cuts.items()}

    def evaluate(item):
        state, A1 = item
        return _beam_window(state, A1 if spec.with_A1 else None, grid, epsilon, cell, r_cuts[state.band])

    windows = list(executor.map(evaluate, ordered)) if executor is not None else [evaluate(item) for item in ordered]
    scale = spec.dx0 / np.sqrt(2.0 * np.pi * epsilon)
    total = np.zeros(grid.n_points, dtype=complex)
    for band in sorted(r_cuts):
        partial = np.zeros(grid.n_points, dtype=complex)
        for (state, _), (window, values) in zip(ordered, windows):
            if state.band == band:
                partial[window] += values
        total += partial * scale
    return WaveField(grid, total, t=ordered[0][0].t)


def launch_beams(initial: InitialDataSpec, spec: SuperpositionSpec, Ve: ExternalPotential, cell) -> List[Tuple[BeamState, Optional[np.ndarray]]]:
    beams = []
    for x0 in spec.x0_nodes:
        for band in spec.bands:
            if not initial.is_active(band, float(x0)):
                continue
            state = init_beam(float(x0), band, initial, cell)
            A1 = compute_A1_on_ray(state, Ve, cell) if spec.with_A1 else None
            beams.append((state, A1))
    return beams


def initial_superposition(
    initial: InitialDataSpec,
    spec: SuperpositionSpec,
    grid: SpatialGrid,
    epsilon: float,
    Ve: ExternalPotential,
    cell,
    executor: Optional[Executor] = None,
) -> WaveField:
    """Superposition at t = 0 with the initial quadratic phase of every launch point."""
    return superpose(launch_beams(initial, spec, Ve, cell), spec, grid, epsilon, cell, executor)


def exact_initial(initial: InitialDataSpec, grid: SpatialGrid, epsilon: float, cell) -> WaveField:
    """Two-scale data sum_n a_n(x) z_n(S0'(x), x/eps) e^{i S0(x)/eps}."""
    x = grid.x
    values = np.zeros(grid.n_points, dtype=complex)
    for band in initial.bands:
        lo, hi = initial.envelopes[band].support()
        active = (x >= lo) & (x <= hi)
        xs = x[active]
        if xs.size == 0:
            continue
        ks = np.round(initial.phase.d1(xs), K_ROUNDING)
        unique_ks, inverse = np.unique(ks, return_inverse=True)
        try:
            coeffs = np.array([cell.eigenpair(k, band).coeffs for k in unique_ks])
        except GapViolationError as exc:
            raise ConfigurationError(f"initial data crosses a band gap violation: {exc}") from exc
        modes = cell.basis.modes
        z = cell_function(coeffs[inverse], modes, xs / epsilon)
        values[active] += initial.amplitude(band, xs) * z
    values *= np.exp(1j * initial.phase.value(x) / epsilon)
    return WaveField(grid, values, t=0.0)


def l2_norm(field: WaveField) -> float:
    return float(np.sqrt(field.grid.dx * np.sum(np.abs(field.values) ** 2)))


def l2_error(first: WaveField, second: WaveField) -> float:
    if not first.grid.same_as(second.grid):
        raise ConfigurationError("L2 error needs both fields on the same grid")
    return float(np.sqrt(first.grid.dx * np.sum(np.abs(first.values - second.values) ** 2)))


def edge_ratio(field: WaveField) -> float:
    """Largest modulus at the two box edges relative to the field maximum."""
    peak = field.max_modulus()
    if peak == 0.0:
        return 0.0
    return float(max(abs(field.values[0]), abs(field.values[-1])) / peak)


def _energy_derivatives(state: BeamState, cell, order: int) -> List[float]:
    data = cell.local(state.p, state.band)
    derivatives = [data.energy, data.E1, data.E2]
    if order == 4:
        h = getattr(cell, "fd_step", 1e-3)
        below = cell.local(state.p - h, state.band).E2
        above = cell.local(state.p + h, state.band).E2
        derivatives += [(above - below) / (2.0 * h), (above - 2.0 * data.E2 + below) / h ** 2]
    return derivatives


def hj_residual(state: BeamState, offsets: Sequence[float], Ve: ExternalPotential, cell,
                taylor_order: int = 2) -> List[float]:
    """|F(t, xt + h)| with F = d_t Phi + E(d_x Phi) + V_e(x) for each offset h.

    E at the complex argument p + M h is its Taylor polynomial about p; order 4
    adds E''' and E'''' from centred differences of E''.
    """
    if taylor_order not in (2, 4):
        raise ConfigurationError(f"taylor_order must be 2 or 4, got {taylor_order}")
    derivatives = _energy_derivatives(state, cell, taylor_order)
    rates = ode_rhs(state, Ve, cell)
    x_dot, p_dot, S_dot, M_dot = rates[0].real, rates[1].real, rates[2].real, rates[3]
    radius = getattr(cell, "taylor_radius", 0.5)

    residuals = []
    for h in offsets:
        shift = state.M * h
        if abs(shift) > radius:
            logger.warning(f"residual offset h={h:g} leaves the Taylor radius (|M h| = {abs(shift):.3f})")
        phase_rate = S_dot + p_dot * h - state.p * x_dot + 0.5 * M_dot * h ** 2 - state.M * h * x_dot
        energy = sum(value * shift ** j / math.factorial(j) for j, value in enumerate(derivatives))
        residuals.append(float(abs(phase_rate + energy + Ve.value(state.xt + h))))
    return residuals


def write_field_csv(field: WaveField, path) -> Path:
    path = Path(path)
    grid = field.grid
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            handle.write(
                f"# epsilon={grid.epsilon:.17g}, t={field.t:.17g}, x_lo={grid.x_lo:.17g}, "
                f"dx={grid.dx:.17g}, n_points={grid.n_points}\n"
            )
            writer = csv.writer(handle)
            writer.writerow(["x", "re", "im"])
            for x, value in zip(grid.x, field.values):
                writer.writerow([f"{x:.17g}", f"{value.real:.17g}", f"{value.imag:.17g}"])
    except OSError as exc:
        raise OSError(f"cannot write field snapshot {path}: {exc}") from exc
    return path


def read_field_csv(path) -> WaveField:
    path = Path(path)
    with path.open(newline="") as handle:
        header = handle.readline().lstrip("#").strip()
        meta: Dict[str, str] = dict(item.strip().split("=", 1) for item in header.split(","))
        reader = csv.reader(handle)
        next(reader)
        rows = [(float(re), float(im)) for _, re, im in reader]
    grid = SpatialGrid(
        x_lo=float(meta["x_lo"]), n_points=int(meta["n_points"]),
        dx=float(meta["dx"]), epsilon=float(meta["epsilon"]),
    )
    values = np.array([complex(re, im) for re, im in rows], dtype=complex)
    return WaveField(grid, values, t=float(meta["t"]))
