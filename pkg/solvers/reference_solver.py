"""
Split-Step Reference Solver

Strang-split Fourier stepping of

    i eps d_t Psi = -eps^2/2 d_x^2 Psi + (V(x/eps) + V_e(x)) Psi

on the periodic box of a SpatialGrid. Both sub-flows are exact unitary
multipliers, so mass is conserved to round-off.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import scipy.fft

from solvers.catalog import ExternalPotential
from solvers.cell_spectral import PeriodicPotential
from solvers.errors import ConfigurationError, InstabilityError
from solvers.wavefield import MIN_POINTS_PER_PERIOD, SpatialGrid, WaveField, l2_error

logger = logging.getLogger(__name__)

DEFAULT_CT = 0.5
FINITE_CHECK_EVERY = 64


def dt_max(epsilon: float, ct: float = DEFAULT_CT) -> float:
    return ct * epsilon ** 1.5


@dataclass(frozen=True)
class SplitStepConfig:
    grid: SpatialGrid
    epsilon: float
    dt: float
    potential: PeriodicPotential
    external: ExternalPotential
    ct: float = DEFAULT_CT

    def __post_init__(self):
        errors = []
        if self.grid.epsilon != self.epsilon:
            errors.append(f"grid built for eps={self.grid.epsilon} used at eps={self.epsilon}")
        if not 0.0 < self.dt <= dt_max(self.epsilon, self.ct) * (1.0 + 1e-12):
            errors.append(
                f"dt = {self.dt:.4g} outside (0, {dt_max(self.epsilon, self.ct):.4g}] "
                f"= (0, {self.ct} eps^1.5]"
            )
        limit = 2.0 * np.pi * self.epsilon / MIN_POINTS_PER_PERIOD
        if self.grid.dx > limit * (1.0 + 1e-12):
            errors.append(f"grid spacing {self.grid.dx:.4g} exceeds 2 pi eps / 16 = {limit:.4g}")
        if errors:
            raise ConfigurationError("; ".join(errors), errors)

    @classmethod
    def for_grid(cls, grid: SpatialGrid, potential: PeriodicPotential, external: ExternalPotential,
                 ct: float = DEFAULT_CT, dt: Optional[float] = None) -> "SplitStepConfig":
        return cls(grid, grid.epsilon, dt if dt is not None else dt_max(grid.epsilon, ct), potential, external, ct)

    def total_potential(self) -> np.ndarray:
        x = self.grid.x
        return self.potential(x / self.epsilon) + self.external.value(x)

    def frequencies(self) -> np.ndarray:
        return 2.0 * np.pi * scipy.fft.fftfreq(self.grid.n_points, d=self.grid.dx)

    def multipliers(self, dt: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Half-step potential phase and full-step kinetic multiplier."""
        dt = self.dt if dt is None else dt
        half_potential = np.exp(-0.5j * self.total_potential() * dt / self.epsilon)
        kinetic = np.exp(-0.5j * self.epsilon * self.frequencies() ** 2 * dt)
        return half_potential, kinetic


def _step(values: np.ndarray, half_potential: np.ndarray, kinetic: np.ndarray) -> np.ndarray:
    values = values * half_potential
    values = scipy.fft.ifft(scipy.fft.fft(values) * kinetic)
    return values * half_potential


def strang_step(field: WaveField, cfg: SplitStepConfig) -> WaveField:
    if not field.grid.same_as(cfg.grid):
        raise ConfigurationError("field and split-step configuration use different grids")
    half_potential, kinetic = cfg.multipliers()
    return WaveField(field.grid, _step(field.values, half_potential, kinetic), field.t + cfg.dt)


def run_reference(initial: WaveField, cfg: SplitStepConfig, T: float) -> WaveField:
    """Field at time T; dt is lowered so that a whole number of steps reaches T."""
    if T < 0:
        raise ConfigurationError(f"final time must be non-negative, got {T}")
    if not initial.grid.same_as(cfg.grid):
        raise ConfigurationError("initial field and split-step configuration use different grids")
    if T == 0:
        return initial.copy()

    n_steps = int(np.ceil(T / cfg.dt - 1e-9))
    dt = T / n_steps
    half_potential, kinetic = cfg.multipliers(dt)
    values = initial.values.copy()
    for step in range(1, n_steps + 1):
        values = _step(values, half_potential, kinetic)
        if (step % FINITE_CHECK_EVERY == 0 or step == n_steps) and not np.all(np.isfinite(values)):
            raise InstabilityError(step)
    logger.debug(f"reference run eps={cfg.epsilon:.6g}: {n_steps} steps of dt={dt:.3e} on {cfg.grid.n_points} points")
    return WaveField(initial.grid, values, initial.t + T)


def mass_drift(initial: WaveField, final: WaveField) -> float:
    """Relative change of the discrete L2 mass."""
    before = np.sqrt(np.sum(np.abs(initial.values) ** 2))
    after = np.sqrt(np.sum(np.abs(final.values) ** 2))
    return float(abs(after - before) / before) if before > 0 else 0.0


def free_gaussian(x, t: float, x0: float, p0: float, M0: complex, a0: complex, epsilon: float) -> np.ndarray:
    """Exact free evolution of a0 e^{i Phi/eps}, Phi = p0 (x - x0) + M0 (x - x0)^2 / 2.

    For E(k) = k^2/2 and no external potential the Gaussian beam is exact:
    xt = x0 + p0 t, S = p0^2 t / 2, M = M0 / (1 + M0 t), a = a0 (1 + M0 t)^-1/2.
    """
    x = np.asarray(x, dtype=float)
    spread = 1.0 + M0 * t
    xt = x0 + p0 * t
    M = M0 / spread
    h = x - xt
    phase = 0.5 * p0 ** 2 * t + p0 * h + 0.5 * M * h ** 2
    return a0 / np.sqrt(spread) * np.exp(1j * phase / epsilon)


def refine_field(field: WaveField, factor: int = 2) -> WaveField:
    """Trigonometric interpolation onto a grid with ``factor`` times more points."""
    n = field.grid.n_points
    spectrum = scipy.fft.fft(field.values)
    padded = np.zeros(n * factor, dtype=complex)
    half = n // 2
    padded[:half] = spectrum[:half]
    padded[-half:] = spectrum[-half:]
    # split the Nyquist mode between +/- frequencies
    padded[half] = 0.5 * spectrum[half]
    padded[-half] = 0.5 * spectrum[half]
    values = scipy.fft.ifft(padded) * factor
    return WaveField(field.grid.refined(factor), values, field.t)


def resolution_gate(initial: WaveField, cfg: SplitStepConfig, T: float, coarse: Optional[WaveField] = None) -> float:
    """L2 change of the reference field at T when the grid is doubled.

    ``coarse`` is the reference already computed on ``cfg.grid``, if any.
    """
    if coarse is None:
        coarse = run_reference(initial, cfg, T)
    fine_initial = refine_field(initial)
    fine_cfg = replace(cfg, grid=fine_initial.grid)
    fine = run_reference(fine_initial, fine_cfg, T)
    restricted = WaveField(coarse.grid, fine.values[::2], fine.t)
    return l2_error(coarse, restricted)
