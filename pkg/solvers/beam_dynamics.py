"""
Gaussian Beam Dynamics

Ray, phase, Riccati and amplitude equations of one Bloch-band Gaussian beam

    d/dt xt = E'(p)              d/dt p = -V_e'(xt)
    d/dt S  = p E'(p) - E(p) - V_e(xt)
    d/dt M  = -E''(p) M^2 - V_e''(xt)
    d/dt a  = a (V_e'(xt) <d_k z, z> - 1/2 E''(p) M)

integrated with fixed-step classical RK4, plus the on-ray first-order
corrector A1 and the monitors used by the convergence studies.
"""

import logging
from concurrent.futures import Executor, as_completed
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from solvers.catalog import ExternalPotential, InitialDataSpec
from solvers.errors import (
    ConfigurationError,
    GapViolationError,
    InconsistencyError,
    InvariantViolation,
    LaunchError,
    PositivityLossError,
)

logger = logging.getLogger(__name__)

DEFAULT_SOLVABILITY_TOL = 1e-8
PROJECTION_TOL = 1e-8


@dataclass(frozen=True)
class BeamState:
    t: float
    x0: float
    band: int
    xt: float
    p: float
    S: float
    M: complex
    a: complex

    def as_vector(self) -> np.ndarray:
        return np.array([self.xt, self.p, self.S, self.M, self.a], dtype=complex)

    @classmethod
    def from_vector(cls, t: float, x0: float, band: int, y: np.ndarray) -> "BeamState":
        return cls(
            t=float(t), x0=x0, band=band,
            xt=float(y[0].real), p=float(y[1].real), S=float(y[2].real),
            M=complex(y[3]), a=complex(y[4]),
        )

    def check(self) -> None:
        if not self.M.imag > 0.0:
            raise PositivityLossError(
                f"Im(M) = {self.M.imag:.3e} <= 0 at t={self.t:.6g} (x0={self.x0:.6g}, band {self.band})"
            )
        if not np.all(np.isfinite([self.xt, self.p, self.S, abs(self.a)])):
            raise InvariantViolation(f"non-finite beam state at t={self.t:.6g} (x0={self.x0:.6g})")


@dataclass
class BeamTrajectory:
    dt: float
    states: List[BeamState]
    A1_coeffs: Optional[List[np.ndarray]] = None
    max_solvability: float = 0.0
    min_im_m: float = np.inf
    energy_drift: float = 0.0

    @property
    def final(self) -> BeamState:
        return self.states[-1]

    @property
    def x0(self) -> float:
        return self.states[0].x0

    @property
    def band(self) -> int:
        return self.states[0].band

    def final_A1(self) -> Optional[np.ndarray]:
        return None if self.A1_coeffs is None else self.A1_coeffs[-1]


def default_beam_dt(T: float, factor: float = 1.0) -> float:
    return 1e-3 * min(1.0, T if T > 0 else 1.0) * factor


def project_amplitude(x0: float, n: int, spec: InitialDataSpec, cell, quadrature_points: int = 256) -> complex:
    """Projection of g(x0, .) onto z_n(S0'(x0), .) by cell quadrature."""
    k = spec.phase.d1(x0)
    y = 2.0 * np.pi * np.arange(quadrature_points) / quadrature_points
    g = np.zeros(quadrature_points, dtype=complex)
    for band in spec.bands:
        pair = cell.eigenpair(k, band)
        g += spec.amplitude(band, x0) * pair.values(y)
    target = cell.eigenpair(k, n).values(y)
    return complex(np.sum(g * np.conj(target)) * (2.0 * np.pi / quadrature_points))


def init_beam(x0: float, n: int, spec: InitialDataSpec, cell, check_projection: bool = True) -> BeamState:
    lo, hi = spec.K0
    if not lo <= x0 <= hi:
        raise ConfigurationError(f"launch point {x0:.6g} outside K0 [{lo:.6g}, {hi:.6g}]")
    if n not in spec.envelopes:
        raise ConfigurationError(f"band {n} has no envelope in the initial data")
    p = spec.phase.d1(x0)
    try:
        cell.local(p, n)
    except GapViolationError as exc:
        raise LaunchError(f"cannot launch band {n} from x0={x0:.6g} (p={p:.6g}): {exc}") from exc

    a = complex(spec.amplitude(n, x0))
    if check_projection:
        projected = project_amplitude(x0, n, spec, cell)
        if abs(projected - a) > PROJECTION_TOL * max(1.0, abs(a)):
            logger.warning(f"projection self-check at x0={x0:.6g}, band {n}: |{projected:.6g} - {a:.6g}| too large")

    state = BeamState(
        t=0.0, x0=float(x0), band=n, xt=float(x0), p=float(p),
        S=float(spec.phase.value(x0)), M=complex(spec.phase.d2(x0), 1.0), a=a,
    )
    state.check()
    return state


def _rates(y: np.ndarray, band: int, Ve: ExternalPotential, cell) -> np.ndarray:
    xt, p, M, a = y[0].real, y[1].real, y[3], y[4]
    data = cell.local(p, band)
    force = Ve.d1(xt)
    return np.array([
        data.E1,
        -force,
        p * data.E1 - data.energy - Ve.value(xt),
        -data.E2 * M ** 2 - Ve.d2(xt),
        a * (force * data.berry - 0.5 * data.E2 * M),
    ], dtype=complex)


def ode_rhs(state: BeamState, Ve: ExternalPotential, cell) -> np.ndarray:
    """Time derivative of (xt, p, S, M, a) as a complex 5-vector."""
    return _rates(state.as_vector(), state.band, Ve, cell)


def _rk4_step(f: Callable, y: np.ndarray, h: float, *args) -> np.ndarray:
    k1 = f(y, *args)
    k2 = f(y + 0.5 * h * k1, *args)
    k3 = f(y + 0.5 * h * k2, *args)
    k4 = f(y + h * k3, *args)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def hamiltonian_energy(state: BeamState, Ve: ExternalPotential, cell) -> float:
    """Ray energy E(p) + V_e(xt), conserved by the bicharacteristic flow."""
    return cell.energy(state.p, state.band) + Ve.value(state.xt)


def _first_order_source(state: BeamState, Ve: ExternalPotential, cell) -> np.ndarray:
    # L A0 on the ray, with A0 = a z(k(t, x), y)
    data = cell.local(state.p, state.band)
    a_dot = ode_rhs(state, Ve, cell)[4]
    M, a = state.M, state.a
    k_t = -Ve.d1(state.xt) - data.E1 * M
    hk_dkz = (data.pair.basis.modes + state.p) * data.dkz
    return a_dot * data.z + a * (k_t * data.dkz + M * hk_dkz + 0.5 * M * data.z)


def solvability_residual(state: BeamState, Ve: ExternalPotential, cell) -> float:
    """|<L A0, z>| / |a| (zero when a vanishes)."""
    if state.a == 0:
        return 0.0
    data = cell.local(state.p, state.band)
    source = _first_order_source(state, Ve, cell)
    return abs(np.vdot(data.z, source)) / abs(state.a)


def compute_A1_on_ray(state: BeamState, Ve: ExternalPotential, cell, tol_solvability: float = DEFAULT_SOLVABILITY_TOL) -> np.ndarray:
    """First-order corrector A1 at k = p(t): (H - E) A1 = i (L A0 - <L A0, z> z), <A1, z> = 0."""
    data = cell.local(state.p, state.band)
    source = _first_order_source(state, Ve, cell)
    overlap = np.vdot(data.z, source)
    if abs(overlap) > tol_solvability * abs(state.a):
        raise InconsistencyError(
            f"solvability violated at t={state.t:.6g} (x0={state.x0:.6g}, band {state.band}): "
            f"|<LA0, z>| = {abs(overlap):.3e}, |a| = {abs(state.a):.3e}"
        )
    return 1j * cell.resolvent(data, source)


def residual_coefficients(state: BeamState, Ve: ExternalPotential, cell, A1: Optional[np.ndarray] = None,
                          with_a1: bool = True) -> Dict[str, float]:
    """On-ray magnitudes of the residual terms c1 and c2 of one beam.

    With ``with_a1`` off the corrector is left out and a1_norm is 0.
    """
    data = cell.local(state.p, state.band, with_second=True)
    if not with_a1:
        A1 = np.zeros(0, dtype=complex)
    elif A1 is None:
        A1 = compute_A1_on_ray(state, Ve, cell)
    slope = -1j * state.a * data.berry * (data.E2 * state.M ** 2 + Ve.d2(state.xt))
    return {
        "c1_slope": float(abs(slope)),
        "c2_norm": float(abs(state.a) * abs(state.M) ** 2 * np.linalg.norm(data.dk2z)),
        "a1_norm": float(np.linalg.norm(A1)),
        "solvability": solvability_residual(state, Ve, cell),
    }


def rk4_propagate(state0: BeamState, Ve: ExternalPotential, cell, T: float, dt: float) -> BeamTrajectory:
    """Integrate one beam to time T; dt is shrunk so that it divides T."""
    if not dt > 0:
        raise ConfigurationError(f"beam time step must be positive, got {dt}")
    if T < 0:
        raise ConfigurationError(f"final time must be non-negative, got {T}")
    n_steps = int(np.ceil(T / dt - 1e-9)) if T > 0 else 0
    step = T / n_steps if n_steps else dt

    state0.check()
    energy0 = hamiltonian_energy(state0, Ve, cell)
    trajectory = BeamTrajectory(dt=step, states=[state0], min_im_m=state0.M.imag,
                                max_solvability=solvability_residual(state0, Ve, cell))
    y = state0.as_vector()
    for index in range(1, n_steps + 1):
        y = _rk4_step(_rates, y, step, state0.band, Ve, cell)
        t = T if index == n_steps else index * step
        state = BeamState.from_vector(t, state0.x0, state0.band, y)
        state.check()
        trajectory.states.append(state)
        trajectory.min_im_m = min(trajectory.min_im_m, state.M.imag)
        trajectory.max_solvability = max(trajectory.max_solvability, solvability_residual(state, Ve, cell))
        trajectory.energy_drift = max(trajectory.energy_drift, abs(hamiltonian_energy(state, Ve, cell) - energy0))
    logger.debug(
        f"beam x0={state0.x0:.6g} band {state0.band}: {n_steps} steps, "
        f"min Im M {trajectory.min_im_m:.3e}, energy drift {trajectory.energy_drift:.2e}"
    )
    return trajectory


def _propagate_one(x0: float, band: int, spec: InitialDataSpec, Ve: ExternalPotential, cell,
                   T: float, dt: float, with_a1: bool) -> BeamTrajectory:
    trajectory = rk4_propagate(init_beam(x0, band, spec, cell), Ve, cell, T, dt)
    if with_a1:
        trajectory.A1_coeffs = [compute_A1_on_ray(state, Ve, cell) for state in trajectory.states]
    return trajectory


def propagate_beams(
    x0_nodes: Sequence[float],
    bands: Sequence[int],
    spec: InitialDataSpec,
    Ve: ExternalPotential,
    cell,
    T: float,
    dt: float,
    with_a1: bool = True,
    executor: Optional[Executor] = None,
) -> List[BeamTrajectory]:
    """Propagate every active (x0, band) beam; results ascend in x0, then band."""
    jobs = [
        (float(x0), int(band)) for x0 in sorted(x0_nodes) for band in sorted(bands)
        if spec.is_active(int(band), float(x0))
    ]
    if executor is None:
        return [_propagate_one(x0, band, spec, Ve, cell, T, dt, with_a1) for x0, band in jobs]

    results: List[Optional[BeamTrajectory]] = [None] * len(jobs)
    futures = {
        executor.submit(_propagate_one, x0, band, spec, Ve, cell, T, dt, with_a1): index
        for index, (x0, band) in enumerate(jobs)
    }
    for future in as_completed(futures):
        results[futures[future]] = future.result()
    return results
