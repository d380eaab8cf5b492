"""
Bloch Cell Spectral Solver

Plane-wave discretization of the periodic cell problem

    H(k, y) z = E(k) z,    H(k, y) = 1/2 (-i d/dy + k)^2 + V(y),  y in [0, 2*pi]

and every band quantity the Gaussian beam dynamics needs: energies, the first
and second k-derivatives of the energy and of the gauge-fixed eigenvector,
the Berry-type term <d_k z, z>, Taylor evaluation at complex quasimomentum and
the reduced resolvent (H - E)^-1 on the orthogonal complement of z.

Coefficient vectors c_m, |m| <= M_pw, represent z(y) = (2*pi)^-1/2 sum c_m e^{imy}.
Inner products follow <f, g> = sum f_m conj(g_m), i.e. np.vdot(g, f).
"""

import logging
import threading
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from solvers.errors import (
    ConfigurationError,
    GapViolationError,
    InvariantViolation,
    NumericalError,
    StepTooLargeError,
)

logger = logging.getLogger(__name__)

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

GAUGE_TIE_TOL = 1e-12
GAUGE_OVERLAP_MIN = 0.99
BERRY_REAL_TOL = 1e-8
E2_IMAG_TOL = 1e-6
DEFAULT_GAP_MIN = 1e-6
DEFAULT_FD_STEP = 1e-3
DEFAULT_TAYLOR_RADIUS = 0.5


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=complex)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class PeriodicPotential:
    """Truncated Fourier series V(y) = sum_{|m| <= M_V} v_m e^{imy}."""

    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.ndim != 1 or coeffs.size % 2 != 1:
            raise ConfigurationError("potential coefficients must have odd length 2*M_V + 1")
        if not np.allclose(coeffs[::-1], np.conj(coeffs), rtol=0.0, atol=1e-14):
            raise ConfigurationError("potential is not real-valued: v_{-m} != conj(v_m)")
        object.__setattr__(self, "coeffs", _frozen(coeffs))

    @classmethod
    def from_modes(cls, modes: Dict[int, complex]) -> "PeriodicPotential":
        """Build from the non-negative modes {m: v_m}; v_{-m} is the conjugate."""
        if any(m < 0 for m in modes):
            raise ConfigurationError("only non-negative Fourier modes may be given")
        cutoff = max(modes) if modes else 0
        coeffs = np.zeros(2 * cutoff + 1, dtype=complex)
        for m, value in modes.items():
            value = complex(value)
            if m == 0:
                if abs(value.imag) > 1e-14:
                    raise ConfigurationError("v_0 must be real")
                value = complex(value.real, 0.0)
            coeffs[cutoff + m] = value
            coeffs[cutoff - m] = np.conj(value)
        return cls(coeffs)

    @classmethod
    def zero(cls) -> "PeriodicPotential":
        return cls(np.zeros(1, dtype=complex))

    @property
    def cutoff(self) -> int:
        return self.coeffs.size // 2

    def coefficient(self, m: int) -> complex:
        if abs(m) > self.cutoff:
            return 0j
        return complex(self.coeffs[self.cutoff + m])

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        modes = np.arange(-self.cutoff, self.cutoff + 1)
        values = np.exp(1j * np.multiply.outer(y, modes)) @ self.coeffs
        return values.real


@dataclass(frozen=True)
class PlaneWaveBasis:
    """Basis e^{imy}/sqrt(2*pi), |m| <= cutoff."""

    cutoff: int

    def __post_init__(self):
        if int(self.cutoff) < 1:
            raise ConfigurationError(f"plane-wave cutoff must be positive, got {self.cutoff}")

    @property
    def dimension(self) -> int:
        return 2 * self.cutoff + 1

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.cutoff, self.cutoff + 1)


@dataclass(frozen=True)
class BlochEigenpair:
    band: int
    k: float
    energy: float
    coeffs: np.ndarray
    basis: PlaneWaveBasis
    gauge: str = "raw"

    def values(self, y) -> np.ndarray:
        """z(k, y) sampled at the cell points y."""
        return cell_function(self.coeffs, self.basis.modes, y)


@dataclass(frozen=True)
class BandLocalData:
    """Eigenpair plus its k-derivatives at one quasimomentum."""

    pair: BlochEigenpair
    E1: float
    E2: float
    dkz: np.ndarray
    berry: complex
    gap: float
    pairs: Tuple[BlochEigenpair, ...]
    hamiltonian: np.ndarray
    dk2z: Optional[np.ndarray] = None

    @property
    def k(self) -> float:
        return self.pair.k

    @property
    def energy(self) -> float:
        return self.pair.energy

    @property
    def z(self) -> np.ndarray:
        return self.pair.coeffs


def cell_function(coeffs: np.ndarray, modes: np.ndarray, y) -> np.ndarray:
    """Evaluate (2*pi)^-1/2 sum_m c_m e^{imy}.

    ``coeffs`` is either one vector (shared by every y) or one row per y.
    """
    y = np.asarray(y, dtype=float)
    phases = np.exp(1j * np.multiply.outer(y, modes))
    coeffs = np.asarray(coeffs)
    if coeffs.ndim == 1:
        return INV_SQRT_2PI * (phases @ coeffs)
    return INV_SQRT_2PI * np.sum(coeffs * phases, axis=-1)


def assemble_hamiltonian(k: float, potential: PeriodicPotential, basis: PlaneWaveBasis) -> np.ndarray:
    """Matrix of H(k) in the plane-wave basis: 1/2 (m+k)^2 on the diagonal, v_{m-m'} off it."""
    if basis.cutoff < potential.cutoff:
        raise ConfigurationError(
            f"plane-wave cutoff {basis.cutoff} below potential cutoff {potential.cutoff}"
        )
    dim = basis.dimension
    padded = np.zeros(2 * dim - 1, dtype=complex)
    centre = dim - 1
    padded[centre - potential.cutoff:centre + potential.cutoff + 1] = potential.coeffs
    offsets = np.subtract.outer(np.arange(dim), np.arange(dim)) + centre
    hamiltonian = padded[offsets]
    hamiltonian[np.diag_indices(dim)] += 0.5 * (basis.modes + k) ** 2
    return hamiltonian


def _eigensolve(hamiltonian: np.ndarray, k: float, basis: PlaneWaveBasis, n_bands: int) -> List[BlochEigenpair]:
    dim = basis.dimension
    if not 1 <= n_bands <= dim:
        raise ConfigurationError(f"requested {n_bands} bands from a basis of dimension {dim}")
    try:
        energies, vectors = scipy.linalg.eigh(hamiltonian, subset_by_index=[0, n_bands - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"eigensolver failed at k={k:.12g} with cutoff {basis.cutoff}: {exc}"
        ) from exc
    return [
        BlochEigenpair(
            band=index + 1,
            k=float(k),
            energy=float(energies[index]),
            coeffs=vectors[:, index].copy(),
            basis=basis,
        )
        for index in range(n_bands)
    ]


def solve_bands(k: float, potential: PeriodicPotential, basis: PlaneWaveBasis, n_bands: int) -> List[BlochEigenpair]:
    """Lowest ``n_bands`` eigenpairs of H(k), ascending in energy, raw gauge."""
    return _eigensolve(assemble_hamiltonian(k, potential, basis), k, basis, n_bands)


def _dominant_index(coeffs: np.ndarray) -> int:
    magnitudes = np.abs(coeffs)
    peak = magnitudes.max()
    if peak == 0.0:
        raise InvariantViolation("cannot fix the gauge of a zero vector")
    # ties resolve to the smallest mode index
    return int(np.flatnonzero(magnitudes >= peak - GAUGE_TIE_TOL)[0])


def fix_gauge(pair: BlochEigenpair) -> BlochEigenpair:
    """Rotate the global phase so the largest-modulus coefficient is real positive."""
    coeffs = pair.coeffs
    index = _dominant_index(coeffs)
    dominant = coeffs[index]
    if pair.gauge == "fixed" and dominant.imag == 0.0 and dominant.real > 0.0:
        return pair
    magnitude = abs(dominant)
    fixed = coeffs * (np.conj(dominant) / magnitude)
    fixed[index] = magnitude
    return replace(pair, coeffs=fixed, gauge="fixed")


def band_E1(pair: BlochEigenpair) -> float:
    """dE/dk = <z, (-i d/dy + k) z> (Hellmann-Feynman)."""
    shift = pair.basis.modes + pair.k
    return float(np.sum(shift * np.abs(pair.coeffs) ** 2))


def _neighbor_gap(energies: Sequence[float], n: int) -> Tuple[float, Optional[int]]:
    # energies are sorted, so the nearest other band is a neighbour
    gap, other = np.inf, None
    index = n - 1
    if index > 0 and energies[index] - energies[index - 1] < gap:
        gap, other = energies[index] - energies[index - 1], n - 1
    if index + 1 < len(energies) and energies[index + 1] - energies[index] < gap:
        gap, other = energies[index + 1] - energies[index], n + 1
    return float(gap), other


def _check_gap(k: float, energies: Sequence[float], n: int, gap_min: float) -> float:
    gap, other = _neighbor_gap(energies, n)
    if gap < gap_min:
        raise GapViolationError(k, n, other, gap, gap_min)
    return gap


def band_dkz(pairs: Sequence[BlochEigenpair], n: int, gap_min: float = DEFAULT_GAP_MIN) -> np.ndarray:
    """d_k z_n of the gauge-fixed family, by the first-order perturbation sum.

    The sum over the other bands gives the component orthogonal to z_n; the
    component along z_n is the one that keeps the dominant coefficient real.
    """
    dim = pairs[0].basis.dimension
    if len(pairs) < dim:
        raise ConfigurationError(f"perturbation sum needs all {dim} bands, got {len(pairs)}")
    target = fix_gauge(pairs[n - 1])
    k = target.k
    energies = np.array([pair.energy for pair in pairs])
    _check_gap(k, energies, n, gap_min)

    z = target.coeffs
    vectors = np.column_stack([pair.coeffs for pair in pairs])
    others = np.arange(len(pairs)) != n - 1
    coupling = vectors.conj().T @ ((target.basis.modes + k) * z)
    weights = np.zeros(len(pairs), dtype=complex)
    weights[others] = coupling[others] / (target.energy - energies[others])
    transverse = vectors @ weights

    index = _dominant_index(z)
    alpha = -transverse[index].imag / z[index].real
    return transverse + 1j * alpha * z


def band_E2(pair: BlochEigenpair, E1: float, dkz: np.ndarray) -> float:
    """E'' = 1 + 2 <H_k d_k z, z> - 2 E' <d_k z, z>."""
    hk = pair.basis.modes + pair.k
    value = 1.0 + 2.0 * np.vdot(pair.coeffs, hk * dkz) - 2.0 * E1 * np.vdot(pair.coeffs, dkz)
    if abs(value.imag) > E2_IMAG_TOL:
        raise NumericalError(
            f"E'' at k={pair.k:.12g} band {pair.band} has imaginary residue {value.imag:.3e}"
        )
    return float(value.real)


def band_dk2z(
    potential: PeriodicPotential,
    basis: PlaneWaveBasis,
    k: float,
    n: int,
    h: float = DEFAULT_FD_STEP,
    gap_min: float = DEFAULT_GAP_MIN,
) -> np.ndarray:
    """Centred second difference of gauge-fixed eigenvectors with step h."""
    n_bands = min(n + 1, basis.dimension)
    vectors = []
    for kk in (k - h, k, k + h):
        pairs = solve_bands(kk, potential, basis, n_bands)
        _check_gap(kk, [pair.energy for pair in pairs], n, gap_min)
        vectors.append(fix_gauge(pairs[n - 1]).coeffs)
    minus, centre, plus = vectors
    for label, shifted in (("k-h", minus), ("k+h", plus)):
        overlap = np.vdot(centre, shifted).real
        if overlap < GAUGE_OVERLAP_MIN:
            raise StepTooLargeError(
                f"gauge discontinuity between k={k:.12g} and {label} (h={h:g}): "
                f"Re<z(k'), z(k)> = {overlap:.4f}"
            )
    return (plus - 2.0 * centre + minus) / h ** 2


def band_local_data(
    k: float,
    potential: PeriodicPotential,
    basis: PlaneWaveBasis,
    n: int,
    gap_min: float = DEFAULT_GAP_MIN,
    with_second: bool = False,
    fd_step: float = DEFAULT_FD_STEP,
) -> BandLocalData:
    hamiltonian = assemble_hamiltonian(k, potential, basis)
    pairs = _eigensolve(hamiltonian, k, basis, basis.dimension)
    if not 1 <= n <= len(pairs):
        raise ConfigurationError(f"band index {n} outside 1..{len(pairs)}")
    gap = _check_gap(k, [pair.energy for pair in pairs], n, gap_min)

    pair = fix_gauge(pairs[n - 1])
    pairs[n - 1] = pair
    E1 = band_E1(pair)
    dkz = band_dkz(pairs, n, gap_min)
    berry = complex(np.vdot(pair.coeffs, dkz))
    if abs(berry.real) > BERRY_REAL_TOL:
        raise NumericalError(f"Re<d_k z, z> = {berry.real:.3e} at k={k:.12g} band {n}")
    E2 = band_E2(pair, E1, dkz)
    dk2z = band_dk2z(potential, basis, k, n, fd_step, gap_min) if with_second else None

    hamiltonian.flags.writeable = False
    return BandLocalData(
        pair=replace(pair, coeffs=_frozen(pair.coeffs)),
        E1=E1,
        E2=E2,
        dkz=_frozen(dkz),
        berry=berry,
        gap=gap,
        pairs=tuple(pairs),
        hamiltonian=hamiltonian,
        dk2z=None if dk2z is None else _frozen(dk2z),
    )


def eval_z_taylor(data: BandLocalData, kappa, taylor_radius: float = DEFAULT_TAYLOR_RADIUS, diagnostics=None) -> np.ndarray:
    """z(kappa) ~ z + d_k z (kappa-k) + 1/2 d_k^2 z (kappa-k)^2 for complex kappa.

    Returns one coefficient vector per kappa (shape ``kappa.shape + (D,)``).
    """
    if data.dk2z is None:
        raise ConfigurationError("Taylor evaluation needs second-derivative band data")
    delta = np.asarray(kappa, dtype=complex) - data.k
    offsets = np.abs(delta)
    outside = offsets > taylor_radius
    if np.any(outside):
        count, largest = int(np.count_nonzero(outside)), float(offsets.max())
        if diagnostics is not None:
            diagnostics.record_taylor_excursion(count, largest)
        else:
            logger.warning(f"{count} Taylor evaluations beyond radius {taylor_radius} (max |dk| = {largest:.3f})")
    return (
        data.z
        + np.multiply.outer(delta, data.dkz)
        + 0.5 * np.multiply.outer(delta ** 2, data.dk2z)
    )


def reduced_resolvent_solve(
    hamiltonian: np.ndarray,
    pairs: Sequence[BlochEigenpair],
    n: int,
    rhs: np.ndarray,
    gap_min: float = DEFAULT_GAP_MIN,
) -> np.ndarray:
    """Solve (H - E_n) u = rhs projected off z_n, with <u, z_n> = 0.

    The solve uses the deflated matrix H - E_n + z_n z_n^H, which is regular
    whenever E_n is simple and agrees with H - E_n on the complement of z_n.
    """
    target = pairs[n - 1]
    z = target.coeffs
    rhs = np.asarray(rhs, dtype=complex)
    projected = rhs - np.vdot(z, rhs) * z
    if not np.any(projected):
        return np.zeros_like(projected)
    _check_gap(target.k, [pair.energy for pair in pairs], n, gap_min)

    dim = hamiltonian.shape[0]
    deflated = hamiltonian - target.energy * np.eye(dim) + np.outer(z, z.conj())
    try:
        solution = scipy.linalg.solve(deflated, projected, assume_a="her")
    except np.linalg.LinAlgError as exc:
        raise GapViolationError(target.k, n, None, 0.0, gap_min) from exc
    return solution - np.vdot(z, solution) * z


def regularity_bound(data: BandLocalData) -> float:
    """Sum of ||d_k^b d_y^g z|| over b <= 2, g <= 3 (d_y acts as i*m)."""
    if data.dk2z is None:
        raise ConfigurationError("regularity bound needs second-derivative band data")
    weights = np.abs(data.pair.basis.modes).astype(float)
    total = 0.0
    for vector in (data.z, data.dkz, data.dk2z):
        for order in range(4):
            total += float(np.linalg.norm(weights ** order * vector))
    return total


def band_path(
    potential: PeriodicPotential, basis: PlaneWaveBasis, n_bands: int, k_points: int = 101
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Energies of the lowest bands on a uniform path over the Brillouin zone.

    Returns (ks, energies[k, band], min_gap[k]) where min_gap is the smallest
    separation between consecutive computed bands.
    """
    ks = np.linspace(-0.5, 0.5, k_points)
    energies = np.empty((k_points, n_bands))
    for row, k in enumerate(ks):
        energies[row] = [pair.energy for pair in solve_bands(k, potential, basis, n_bands)]
    if n_bands > 1:
        min_gap = np.diff(energies, axis=1).min(axis=1)
    else:
        min_gap = np.full(k_points, np.inf)
    return ks, energies, min_gap


class BandDiagnostics:
    """Thread-safe record of band-level monitors collected during a run."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        self.min_gap = np.inf
        self.taylor_excursions = 0
        self.max_taylor_offset = 0.0
        self.max_regularity = 0.0

    def record_gap(self, gap: float) -> None:
        with self._lock:
            self.min_gap = min(self.min_gap, gap)

    def record_taylor_excursion(self, count: int, offset: float) -> None:
        with self._lock:
            self.taylor_excursions += count
            self.max_taylor_offset = max(self.max_taylor_offset, offset)

    def record_regularity(self, bound: float) -> None:
        with self._lock:
            self.max_regularity = max(self.max_regularity, bound)

    def snapshot(self) -> Dict[str, float]:
        with self._lock:
            return {
                "min_gap": float(self.min_gap),
                "taylor_excursions": int(self.taylor_excursions),
                "max_taylor_offset": float(self.max_taylor_offset),
                "max_regularity": float(self.max_regularity),
            }


class CellServices:
    """Band services for one lattice potential, shared by beams and fields.

    Results are cached by exact (k, band, with_second); cached values are the
    same objects the uncached computation returns, so concurrent callers see
    identical numbers.
    """

    def __init__(
        self,
        potential: PeriodicPotential,
        basis: PlaneWaveBasis,
        gap_min: float = DEFAULT_GAP_MIN,
        fd_step: float = DEFAULT_FD_STEP,
        taylor_radius: float = DEFAULT_TAYLOR_RADIUS,
        cache_size: int = 8192,
    ):
        if basis.cutoff < potential.cutoff + 2:
            raise ConfigurationError(
                f"plane-wave cutoff {basis.cutoff} must be at least potential cutoff + 2 "
                f"({potential.cutoff + 2})"
            )
        self.potential = potential
        self.basis = basis
        self.gap_min = gap_min
        self.fd_step = fd_step
        self.taylor_radius = taylor_radius
        self.diagnostics = BandDiagnostics()
        self._local = lru_cache(maxsize=cache_size)(self._compute_local)
        self._eigenpair = lru_cache(maxsize=cache_size)(self._compute_eigenpair)

    def _compute_local(self, k: float, n: int, with_second: bool) -> BandLocalData:
        data = band_local_data(
            k, self.potential, self.basis, n, self.gap_min, with_second, self.fd_step
        )
        self.diagnostics.record_gap(data.gap)
        if with_second:
            self.diagnostics.record_regularity(regularity_bound(data))
        return data

    def _compute_eigenpair(self, k: float, n: int) -> BlochEigenpair:
        pairs = solve_bands(k, self.potential, self.basis, min(n + 1, self.basis.dimension))
        gap = _check_gap(k, [pair.energy for pair in pairs], n, self.gap_min)
        self.diagnostics.record_gap(gap)
        return fix_gauge(pairs[n - 1])

    def local(self, k: float, n: int, with_second: bool = False) -> BandLocalData:
        return self._local(float(k), int(n), bool(with_second))

    def eigenpair(self, k: float, n: int) -> BlochEigenpair:
        return self._eigenpair(float(k), int(n))

    def energy(self, k: float, n: int) -> float:
        return self.eigenpair(k, n).energy

    def hamiltonian(self, k: float) -> np.ndarray:
        return assemble_hamiltonian(k, self.potential, self.basis)

    def evaluate_z(self, data: BandLocalData, kappa) -> np.ndarray:
        return eval_z_taylor(data, kappa, self.taylor_radius, self.diagnostics)

    def resolvent(self, data: BandLocalData, rhs: np.ndarray) -> np.ndarray:
        return reduced_resolvent_solve(data.hamiltonian, data.pairs, data.pair.band, rhs, self.gap_min)


class FreeParticleBand:
    """Unfolded free-electron branch E(k) = k^2/2 with z = e^{i0y}/sqrt(2*pi).

    V vanishes, so no mode couples to the m = 0 mode and the branch is
    followed through the zone boundary without folding.
    """

    def __init__(self, basis: Optional[PlaneWaveBasis] = None, taylor_radius: float = DEFAULT_TAYLOR_RADIUS,
                 gap_min: float = DEFAULT_GAP_MIN):
        self.potential = PeriodicPotential.zero()
        self.basis = basis or PlaneWaveBasis(2)
        self.taylor_radius = taylor_radius
        self.gap_min = gap_min
        self.diagnostics = BandDiagnostics()
        self._mode = np.zeros(self.basis.dimension, dtype=complex)
        self._mode[self.basis.cutoff] = 1.0
        self._mode.flags.writeable = False

    def _check_band(self, n: int) -> None:
        if n != 1:
            raise ConfigurationError(f"the free-particle branch has a single band, got band {n}")

    def eigenpair(self, k: float, n: int) -> BlochEigenpair:
        self._check_band(n)
        return BlochEigenpair(band=1, k=float(k), energy=0.5 * float(k) ** 2,
                              coeffs=self._mode, basis=self.basis, gauge="fixed")

    def energy(self, k: float, n: int) -> float:
        return self.eigenpair(k, n).energy

    def hamiltonian(self, k: float) -> np.ndarray:
        return np.diag(0.5 * (self.basis.modes + k) ** 2).astype(complex)

    def local(self, k: float, n: int, with_second: bool = False) -> BandLocalData:
        pair = self.eigenpair(k, n)
        zeros = _frozen(np.zeros(self.basis.dimension))
        self.diagnostics.record_gap(np.inf)
        return BandLocalData(
            pair=pair, E1=float(k), E2=1.0, dkz=zeros, berry=0j, gap=np.inf,
            pairs=(pair,), hamiltonian=self.hamiltonian(k),
            dk2z=zeros if with_second else None,
        )

    def evaluate_z(self, data: BandLocalData, kappa) -> np.ndarray:
        return eval_z_taylor(data, kappa, self.taylor_radius, self.diagnostics)

    def resolvent(self, data: BandLocalData, rhs: np.ndarray) -> np.ndarray:
        rhs = np.array(rhs, dtype=complex)
        centre = self.basis.cutoff
        rhs[centre] = 0.0
        if not np.any(rhs):
            return rhs
        shifts = 0.5 * (self.basis.modes + data.k) ** 2 - data.energy
        active = rhs != 0
        active[centre] = False
        if np.any(np.abs(shifts[active]) < self.gap_min):
            raise GapViolationError(data.k, 1, None, float(np.abs(shifts[active]).min()), self.gap_min)
        solution = np.zeros_like(rhs)
        solution[active] = rhs[active] / shifts[active]
        return solution
