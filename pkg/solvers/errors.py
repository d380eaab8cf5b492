"""
Exception hierarchy shared by the band, beam, field and reference modules.

Every failure raised by the numerical code derives from BlochBeamError so the
study manager can catch one type per row and keep going.
"""

from typing import List, Optional


class BlochBeamError(Exception):
    """Base class for all errors raised by the solvers."""


class ConfigurationError(BlochBeamError, ValueError):
    """Invalid configuration, discretization or inconsistent inputs.

    ``errors`` holds every violation found, so callers can report them all at
    once instead of stopping at the first one.
    """

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message)


class InvariantViolation(BlochBeamError):
    """A type invariant does not hold (e.g. zero eigenvector)."""


class GapViolationError(BlochBeamError):
    """Band gap below gap_min at the requested quasimomentum."""

    def __init__(self, k: float, band: int, other: Optional[int], gap: float, gap_min: float):
        self.k = k
        self.band = band
        self.other = other
        self.gap = gap
        partner = f"E_{other}" if other is not None else "spectrum"
        super().__init__(
            f"band gap violation at k={k:.12g}: |E_{band} - {partner}| = {gap:.3e} "
            f"< gap_min = {gap_min:.1e}"
        )


class NumericalError(BlochBeamError):
    """Eigensolver failure or a numerically inconsistent intermediate."""


class StepTooLargeError(BlochBeamError):
    """Finite-difference step crosses a gauge discontinuity."""


class LaunchError(BlochBeamError):
    """A beam cannot be launched from the requested point."""


class PositivityLossError(BlochBeamError):
    """Im(M) became non-positive during propagation."""


class InconsistencyError(BlochBeamError):
    """Solvability condition for the first-order corrector failed."""


class InstabilityError(BlochBeamError):
    """Non-finite values appeared in the reference time loop."""

    def __init__(self, step: int, message: str = "non-finite values in field"):
        self.step = step
        super().__init__(f"{message} at step {step}")
