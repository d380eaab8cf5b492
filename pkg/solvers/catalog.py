"""
Closed-form catalogs for the beam construction

External potentials V_e, initial phases S0 and band envelopes a_n, each with
the exact derivatives the ray and Riccati equations need. Everything here is
vectorized over numpy arrays and scalar-safe.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from solvers.errors import ConfigurationError

logger = logging.getLogger(__name__)

NEGLIGIBLE = 1e-12

EXTERNAL_FORMS = {
    "zero": (),
    "harmonic": ("omega",),
    "gaussian_well": ("depth", "width", "center"),
    "cosine": ("amplitude", "wavenumber"),
}

PHASE_FORMS = {
    "linear": ("c",),
    "quadratic": ("alpha",),
    "gaussian_phase": ("beta", "sigma"),
}

ENVELOPE_FORMS = {
    "gaussian": ("amplitude", "sigma", "center"),
    "cosine_bump": ("amplitude", "width", "center"),
}


def _check_params(kind: str, form: str, params: Dict[str, float], catalog: Dict[str, Tuple[str, ...]]) -> Dict[str, float]:
    if form not in catalog:
        raise ConfigurationError(f"unknown {kind} form '{form}' (choose from {', '.join(catalog)})")
    missing = [name for name in catalog[form] if name not in params]
    if missing:
        raise ConfigurationError(f"{kind} form '{form}' is missing parameters: {', '.join(missing)}")
    return {name: float(params[name]) for name in catalog[form]}


@dataclass(frozen=True)
class ExternalPotential:
    """Smooth external potential V_e(x) with closed-form V_e' and V_e''."""

    form: str = "zero"
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        checked = _check_params("external potential", self.form, self.params, EXTERNAL_FORMS)
        if self.form == "gaussian_well" and checked["width"] <= 0:
            raise ConfigurationError("gaussian_well width must be positive")
        object.__setattr__(self, "params", checked)

    @property
    def bounded(self) -> bool:
        """False for forms that grow at infinity (only usable on a bounded box)."""
        return self.form != "harmonic"

    def value(self, x):
        return self._evaluate(x, 0)

    def d1(self, x):
        return self._evaluate(x, 1)

    def d2(self, x):
        return self._evaluate(x, 2)

    def _evaluate(self, x, order: int):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.form == "zero":
            result = np.zeros_like(x)
        elif self.form == "harmonic":
            w2 = p["omega"] ** 2
            result = (0.5 * w2 * x ** 2, w2 * x, np.full_like(x, w2))[order]
        elif self.form == "gaussian_well":
            u = x - p["center"]
            w2 = p["width"] ** 2
            g = p["depth"] * np.exp(-0.5 * u ** 2 / w2)
            result = (-g, g * u / w2, g * (1.0 / w2 - u ** 2 / w2 ** 2))[order]
        else:
            amp, kappa = p["amplitude"], p["wavenumber"]
            result = (
                amp * np.cos(kappa * x),
                -amp * kappa * np.sin(kappa * x),
                -amp * kappa ** 2 * np.cos(kappa * x),
            )[order]
        return result if result.ndim else float(result)


@dataclass(frozen=True)
class PhaseForm:
    """Initial phase S0(x) with closed-form S0' and S0''."""

    form: str = "linear"
    params: Dict[str, float] = field(default_factory=lambda: {"c": 0.0})

    def __post_init__(self):
        checked = _check_params("S0", self.form, self.params, PHASE_FORMS)
        if self.form == "gaussian_phase" and checked["sigma"] <= 0:
            raise ConfigurationError("gaussian_phase sigma must be positive")
        object.__setattr__(self, "params", checked)

    def value(self, x):
        return self._evaluate(x, 0)

    def d1(self, x):
        return self._evaluate(x, 1)

    def d2(self, x):
        return self._evaluate(x, 2)

    def _evaluate(self, x, order: int):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.form == "linear":
            result = (p["c"] * x, np.full_like(x, p["c"]), np.zeros_like(x))[order]
        elif self.form == "quadratic":
            alpha = p["alpha"]
            result = (alpha * x ** 2, 2.0 * alpha * x, np.full_like(x, 2.0 * alpha))[order]
        else:
            s2 = p["sigma"] ** 2
            g = p["beta"] * np.exp(-0.5 * x ** 2 / s2)
            result = (g, -g * x / s2, g * (x ** 2 / s2 ** 2 - 1.0 / s2))[order]
        return result if result.ndim else float(result)


@dataclass(frozen=True)
class Envelope:
    """Band envelope a_n(x): a concentrated closed-form profile."""

    form: str = "gaussian"
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        checked = _check_params("envelope", self.form, self.params, ENVELOPE_FORMS)
        scale = checked["sigma"] if self.form == "gaussian" else checked["width"]
        if scale <= 0:
            raise ConfigurationError(f"envelope {self.form} needs a positive width")
        object.__setattr__(self, "params", checked)

    @property
    def peak(self) -> float:
        return abs(self.params["amplitude"])

    def support(self, threshold: float = NEGLIGIBLE) -> Tuple[float, float]:
        """Interval outside which |a_n| < threshold * peak."""
        p = self.params
        if self.form == "gaussian":
            radius = p["sigma"] * np.sqrt(2.0 * np.log(1.0 / threshold))
        else:
            radius = p["width"]
        return p["center"] - radius, p["center"] + radius

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        u = x - p["center"]
        if self.form == "gaussian":
            result = p["amplitude"] * np.exp(-0.5 * u ** 2 / p["sigma"] ** 2)
        else:
            inside = np.abs(u) < p["width"]
            result = np.where(inside, p["amplitude"] * np.cos(0.5 * np.pi * u / p["width"]) ** 2, 0.0)
        return result if result.ndim else float(result)


@dataclass(frozen=True)
class InitialDataSpec:
    """Two-scale initial data g = sum_n a_n(x) z_n(S0'(x), y) with phase S0."""

    phase: PhaseForm
    envelopes: Dict[int, Envelope]
    K0: Tuple[float, float]

    def __post_init__(self):
        errors: List[str] = []
        lo, hi = self.K0
        if not lo < hi:
            errors.append(f"K0 must satisfy x_lo < x_hi, got {self.K0}")
        if not self.envelopes:
            errors.append("at least one band envelope is required")
        for band, envelope in self.envelopes.items():
            if band < 1:
                errors.append(f"band indices start at 1, got {band}")
                continue
            s_lo, s_hi = envelope.support()
            if s_lo < lo or s_hi > hi:
                errors.append(
                    f"envelope of band {band} is not negligible outside K0: "
                    f"support [{s_lo:.6g}, {s_hi:.6g}] exceeds [{lo:.6g}, {hi:.6g}]"
                )
        if errors:
            raise ConfigurationError("; ".join(errors), errors)

    @property
    def bands(self) -> List[int]:
        return sorted(self.envelopes)

    def amplitude(self, band: int, x):
        return self.envelopes[band](x)

    def is_active(self, band: int, x0: float) -> bool:
        """False where the envelope is negligible, so no beam is launched there."""
        envelope = self.envelopes[band]
        return abs(envelope(x0)) >= NEGLIGIBLE * envelope.peak
