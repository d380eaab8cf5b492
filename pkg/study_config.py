"""
Study configuration

Parses the line-oriented ``key = value`` study files into a validated
StudyConfig. Numeric values accept fractions (``1/64``); every violation is
collected with its line number and raised together.
"""

import logging
import re
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from solvers.catalog import Envelope, ExternalPotential, InitialDataSpec, PhaseForm
from solvers.cell_spectral import CellServices, FreeParticleBand, PeriodicPotential, PlaneWaveBasis
from solvers.errors import ConfigurationError

logger = logging.getLogger(__name__)

MAX_EPSILON = Fraction(1, 8)
LADDER_RATIO = 2.0


def _number(text: str) -> float:
    return float(Fraction(text.strip()))


def _integer(text: str) -> int:
    value = Fraction(text.strip())
    if value.denominator != 1:
        raise ValueError(f"expected an integer, got {text.strip()}")
    return int(value)


def _complex(text: str) -> complex:
    text = text.strip()
    try:
        return complex(_number(text))
    except (ValueError, ZeroDivisionError):
        return complex(text.replace(" ", ""))


def _number_list(text: str) -> List[float]:
    return [_number(item) for item in text.split(",") if item.strip()]


def _integer_list(text: str) -> List[int]:
    return [_integer(item) for item in text.split(",") if item.strip()]


def _pair(text: str) -> Tuple[float, float]:
    values = _number_list(text)
    if len(values) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {len(values)}")
    return values[0], values[1]


def _boolean(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text.strip()}")


def _text(text: str) -> str:
    return text.strip()


SCALAR_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "potential.model": ("potential_model", _text),
    "potential.M_pw": ("M_pw", _integer),
    "external.form": ("external_form", _text),
    "S0.form": ("S0_form", _text),
    "bands": ("bands", _integer_list),
    "K0": ("K0", _pair),
    "box": ("box", _pair),
    "epsilons": ("epsilons", _number_list),
    "T": ("T", _number),
    "with_A1": ("with_A1", _boolean),
    "parallel": ("parallel", _boolean),
    "workers": ("workers", _integer),
    "beam_dt_factor": ("beam_dt_factor", _number),
    "ref_ct": ("ref_ct", _number),
    "dx0_factor": ("dx0_factor", _number),
    "r_cut_factor": ("r_cut_factor", _number),
    "points_per_period": ("points_per_period", _integer),
    "gap_min": ("gap_min", _number),
    "taylor_radius": ("taylor_radius", _number),
    "fd_step": ("fd_step", _number),
    "residual.offsets": ("residual_offsets", _number_list),
    "residual.taylor_order": ("residual_taylor_order", _integer),
    "output_dir": ("output_dir", _text),
}

EXTERNAL_PARAMS = ("omega", "depth", "width", "center", "amplitude", "wavenumber")
PHASE_PARAMS = ("c", "alpha", "beta", "sigma")
ENVELOPE_PARAMS = ("amplitude", "sigma", "center", "width")

POTENTIAL_KEY = re.compile(r"^potential\.v(\d+)$")
ENVELOPE_KEY = re.compile(r"^envelope\.(\d+)\.(\w+)$")


class StudyConfig(BaseModel):
    """One convergence experiment: potentials, initial data, ladder and knobs."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    potential_model: Literal["plane_wave", "free_particle"] = "plane_wave"
    potential_coeffs: Dict[int, Any] = Field(default_factory=dict)
    M_pw: int = Field(16, ge=1)
    external_form: Literal["zero", "harmonic", "gaussian_well", "cosine"] = "zero"
    external_params: Dict[str, float] = Field(default_factory=dict)
    S0_form: Literal["linear", "quadratic", "gaussian_phase"] = "linear"
    S0_params: Dict[str, float] = Field(default_factory=dict)
    bands: List[int] = Field(default_factory=lambda: [1])
    envelopes: Dict[int, Dict[str, Any]] = Field(default_factory=dict)
    K0: Tuple[float, float]
    box: Tuple[float, float]
    epsilons: List[float]
    T: float = Field(ge=0.0)
    with_A1: bool = True
    parallel: bool = True
    workers: Optional[int] = Field(None, ge=1)
    beam_dt_factor: float = Field(1.0, gt=0.0)
    ref_ct: float = Field(0.5, gt=0.0)
    dx0_factor: float = Field(0.25, gt=0.0, le=0.25)
    r_cut_factor: float = Field(6.0, ge=6.0)
    points_per_period: int = Field(16, ge=16)
    gap_min: float = Field(1e-6, gt=0.0)
    taylor_radius: float = Field(0.5, gt=0.0)
    fd_step: float = Field(1e-3, gt=0.0)
    residual_offsets: List[float] = Field(default_factory=lambda: [1e-2, 5e-3])
    residual_taylor_order: Literal[2, 4] = 4
    output_dir: Optional[str] = None
    warnings: List[str] = Field(default_factory=list, exclude=True)

    @field_validator("potential_coeffs")
    @classmethod
    def _coefficients_complex(cls, value: Dict[int, Any]) -> Dict[int, complex]:
        return {int(m): complex(v) for m, v in value.items()}

    @field_validator("epsilons")
    @classmethod
    def _ladder(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("epsilon ladder is empty")
        problems = []
        for eps in value:
            if not 0.0 < eps <= float(MAX_EPSILON):
                problems.append(f"epsilon {eps:.6g} outside (0, 1/8]")
        for coarse, fine in zip(value, value[1:]):
            if not fine < coarse:
                problems.append(f"ladder not strictly decreasing at {coarse:.6g}, {fine:.6g}")
            elif abs(coarse / fine - LADDER_RATIO) > 1e-12 * LADDER_RATIO:
                problems.append(
                    f"ladder ratio between {coarse:.6g} and {fine:.6g} is {coarse / fine:.6g}, expected 2"
                )
        if problems:
            raise ValueError("; ".join(problems))
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "StudyConfig":
        missing = [band for band in self.bands if band not in self.envelopes]
        if missing:
            raise ValueError(f"bands {missing} have no envelope.<n>.* entries")
        if self.potential_model == "free_particle" and self.bands != [1]:
            raise ValueError("the free-particle model has the single band 1")
        if self.potential_model == "plane_wave" and self.potential_coeffs:
            cutoff = max(self.potential_coeffs)
            if self.M_pw < cutoff + 2:
                raise ValueError(f"potential.M_pw = {self.M_pw} must be at least {cutoff + 2}")
        if not self.box[0] < self.K0[0] < self.K0[1] < self.box[1]:
            raise ValueError(f"K0 {self.K0} must lie strictly inside box {self.box}")
        return self

    def periodic_potential(self) -> PeriodicPotential:
        if self.potential_model == "free_particle" or not self.potential_coeffs:
            return PeriodicPotential.zero()
        return PeriodicPotential.from_modes(self.potential_coeffs)

    def build_cell(self):
        """Band services for the configured lattice potential."""
        if self.potential_model == "free_particle":
            return FreeParticleBand(taylor_radius=self.taylor_radius, gap_min=self.gap_min)
        return CellServices(
            self.periodic_potential(), PlaneWaveBasis(self.M_pw),
            gap_min=self.gap_min, fd_step=self.fd_step, taylor_radius=self.taylor_radius,
        )

    def build_external(self) -> ExternalPotential:
        return ExternalPotential(self.external_form, dict(self.external_params))

    def build_initial(self) -> InitialDataSpec:
        envelopes = {}
        for band in self.bands:
            entry = dict(self.envelopes[band])
            form = entry.pop("form", "gaussian")
            envelopes[band] = Envelope(form, entry)
        return InitialDataSpec(PhaseForm(self.S0_form, dict(self.S0_params)), envelopes, tuple(self.K0))


def _assign(raw: Dict[str, Any], key: str, value: str) -> str:
    """Store one parsed value; returns the model field it feeds."""
    if key in SCALAR_KEYS:
        name, parser = SCALAR_KEYS[key]
        raw[name] = parser(value)
        return name
    match = POTENTIAL_KEY.match(key)
    if match:
        raw.setdefault("potential_coeffs", {})[int(match.group(1))] = _complex(value)
        return "potential_coeffs"
    prefix, _, param = key.partition(".")
    if prefix == "external" and param in EXTERNAL_PARAMS:
        raw.setdefault("external_params", {})[param] = _number(value)
        return "external_params"
    if prefix == "S0" and param in PHASE_PARAMS:
        raw.setdefault("S0_params", {})[param] = _number(value)
        return "S0_params"
    match = ENVELOPE_KEY.match(key)
    if match and (match.group(2) == "form" or match.group(2) in ENVELOPE_PARAMS):
        entry = raw.setdefault("envelopes", {}).setdefault(int(match.group(1)), {})
        entry[match.group(2)] = _text(value) if match.group(2) == "form" else _number(value)
        return "envelopes"
    raise KeyError(key)


def parse_config(text: str, defaults: Optional[Dict[str, Any]] = None, source: str = "<config>") -> StudyConfig:
    """Parse and validate a study file.

    ``defaults`` holds project-level values (config.json) applied to fields
    the file does not set. Duplicate keys keep the last value and record a
    warning.
    """
    raw: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    errors: List[str] = []
    warnings: List[str] = []
    seen: Dict[str, int] = {}

    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            errors.append(f"{source}:{number}: expected 'key = value', got '{content}'")
            continue
        key, value = (part.strip() for part in content.split("=", 1))
        if key in seen:
            message = f"{source}:{number}: duplicate key '{key}' (line {seen[key]}), last value wins"
            warnings.append(message)
            logger.warning(message)
        seen[key] = number
        try:
            field = _assign(raw, key, value)
        except KeyError:
            errors.append(f"{source}:{number}: unknown key '{key}'")
            continue
        except (ValueError, ZeroDivisionError) as exc:
            errors.append(f"{source}:{number}: malformed value for '{key}': {exc}")
            continue
        lines[field] = number

    for name, value in (defaults or {}).items():
        if name in StudyConfig.model_fields and name not in raw and value is not None:
            raw[name] = value

    if not errors:
        try:
            config = StudyConfig(**raw, warnings=warnings)
        except ValidationError as exc:
            for error in exc.errors():
                field = str(error["loc"][0]) if error["loc"] else ""
                where = f"{source}:{lines[field]}" if field in lines else source
                label = f" '{field}'" if field else ""
                errors.append(f"{where}:{label} {error['msg']}")
        else:
            try:
                config.build_initial()
                config.build_external()
            except ConfigurationError as exc:
                errors.extend(f"{source}: {problem}" for problem in exc.errors)
            else:
                return config

    raise ConfigurationError(f"{len(errors)} problem(s) in {source}", errors)


def load_config(path, defaults: Optional[Dict[str, Any]] = None) -> StudyConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read study config {path}: {exc}") from exc
    return parse_config(text, defaults, source=str(path))
