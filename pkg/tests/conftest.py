import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from solvers.catalog import Envelope, ExternalPotential, InitialDataSpec, PhaseForm  # noqa: E402
from solvers.cell_spectral import CellServices, FreeParticleBand, PeriodicPotential, PlaneWaveBasis  # noqa: E402

STUDIES = Path(__file__).resolve().parent.parent / "studies"

FREE_STUDY = """\
# small free-particle study used by the manager and CLI tests
potential.model = free_particle
external.form = zero
S0.form = quadratic
S0.alpha = -1/2
bands = 1
envelope.1.form = gaussian
envelope.1.amplitude = 1
envelope.1.sigma = 0.15
envelope.1.center = 0
K0 = -1.2, 1.2
box = -3, 3
epsilons = 1/8, 1/16
T = 0.25
beam_dt_factor = 10
"""


@pytest.fixture
def mathieu_potential():
    """V(y) = cos y."""
    return PeriodicPotential.from_modes({1: 0.5})


@pytest.fixture
def basis():
    return PlaneWaveBasis(16)


@pytest.fixture
def mathieu_cell(mathieu_potential, basis):
    return CellServices(mathieu_potential, basis)


@pytest.fixture
def free_cell():
    return FreeParticleBand()


@pytest.fixture
def harmonic():
    return ExternalPotential("harmonic", {"omega": 0.3})


@pytest.fixture
def no_external():
    return ExternalPotential("zero", {})


@pytest.fixture
def mathieu_initial():
    return InitialDataSpec(
        PhaseForm("quadratic", {"alpha": -0.125}),
        {1: Envelope("gaussian", {"amplitude": 1.0, "sigma": 0.2, "center": 0.0})},
        (-1.6, 1.6),
    )


@pytest.fixture
def free_initial():
    return InitialDataSpec(
        PhaseForm("quadratic", {"alpha": -0.5}),
        {1: Envelope("gaussian", {"amplitude": 1.0, "sigma": 0.15, "center": 0.0})},
        (-1.2, 1.2),
    )


@pytest.fixture
def free_study_file(tmp_path):
    path = tmp_path / "free_small.cfg"
    path.write_text(FREE_STUDY)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
