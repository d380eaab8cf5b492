"""Full convergence runs on the shipped studies. Minutes each; run with ``-m slow``."""

from pathlib import Path

import numpy as np
import pytest

from manager import run_a1_ablation, run_convergence_study
from study_config import load_config

STUDIES = Path(__file__).resolve().parent.parent / "studies"
MIN_ORDER = 0.35

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def mathieu_result():
    return run_convergence_study(load_config(STUDIES / "mathieu.cfg"))


@pytest.fixture(scope="module")
def caustic_result():
    return run_convergence_study(load_config(STUDIES / "mathieu_caustic.cfg"), check_resolution=False)


def test_mathieu_errors_decrease(mathieu_result):
    rows = mathieu_result.rows
    assert mathieu_result.completed
    initial = [row.err_initial_L2 for row in rows]
    total = [row.err_total_L2 for row in rows]
    assert all(b < a for a, b in zip(initial, initial[1:]))
    assert all(b < a for a, b in zip(total, total[1:]))


@pytest.mark.parametrize("pair", [1, 2, 3])
def test_mathieu_order_per_pair(mathieu_result, pair):
    row = mathieu_result.rows[pair]
    assert row.order_initial >= MIN_ORDER
    assert row.order_total >= MIN_ORDER


def test_mathieu_monitors(mathieu_result):
    for row in mathieu_result.rows:
        assert row.ref_mass_drift <= 1e-12
        assert row.min_ImM > 0
        assert row.min_gap >= 1e-6
        assert row.max_solvability <= 1e-8
        assert row.resolution_change <= 1e-8


def test_caustic_study_runs_the_whole_ladder(caustic_result):
    assert caustic_result.completed
    assert [row.epsilon for row in caustic_result.rows] == [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    for row in caustic_result.rows[1:]:
        assert row.order_total >= MIN_ORDER


def test_caustic_beam_modulus_is_uniform_in_epsilon(caustic_result):
    moduli = [row.max_beam_modulus for row in caustic_result.rows]
    assert all(np.isfinite(moduli))
    assert caustic_result.metadata["max_beam_modulus"] == max(moduli)
    assert max(moduli) <= 2.0 * moduli[0]


def test_dropping_the_corrector_is_not_better():
    study = load_config(STUDIES / "mathieu.cfg")
    ablation = run_a1_ablation(study, 1 / 16, study.build_cell())
    assert ablation["epsilon"] == 1 / 16
    assert np.isfinite(ablation["err_total_with_A1"])
    assert ablation["err_total_without_A1"] >= ablation["err_total_with_A1"]
    assert ablation["no_a1_not_better"]
