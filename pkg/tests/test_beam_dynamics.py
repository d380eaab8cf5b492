from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from solvers.beam_dynamics import (
    BeamState,
    _first_order_source,
    compute_A1_on_ray,
    default_beam_dt,
    init_beam,
    ode_rhs,
    project_amplitude,
    propagate_beams,
    residual_coefficients,
    rk4_propagate,
)
from solvers.catalog import Envelope, ExternalPotential, InitialDataSpec, PhaseForm
from solvers.cell_spectral import CellServices, PeriodicPotential, PlaneWaveBasis
from solvers.errors import ConfigurationError, LaunchError, PositivityLossError


def _state(**overrides):
    values = dict(t=0.0, x0=0.0, band=1, xt=0.0, p=0.0, S=0.0, M=1j, a=1.0 + 0j)
    values.update(overrides)
    return BeamState(**values)


class TestClosedForms:
    def test_riccati_and_amplitude(self, free_cell, no_external):
        trajectory = rk4_propagate(_state(), no_external, free_cell, 1.0, 1e-3)
        final = trajectory.final
        assert final.t == 1.0
        assert abs(final.M - 1j / (1 + 1j)) <= 1e-8
        assert abs(final.a - (1 + 1j) ** -0.5) <= 1e-8
        assert all(state.M.imag > 0 for state in trajectory.states)

    def test_rk4_is_fourth_order(self, free_cell, no_external):
        exact = 1j / (1 + 1j)
        errors = [
            abs(rk4_propagate(_state(), no_external, free_cell, 1.0, dt).final.M - exact)
            for dt in (0.05, 0.025)
        ]
        assert 14.0 <= errors[0] / errors[1] <= 18.0

    def test_harmonic_quarter_period(self, free_cell):
        trap = ExternalPotential("harmonic", {"omega": 1.0})
        start = _state(xt=1.0, x0=1.0, p=0.0)
        final = rk4_propagate(start, trap, free_cell, np.pi / 2, 1e-3).final
        assert final.xt == pytest.approx(0.0, abs=1e-10)
        assert final.p == pytest.approx(-1.0, abs=1e-10)
        assert final.S == pytest.approx(0.0, abs=1e-10)
        assert abs(final.M - 1j) <= 1e-10
        assert abs(final.a - np.exp(-0.25j * np.pi)) <= 1e-10

    def test_ray_energy_is_conserved(self, free_cell):
        trap = ExternalPotential("harmonic", {"omega": 1.0})
        trajectory = rk4_propagate(_state(xt=0.5, x0=0.5, p=0.7), trap, free_cell, 5.0, 1e-3)
        assert trajectory.energy_drift <= 1e-8

    def test_free_ray_is_straight(self, free_cell, no_external):
        final = rk4_propagate(_state(p=0.4), no_external, free_cell, 2.0, 1e-2).final
        assert final.xt == pytest.approx(0.8, abs=1e-12)
        assert final.S == pytest.approx(0.5 * 0.4 ** 2 * 2.0, abs=1e-12)


class TestPropagation:
    def test_step_is_shrunk_to_reach_T(self, free_cell, no_external):
        trajectory = rk4_propagate(_state(), no_external, free_cell, 0.25, 0.1)
        assert len(trajectory.states) == 4
        assert trajectory.dt == pytest.approx(0.25 / 3)
        assert trajectory.final.t == 0.25

    def test_zero_time(self, free_cell, no_external):
        trajectory = rk4_propagate(_state(), no_external, free_cell, 0.0, 0.1)
        assert trajectory.final == _state()

    def test_bad_step(self, free_cell, no_external):
        with pytest.raises(ConfigurationError):
            rk4_propagate(_state(), no_external, free_cell, 1.0, 0.0)

    def test_positivity_is_checked(self):
        with pytest.raises(PositivityLossError):
            _state(M=0.3 - 0.1j).check()

    def test_default_step(self):
        assert default_beam_dt(0.5) == pytest.approx(5e-4)
        assert default_beam_dt(3.0, factor=2) == pytest.approx(2e-3)

    def test_rhs_of_free_beam(self, free_cell, no_external):
        rates = ode_rhs(_state(p=0.3, M=0.5 + 1j), no_external, free_cell)
        assert rates[0] == pytest.approx(0.3)
        assert rates[1] == 0
        assert rates[2] == pytest.approx(0.045)
        assert rates[3] == pytest.approx(-(0.5 + 1j) ** 2)


class TestLaunch:
    def test_initial_state(self, mathieu_cell, mathieu_initial):
        state = init_beam(1.0, 1, mathieu_initial, mathieu_cell)
        assert state.p == pytest.approx(-0.25)
        assert state.S == pytest.approx(-0.125)
        assert state.M == pytest.approx(-0.25 + 1j)
        assert state.a == pytest.approx(np.exp(-0.5 * (1.0 / 0.2) ** 2))

    def test_projection_matches_envelope(self, mathieu_cell, mathieu_initial):
        projected = project_amplitude(0.1, 1, mathieu_initial, mathieu_cell)
        assert abs(projected - mathieu_initial.amplitude(1, 0.1)) <= 1e-10

    def test_projection_separates_two_bands(self, mathieu_cell):
        initial = InitialDataSpec(
            PhaseForm("linear", {"c": 0.2}),
            {
                1: Envelope("gaussian", {"amplitude": 1.0, "sigma": 0.2, "center": 0.0}),
                2: Envelope("gaussian", {"amplitude": 0.5, "sigma": 0.15, "center": 0.1}),
            },
            (-1.6, 1.6),
        )
        for band in (1, 2):
            for x0 in (-0.3, 0.0, 0.25):
                projected = project_amplitude(x0, band, initial, mathieu_cell)
                assert abs(projected - initial.amplitude(band, x0)) <= 1e-10

    def test_launch_outside_K0(self, mathieu_cell, mathieu_initial):
        with pytest.raises(ConfigurationError):
            init_beam(2.0, 1, mathieu_initial, mathieu_cell)

    def test_launch_on_a_degenerate_momentum(self):
        cell = CellServices(PeriodicPotential.zero(), PlaneWaveBasis(2))
        initial = InitialDataSpec(
            PhaseForm("linear", {"c": 0.5}),
            {1: Envelope("gaussian", {"amplitude": 1.0, "sigma": 0.1, "center": 0.0})},
            (-1.0, 1.0),
        )
        with pytest.raises(LaunchError):
            init_beam(0.0, 1, initial, cell)


class TestCorrector:
    @pytest.fixture
    def trajectory(self, mathieu_cell, harmonic, mathieu_initial):
        start = init_beam(-0.6, 1, mathieu_initial, mathieu_cell)
        return rk4_propagate(start, harmonic, mathieu_cell, 0.5, 0.05)

    def test_solvability_along_the_ray(self, trajectory):
        assert trajectory.max_solvability <= 1e-8
        assert trajectory.min_im_m > 0

    def test_corrector_solves_the_cell_problem(self, trajectory, mathieu_cell, harmonic):
        state = trajectory.final
        A1 = compute_A1_on_ray(state, harmonic, mathieu_cell)
        data = mathieu_cell.local(state.p, state.band)
        source = _first_order_source(state, harmonic, mathieu_cell)
        projected = source - np.vdot(data.z, source) * data.z
        residual = data.hamiltonian @ A1 - data.energy * A1
        np.testing.assert_allclose(residual, 1j * projected, atol=1e-10)
        assert abs(np.vdot(data.z, A1)) <= 1e-12

    def test_free_corrector_vanishes(self, free_cell, no_external):
        A1 = compute_A1_on_ray(_state(p=0.7, M=0.2 + 1j), no_external, free_cell)
        np.testing.assert_allclose(A1, 0.0, atol=1e-14)

    def test_residual_coefficients(self, trajectory, mathieu_cell, harmonic):
        coefficients = residual_coefficients(trajectory.final, harmonic, mathieu_cell)
        assert set(coefficients) == {"c1_slope", "c2_norm", "a1_norm", "solvability"}
        assert all(value >= 0.0 and np.isfinite(value) for value in coefficients.values())
        assert coefficients["solvability"] <= 1e-8

    def test_residual_coefficients_without_corrector(self, trajectory, mathieu_cell, harmonic):
        with_a1 = residual_coefficients(trajectory.final, harmonic, mathieu_cell)
        without = residual_coefficients(trajectory.final, harmonic, mathieu_cell, with_a1=False)
        assert with_a1["a1_norm"] > 0.0
        assert without["a1_norm"] == 0.0
        assert without["c1_slope"] == with_a1["c1_slope"]

    def test_free_residual_coefficients(self, free_cell, no_external):
        coefficients = residual_coefficients(_state(p=0.2), no_external, free_cell)
        assert coefficients["c1_slope"] == 0.0
        assert coefficients["c2_norm"] == 0.0


class TestBeamFamily:
    def test_order_and_filtering(self, free_cell, no_external, free_initial):
        nodes = [0.5, -0.5, 0.0, 1.19]
        trajectories = propagate_beams(nodes, [1], free_initial, no_external, free_cell, 0.1, 0.01, with_a1=False)
        # x0 = 1.19 lies where the envelope is below the launch threshold
        assert [t.x0 for t in trajectories] == [-0.5, 0.0, 0.5]
        assert all(t.A1_coeffs is None for t in trajectories)

    def test_threads_match_serial(self, mathieu_cell, harmonic, mathieu_initial):
        nodes = np.linspace(-0.6, 0.6, 7)
        serial = propagate_beams(nodes, [1], mathieu_initial, harmonic, mathieu_cell, 0.2, 0.02)
        with ThreadPoolExecutor(max_workers=3) as executor:
            threaded = propagate_beams(nodes, [1], mathieu_initial, harmonic, mathieu_cell, 0.2, 0.02,
                                       executor=executor)
        assert [t.final for t in serial] == [t.final for t in threaded]
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.final_A1(), b.final_A1())
