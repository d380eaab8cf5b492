import numpy as np
import pytest

from solvers.catalog import ExternalPotential
from solvers.cell_spectral import PeriodicPotential
from solvers.errors import ConfigurationError, InstabilityError
from solvers.reference_solver import (
    SplitStepConfig,
    dt_max,
    free_gaussian,
    mass_drift,
    refine_field,
    resolution_gate,
    run_reference,
    strang_step,
)
from solvers.wavefield import SpatialGrid, WaveField, l2_error, l2_norm, make_grid


def _packet(grid, epsilon, x0=0.0, p0=0.5):
    return WaveField(grid, free_gaussian(grid.x, 0.0, x0, p0, 1j, 1.0, epsilon))


class TestConfig:
    def test_time_step_limit(self):
        grid = make_grid((-2.0, 2.0), 1 / 16)
        with pytest.raises(ConfigurationError):
            SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential(), dt=1.0)

    def test_spatial_resolution_limit(self):
        epsilon = 1 / 16
        grid = SpatialGrid(x_lo=0.0, n_points=64, dx=0.1, epsilon=epsilon)
        with pytest.raises(ConfigurationError) as info:
            SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        assert "2 pi eps / 16" in str(info.value)

    def test_default_step(self):
        grid = make_grid((-2.0, 2.0), 1 / 16)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        assert cfg.dt == dt_max(1 / 16)
        assert cfg.dt == pytest.approx(0.5 / 64)

    def test_total_potential(self, mathieu_potential, harmonic):
        epsilon = 1 / 16
        grid = make_grid((-2.0, 2.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, mathieu_potential, harmonic)
        x = grid.x
        np.testing.assert_allclose(cfg.total_potential(), np.cos(x / epsilon) + 0.045 * x ** 2, atol=1e-12)


class TestEvolution:
    def test_free_gaussian_oracle(self):
        epsilon = 1 / 32
        grid = make_grid((-4.0, 4.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        final = run_reference(_packet(grid, epsilon), cfg, 1.0)
        exact = free_gaussian(grid.x, 1.0, 0.0, 0.5, 1j, 1.0, epsilon)
        assert final.t == pytest.approx(1.0)
        assert np.max(np.abs(final.values - exact)) <= 1e-9

    def test_mass_is_conserved(self, mathieu_potential, harmonic):
        epsilon = 1 / 16
        grid = make_grid((-3.0, 3.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, mathieu_potential, harmonic)
        initial = _packet(grid, epsilon)
        final = run_reference(initial, cfg, 0.5)
        assert mass_drift(initial, final) <= 1e-12

    def test_second_order_in_time(self, mathieu_potential, harmonic):
        epsilon = 1 / 16
        grid = make_grid((-2.0, 2.0), epsilon)
        base = SplitStepConfig.for_grid(grid, mathieu_potential, harmonic)
        initial = _packet(grid, epsilon, p0=0.2)
        runs = [
            run_reference(initial, SplitStepConfig.for_grid(grid, mathieu_potential, harmonic, dt=base.dt / r), 0.05)
            for r in (4, 8, 16)
        ]
        ratio = l2_error(runs[0], runs[1]) / l2_error(runs[1], runs[2])
        assert 1.8 <= np.log2(ratio) <= 2.2

    def test_zero_time_returns_a_copy(self):
        epsilon = 1 / 16
        grid = make_grid((-2.0, 2.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        initial = _packet(grid, epsilon)
        final = run_reference(initial, cfg, 0.0)
        assert final is not initial
        np.testing.assert_array_equal(final.values, initial.values)

    def test_single_step_keeps_the_norm(self, mathieu_potential, harmonic):
        epsilon = 1 / 16
        grid = make_grid((-2.0, 2.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, mathieu_potential, harmonic)
        initial = _packet(grid, epsilon)
        stepped = strang_step(initial, cfg)
        assert stepped.t == pytest.approx(cfg.dt)
        assert l2_norm(stepped) == pytest.approx(l2_norm(initial), rel=1e-13)

    def test_non_finite_values_are_reported(self):
        epsilon = 1 / 16
        grid = make_grid((-2.0, 2.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        values = _packet(grid, epsilon).values
        values[3] = np.nan
        with pytest.raises(InstabilityError):
            run_reference(WaveField(grid, values), cfg, 0.01)

    def test_grid_mismatch(self):
        epsilon = 1 / 16
        cfg = SplitStepConfig.for_grid(make_grid((-2.0, 2.0), epsilon), PeriodicPotential.zero(), ExternalPotential())
        other = make_grid((-3.0, 3.0), epsilon)
        with pytest.raises(ConfigurationError):
            run_reference(_packet(other, epsilon), cfg, 0.1)


class TestRefinement:
    def test_refined_field_interpolates(self):
        epsilon = 1 / 16
        grid = make_grid((-3.0, 3.0), epsilon)
        field = _packet(grid, epsilon)
        fine = refine_field(field)
        np.testing.assert_allclose(fine.values[::2], field.values, atol=1e-12)
        exact = free_gaussian(fine.grid.x, 0.0, 0.0, 0.5, 1j, 1.0, epsilon)
        np.testing.assert_allclose(fine.values, exact, atol=1e-9)

    def test_resolution_gate_on_resolved_data(self):
        epsilon = 1 / 16
        grid = make_grid((-3.0, 3.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.zero(), ExternalPotential())
        assert resolution_gate(_packet(grid, epsilon), cfg, 0.2) <= 1e-9

    def test_resolution_gate_reuses_the_coarse_run(self):
        epsilon = 1 / 16
        grid = make_grid((-3.0, 3.0), epsilon)
        cfg = SplitStepConfig.for_grid(grid, PeriodicPotential.from_modes({1: 0.5}), ExternalPotential())
        initial = _packet(grid, epsilon)
        coarse = run_reference(initial, cfg, 0.2)
        assert resolution_gate(initial, cfg, 0.2, coarse=coarse) == resolution_gate(initial, cfg, 0.2)
