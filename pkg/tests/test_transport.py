import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlqd.mesh import CharacteristicGrid, MaterialGrid
from mlqd.physics import FrequencyGrid, PhysicalConstants
from mlqd.quadrature import AngularQuadrature, build_product_quadrature
from mlqd.transport import (BoundarySpec, CellSource, ConfigurationError, boundary_intensity,
                            boundary_partial_moments, check_tensors, incoming_partial_flux,
                            step_segment, sweep, write_tallies_csv)

C = PhysicalConstants().c


def path_average(I_in, tau, S):
    return S + (I_in - S) * -math.expm1(-tau) / tau


class TestStepSegment:
    def test_transparent(self):
        assert step_segment(3.0, 0.0, 7.0) == (3.0, 3.0)

    def test_unit_optical_depth(self):
        I_out, I_bar = step_segment(0.0, 1.0, 1.0)
        assert I_out == pytest.approx(1 - math.exp(-1), rel=1e-15)
        assert I_bar == pytest.approx(math.exp(-1), rel=1e-14)
        # alpha from the weighting identity
        alpha = (I_bar - I_out) / (0.0 - I_out)
        assert alpha == pytest.approx(0.418023, abs=1e-6)

    def test_saturated(self):
        I_out, I_bar = step_segment(2.0, 50.0, 5.0)
        assert abs(I_out - 5.0) <= 1e-15 * 5
        assert I_bar == pytest.approx(5 - 3 / 50, rel=1e-13)

    @pytest.mark.parametrize("tau", [1e-12, 1e-9, 5e-7, 2e-6, 1e-3])
    def test_series_branch(self, tau):
        I_out, I_bar = step_segment(1.5, tau, 0.25)
        assert I_out == pytest.approx(1.5 * math.exp(-tau) - 0.25 * math.expm1(-tau), rel=1e-13)
        assert I_bar == pytest.approx(path_average(1.5, tau, 0.25), rel=1e-13)

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            step_segment(1.0, -1e-3, 1.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 1e3), st.floats(1e-9, 1e2), st.floats(0, 1e3))
    def test_positive_and_conservative(self, I_in, tau, S):
        I_out, I_bar = step_segment(I_in, tau, S)
        assert I_out >= 0 and I_bar >= 0
        # I_out - I_in = tau (S - I_bar): exact balance along the segment
        scale = max(I_in, S, 1e-300)
        assert abs((I_out - I_in) - tau * (S - I_bar)) <= 1e-12 * scale * max(1.0, tau)


def transparent_sweep(grid, quad, I0, G=2):
    chars = CharacteristicGrid(grid, quad, 0.1)
    M = quad.n_directions
    src = CellSource.build(np.zeros((grid.n_cells, G)), np.zeros((grid.n_cells, G)),
                           np.zeros((M, grid.n_cells, G)), C, np.inf)
    I_bnd = np.zeros((grid.n_faces, G))
    for faces in grid.boundary_faces().values():
        I_bnd[faces] = I0
    return chars, sweep(chars, src, I_bnd, C), I_bnd


def test_isotropic_transparent_medium():
    grid = MaterialGrid(2.0, 1.5, 4, 3)
    quad = build_product_quadrature(3, 2)
    _, tl, _ = transparent_sweep(grid, quad, 0.7)
    for f in (tl.f_cell, tl.f_face):
        np.testing.assert_allclose(f[..., 0], 1 / 3, atol=1e-12)
        np.testing.assert_allclose(f[..., 1], 1 / 3, atol=1e-12)
        np.testing.assert_allclose(f[..., 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(tl.phi_cell, 4 * np.pi * 0.7, rtol=1e-13)
    check_tensors(tl.f_cell)


def test_beam_limit():
    om = np.array([0.999, 0.03, 0.0])
    om /= np.linalg.norm(om)
    quad = AngularQuadrature(om[None, :], np.array([4 * np.pi]))
    grid = MaterialGrid(1.0, 1.0, 2, 2)
    chars = CharacteristicGrid(grid, quad, 0.05)
    src = CellSource.build(np.full((4, 1), 0.1), np.full((4, 1), 1.0), np.zeros((1, 4, 1)), C, np.inf)
    tl = sweep(chars, src, np.zeros((grid.n_faces, 1)), C)
    np.testing.assert_allclose(tl.f_cell[..., 0], om[0] ** 2, rtol=1e-12)


def test_cold_absorber_attenuation():
    eps = 1e-10
    om = np.array([math.cos(eps), math.sin(eps), 0.0])
    quad = AngularQuadrature(om[None, :], np.array([4 * np.pi]))
    grid = MaterialGrid(4.0, 1.0, 4, 1)
    kappa = 0.8
    chars = CharacteristicGrid(grid, quad, 0.25)
    n = grid.n_cells
    src = CellSource.build(np.full((n, 1), kappa), np.zeros((n, 1)), np.zeros((1, n, 1)), C, np.inf)
    I_bnd = boundary_intensity(grid, BoundarySpec(left=1.0), FrequencyGrid.single(), PhysicalConstants())
    I_bnd[I_bnd > 0] = 1.0
    tl = sweep(chars, src, I_bnd, C)
    xl = np.arange(4.0)
    oracle = (np.exp(-kappa * xl) - np.exp(-kappa * (xl + 1))) / kappa
    np.testing.assert_allclose(tl.psi_cell[0, :, 0], oracle, rtol=1e-8)


def test_boundary_moments():
    grid = MaterialGrid(1.0, 1.0, 2, 2)
    quad = build_product_quadrature(8, 8)
    chars, tl, I_bnd = transparent_sweep(grid, quad, 2.0, G=1)
    bm = boundary_partial_moments(tl, quad, grid, I_bnd)
    np.testing.assert_allclose(bm.F_in, np.pi * 2.0, rtol=2e-3)
    # uniform isotropic field: no net normal flux
    np.testing.assert_allclose(bm.F_n, 0.0, atol=1e-12)
    vacuum = np.zeros_like(I_bnd)
    assert np.all(incoming_partial_flux(quad, "left", vacuum[grid.boundary_faces()["left"]]) == 0)


def test_missing_boundary_spec():
    grid = MaterialGrid(1.0, 1.0, 1, 1)
    with pytest.raises(ConfigurationError):
        boundary_intensity(grid, None, FrequencyGrid(), PhysicalConstants())
    chars = CharacteristicGrid(grid, build_product_quadrature(1, 1), 0.5)
    src = CellSource.build(np.ones((1, 1)), np.ones((1, 1)), np.zeros((4, 1, 1)), C, 1.0)
    with pytest.raises(ConfigurationError):
        sweep(chars, src, None, C)


def test_tensor_invariants_random_sources():
    rng = np.random.default_rng(7)
    grid = MaterialGrid(3.0, 2.0, 3, 2)
    quad = build_product_quadrature(3, 3)
    chars = CharacteristicGrid(grid, quad, 0.05)
    G, n, M = 3, grid.n_cells, quad.n_directions
    src = CellSource.build(rng.uniform(0.01, 5, (n, G)), rng.uniform(0, 1, (n, G)),
                           rng.uniform(0, 1, (M, n, G)), C, 0.02)
    I_bnd = boundary_intensity(grid, BoundarySpec(left=1.0, top=0.3), FrequencyGrid(
        np.array([0.0, 0.5, 2.0, 10.0])), PhysicalConstants())
    tl = sweep(chars, src, I_bnd, C, check=True)
    for f in (tl.f_cell, tl.f_face):
        np.testing.assert_allclose(f[..., 0] + f[..., 1] + f[..., 3], 1.0, atol=1e-12)
    again = sweep(chars, src, I_bnd, C)
    np.testing.assert_array_equal(again.psi_cell, tl.psi_cell)


def test_tallies_csv(tmp_path):
    grid = MaterialGrid(1.0, 1.0, 2, 1)
    _, tl, _ = transparent_sweep(grid, build_product_quadrature(2, 1), 1.0)
    path = tmp_path / "tallies.csv"
    write_tallies_csv(path, tl, grid)
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["cell", "group", "E"]
    assert len(rows) == 1 + grid.n_cells * 2
    assert float(rows[1][5]) == pytest.approx(1 / 3, abs=1e-12)
