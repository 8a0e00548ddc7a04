import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlqd.mesh import CharacteristicGrid, DegenerateDirectionError, MaterialGrid, trace_direction
from mlqd.quadrature import build_product_quadrature

R2 = np.sqrt(0.5)


def test_uniform_grid_indexing():
    g = MaterialGrid.uniform(6.0, 3.0, 1.5)
    assert (g.nx, g.ny) == (4, 2)
    lower, upper = g.face_cells()
    interior = (lower >= 0) & (upper >= 0)
    # every cell has four faces, interior faces two cells
    counts = np.bincount(np.concatenate([lower[lower >= 0], upper[upper >= 0]]), minlength=g.n_cells)
    assert np.all(counts == 4)
    assert interior.sum() == g.n_faces - 2 * (g.nx + g.ny)
    sides = g.boundary_faces()
    assert sum(v.size for v in sides.values()) == 2 * (g.nx + g.ny)


def test_uniform_grid_must_divide():
    with pytest.raises(ValueError, match="divide"):
        MaterialGrid.uniform(6.0, 6.0, 0.7)


def test_unit_square_diagonal():
    g = MaterialGrid(1.0, 1.0, 1, 1)
    rays = trace_direction(g, (R2, R2), 1.0)
    assert rays.n_rays == 2
    np.testing.assert_allclose(rays.widths, R2, rtol=1e-14)
    np.testing.assert_allclose(rays.seg_len, R2, rtol=1e-14)
    assert np.sum(rays.seg_len * rays.widths) == pytest.approx(1.0, rel=1e-14)


def test_unit_square_split_twice():
    g = MaterialGrid(1.0, 1.0, 1, 1)
    rays = trace_direction(g, (R2, R2), 0.2)
    # each of the two strips is halved twice
    assert rays.n_rays == 8
    np.testing.assert_allclose(rays.widths, R2 / 4, rtol=1e-14)
    assert rays.widths[0] == pytest.approx(0.17678, abs=1e-5)
    # children tile the parent strips
    lo = rays.offsets - rays.widths / 2
    hi = rays.offsets + rays.widths / 2
    np.testing.assert_allclose(hi[:-1], lo[1:], atol=1e-15)
    assert lo[0] == pytest.approx(-R2) and hi[-1] == pytest.approx(R2)


def test_near_axis_face_coverage():
    g = MaterialGrid(2.0, 1.0, 2, 1)
    d = np.array([0.9998, 0.0200])
    d /= np.linalg.norm(d)
    q = build_product_quadrature(1, 1)
    chars = CharacteristicGrid(g, q, 0.3, directions=[trace_direction(g, d, 0.3)])
    interior = g.xface(1, 0)
    assert chars.face_coverage()[0, interior] == pytest.approx(abs(d[0]), rel=1e-10)
    rays = chars.directions[0]
    crossing = [k for k in range(rays.n_rays) if interior in rays.crossings_of(k)]
    assert crossing
    for k in crossing:
        cells, _ = rays.segments_of(k)
        assert cells.tolist() == [0, 1]


def test_degenerate_direction():
    g = MaterialGrid(1.0, 1.0, 1, 1)
    with pytest.raises(DegenerateDirectionError):
        trace_direction(g, (1.0, 0.0, 0.0), 0.1)
    with pytest.raises(ValueError):
        trace_direction(g, (R2, R2), 0.0)


def test_fc_grid_rays_per_cell():
    g = MaterialGrid.uniform(6.0, 6.0, 0.6)
    q = build_product_quadrature(6, 6)
    chars = CharacteristicGrid(g, q, 7.5e-2)
    assert np.all(chars.widths <= 7.5e-2 * (1 + 1e-14))
    # every cell column is crossed by at least h_mat / h_moc rays per direction
    x_faces = np.arange(g.n_xfaces)
    for m, d in enumerate(chars.directions):
        crossings = np.bincount(d.cross_face, minlength=g.n_faces)[x_faces]
        per_column = crossings.reshape(g.ny, g.nx + 1).sum(axis=0)
        assert per_column.min() >= 8
    assert np.all(chars.cell_coverage() > 0)


def test_reflection_maps_rays():
    g = MaterialGrid(3.0, 2.0, 3, 2)
    d = np.array([0.6, 0.8])
    a = trace_direction(g, d, 0.1)
    b = trace_direction(g, d * [-1, 1], 0.1)
    np.testing.assert_array_equal(np.sort(a.widths), np.sort(b.widths))
    # mirrored cells carry the same segment lengths
    mirror = lambda cells: (cells // g.nx) * g.nx + (g.nx - 1 - cells % g.nx)
    la = np.bincount(a.seg_cell, weights=a.seg_len * np.repeat(a.widths, np.diff(a.seg_ptr)))
    lb = np.bincount(mirror(b.seg_cell), weights=b.seg_len * np.repeat(b.widths, np.diff(b.seg_ptr)))
    np.testing.assert_allclose(la, lb, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.floats(0.5, 3.0), st.floats(0.5, 3.0),
       st.floats(0.02, 1.0), st.integers(1, 3), st.integers(1, 3))
def test_coverage_random_grids(nx, ny, lx, ly, h_moc, n_polar, n_azi):
    g = MaterialGrid(lx, ly, nx, ny)
    q = build_product_quadrature(n_polar, n_azi)
    chars = CharacteristicGrid(g, q, h_moc)
    np.testing.assert_allclose(chars.cell_coverage(), g.cell_volume, rtol=1e-10)
    np.testing.assert_allclose(chars.face_coverage(), chars.face_projection(), rtol=1e-10)
    assert np.all(chars.seg_len > 0)
    assert np.all(chars.widths <= h_moc * (1 + 1e-12))


def test_segments_contiguous():
    g = MaterialGrid(2.0, 2.0, 4, 3)
    lower, upper = g.face_cells()
    for d in (np.array([0.3, 0.7]), np.array([-0.8, 0.2]), np.array([-0.5, -0.5])):
        rays = trace_direction(g, d, 0.05)
        for k in range(rays.n_rays):
            cells, _ = rays.segments_of(k)
            faces = rays.crossings_of(k)
            assert faces.size == cells.size + 1
            # the entry face is on the boundary and every face joins its neighbours
            assert lower[faces[0]] < 0 or upper[faces[0]] < 0
            for s, cell in enumerate(cells):
                assert cell in (lower[faces[s]], upper[faces[s]])
                assert cell in (lower[faces[s + 1]], upper[faces[s + 1]])


def test_refinement_monotone():
    g = MaterialGrid(2.0, 2.0, 2, 2)
    q = build_product_quadrature(2, 2)
    coarse = CharacteristicGrid(g, q, 0.2)
    fine = CharacteristicGrid(g, q, 0.1)
    assert fine.n_rays >= coarse.n_rays
    assert fine.widths.max() <= coarse.widths.max()


def test_mesh_csv(tmp_path):
    g = MaterialGrid(1.0, 1.0, 2, 2)
    chars = CharacteristicGrid(g, build_product_quadrature(1, 1), 0.5)
    path = tmp_path / "mesh.csv"
    chars.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["m", "k", "s", "cell", "length", "width"]
    assert len(rows) - 1 == chars.n_segments
