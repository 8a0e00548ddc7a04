import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlqd.quadrature import AngularQuadrature, build_product_quadrature

FOUR_PI = 4 * np.pi


def test_36_directions():
    q = build_product_quadrature(3, 3)
    assert q.n_directions == 36
    assert abs(q.weights.sum() - FOUR_PI) < 1e-12


def test_144_directions_36_per_quadrant():
    q = build_product_quadrature(6, 6)
    assert q.n_directions == 144
    quadrant = (q.omega[:, 0] > 0) & (q.omega[:, 1] > 0)
    assert quadrant.sum() == 36


def test_single_azimuth_second_moment():
    q = build_product_quadrature(1, 1)
    assert q.n_directions == 4
    # brute-force sum rather than the moment helper
    s = sum(w * o[0] ** 2 for w, o in zip(q.weights, q.omega))
    assert abs(s - FOUR_PI / 3) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 10))
def test_moment_invariants(n_polar, n_azi):
    q = build_product_quadrature(n_polar, n_azi)
    assert q.n_directions == 4 * n_polar * n_azi
    np.testing.assert_allclose(np.linalg.norm(q.omega, axis=1), 1.0, atol=1e-14)
    assert np.all(q.weights > 0)
    assert abs(q.moment(0) - FOUR_PI) < 1e-12
    # in-plane first moments vanish; the stored hemisphere has Omega_z > 0
    np.testing.assert_allclose(q.moment(1)[:2], 0.0, atol=1e-12)
    assert np.all(q.omega[:, 2] > 0)
    np.testing.assert_allclose(q.moment(2), FOUR_PI / 3 * np.eye(3), atol=1e-12)
    assert np.all(q.omega[:, 0] != 0) and np.all(q.omega[:, 1] != 0)


@pytest.mark.parametrize("axis", [0, 1])
def test_reflection_symmetry(axis):
    q = build_product_quadrature(4, 3)
    flipped = q.omega.copy()
    flipped[:, axis] *= -1
    key = lambda om: sorted(map(tuple, np.round(om, 13)))
    assert key(flipped) == key(q.omega)


def test_polar_sine():
    q = build_product_quadrature(3, 2)
    np.testing.assert_allclose(q.sin_polar, np.sqrt(1 - q.omega[:, 2] ** 2), rtol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(q.in_plane, axis=1), 1.0, rtol=1e-14)


@pytest.mark.parametrize("n_polar,n_azi", [(0, 1), (1, 0)])
def test_rejects_zero_counts(n_polar, n_azi):
    with pytest.raises(ValueError):
        build_product_quadrature(n_polar, n_azi)


def test_rejects_axis_aligned_direction():
    with pytest.raises(ValueError):
        AngularQuadrature(np.array([[1.0, 0.0, 0.0]]), np.array([FOUR_PI]))


def test_file_round_trip(tmp_path):
    q = build_product_quadrature(2, 2)
    path = tmp_path / "quad.txt"
    np.savetxt(path, np.column_stack([q.omega, q.weights]), fmt="%.17g")
    r = AngularQuadrature.from_file(path)
    np.testing.assert_array_equal(r.omega, q.omega)
    np.testing.assert_array_equal(r.weights, q.weights)


def test_file_rejects_bad_normalization(tmp_path):
    q = build_product_quadrature(2, 2)
    path = tmp_path / "quad.txt"
    np.savetxt(path, np.column_stack([q.omega, 0.5 * q.weights]))
    with pytest.raises(ValueError):
        AngularQuadrature.from_file(path)
