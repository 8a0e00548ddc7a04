import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlqd.physics import (DEFAULT_GROUP_BOUNDS, RADIATION_CONSTANT, SPEED_OF_LIGHT, DomainError,
                          FrequencyGrid, MaterialEOS, OpacityModel, PhysicalConstants,
                          constant_opacity, fleck_cummings_opacity, group_emission,
                          planck_band_fraction)

PLANCK_NORM = 15.0 / math.pi**4


def simpson_fraction(a, b, n=100_000):
    # composite Simpson oracle on an even number of panels
    x = np.linspace(a, b, n + 1)
    f = np.zeros_like(x)
    nz = x > 0
    f[nz] = x[nz] ** 3 / np.expm1(x[nz])
    h = (b - a) / n
    s = f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum()
    return PLANCK_NORM * s * h / 3


def mp_fraction(a, b):
    mpmath.mp.dps = 30
    f = lambda x: x**3 / mpmath.expm1(x)
    return float(PLANCK_NORM * mpmath.quad(f, [a, b]))


class TestPlanckBandFraction:
    def test_whole_range(self):
        assert planck_band_fraction(0.0, np.inf) == pytest.approx(1.0, abs=1e-15)

    def test_empty_interval(self):
        assert planck_band_fraction(1.3, 1.3) == 0.0

    def test_simpson_oracle(self):
        assert abs(planck_band_fraction(0.0, 2.8) - simpson_fraction(0.0, 2.8)) < 1e-10

    @pytest.mark.parametrize("a,b", [(0.0, 0.1), (0.5, 1.9), (1.9, 2.1), (2.0, 7.0),
                                     (3.0, 40.0), (30.0, 200.0), (1e-4, 1e-3)])
    def test_high_precision_oracle(self, a, b):
        assert abs(planck_band_fraction(a, b) - mp_fraction(a, b)) < 1e-12

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            planck_band_fraction(2.0, 1.0)
        with pytest.raises(ValueError):
            planck_band_fraction(-1.0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(1e-6, 80.0), min_size=1, max_size=12, unique=True))
    def test_partition_sums_to_one(self, cuts):
        edges = [0.0] + sorted(cuts) + [np.inf]
        parts = [planck_band_fraction(a, b) for a, b in zip(edges[:-1], edges[1:])]
        assert all(p >= 0 for p in parts)
        assert abs(sum(parts) - 1.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 50.0), st.floats(1e-6, 20.0), st.floats(1e-6, 20.0))
    def test_additive_and_monotone(self, a, d1, d2):
        b, c = a + d1, a + d1 + d2
        whole = planck_band_fraction(a, c)
        assert abs(whole - planck_band_fraction(a, b) - planck_band_fraction(b, c)) < 1e-12
        assert whole >= planck_band_fraction(a, b)


class TestGroupEmission:
    def test_single_open_group(self):
        B = group_emission(np.array([1.0]), FrequencyGrid.single())
        assert B.shape == (1, 1)
        assert B[0, 0] == pytest.approx(RADIATION_CONSTANT * SPEED_OF_LIGHT / (4 * np.pi), rel=1e-14)
        assert B[0, 0] == pytest.approx(0.03273, abs=5e-6)

    def test_normalization_default_grid(self):
        T = np.geomspace(1e-3, 10.0, 41)
        B = group_emission(T, FrequencyGrid())
        total = 4 * np.pi * B.sum(-1)
        np.testing.assert_allclose(total, RADIATION_CONSTANT * SPEED_OF_LIGHT * T**4, rtol=1e-10)

    def test_stefan_boltzmann_scaling(self):
        B = group_emission(np.array([0.7, 1.4]), FrequencyGrid.single())
        assert B[1, 0] / B[0, 0] == pytest.approx(16.0, rel=1e-14)

    def test_matches_band_fraction(self):
        groups = FrequencyGrid()
        T = 0.35
        nu = groups.effective_bounds
        expected = [planck_band_fraction(a / T, b / T) for a, b in zip(nu[:-1], nu[1:])]
        B = group_emission(np.array([T]), groups)[0]
        np.testing.assert_allclose(4 * np.pi * B / (RADIATION_CONSTANT * SPEED_OF_LIGHT * T**4),
                                   expected, rtol=1e-12, atol=1e-300)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(DomainError):
            group_emission(np.array([1.0, 0.0]), FrequencyGrid())


class TestOpacity:
    def test_spectral_point(self):
        assert fleck_cummings_opacity(1.0, 1.0) == pytest.approx(27 * (1 - math.exp(-1)), rel=1e-15)
        assert fleck_cummings_opacity(1.0, 1.0) == pytest.approx(17.067, abs=1e-3)

    def test_constant_opacity(self):
        model = OpacityModel(constant_opacity(3.5))
        kg = model.group_opacity(np.array([1e-3, 0.2, 1.0, 4.0]), FrequencyGrid())
        np.testing.assert_allclose(kg, 3.5, rtol=1e-14)

    @pytest.mark.parametrize("nu0,T", [(1.0, 1.0), (0.3, 0.05), (5.0, 2.0)])
    def test_narrow_group_limit(self, nu0, T):
        groups = FrequencyGrid(np.array([0.5 * nu0, nu0, nu0 * (1 + 1e-6), 2 * nu0]))
        kg = OpacityModel().group_opacity(np.array([T]), groups)[0, 1]
        assert kg == pytest.approx(fleck_cummings_opacity(nu0, T), rel=1e-5)

    def test_brute_force_planck_mean(self):
        mpmath.mp.dps = 25
        groups = FrequencyGrid()
        T = 0.5
        kg = OpacityModel().group_opacity(np.array([T]), groups)[0]
        for g in (3, 8, 12):
            a, b = groups.bounds[g], groups.bounds[g + 1]
            w = lambda nu: nu**3 / mpmath.expm1(nu / T)
            num = mpmath.quad(lambda nu: 27 / nu**3 * (1 - mpmath.exp(-nu / T)) * w(nu), [a, b])
            den = mpmath.quad(w, [a, b])
            assert kg[g] == pytest.approx(float(num / den), rel=1e-6)

    def test_positive_and_decreasing_above_peak(self):
        groups = FrequencyGrid()
        T = 0.1
        kg = OpacityModel().group_opacity(np.array([T]), groups)[0]
        assert np.all(kg > 0)
        above = groups.bounds[:-1] > 3 * T
        assert np.all(np.diff(kg[above]) < 0)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(DomainError):
            OpacityModel().group_opacity(np.array([-1.0]), FrequencyGrid())


class TestEOS:
    def test_energy_density(self):
        eos = MaterialEOS()
        assert eos.energy_density(1.0) == pytest.approx(8.1181e-3, abs=1e-7)
        assert eos.energy_density(1.0) == pytest.approx(0.5917 * 0.01372, rel=1e-15)

    def test_small_temperature(self):
        assert MaterialEOS().energy_density(1e-300) < 1e-300

    def test_round_trip(self):
        eos = MaterialEOS()
        T = eos.temperature(eos.energy_density(1e-3))
        assert abs(T - 1e-3) <= 1e-15 * 1e-3

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_domain(self, bad):
        eos = MaterialEOS()
        with pytest.raises(DomainError):
            eos.energy_density(bad)
        with pytest.raises(DomainError):
            eos.temperature(bad)


class TestGridsAndConstants:
    def test_defaults(self):
        c = PhysicalConstants()
        assert (c.c, c.a_r) == (29.9792458, 0.01372)
        with pytest.raises(ValueError):
            PhysicalConstants(c=-1.0)

    def test_default_groups(self):
        g = FrequencyGrid()
        assert g.n_groups == 17
        assert g.bounds[0] == pytest.approx(1e-2) and g.bounds[-1] == pytest.approx(30.0)
        np.testing.assert_allclose(np.diff(np.log(DEFAULT_GROUP_BOUNDS)),
                                   np.log(3000.0) / 17, rtol=1e-12)
        # the default bounds capture a 1 keV Planckian
        assert planck_band_fraction(1e-2, 30.0) > 0.9999

    @pytest.mark.parametrize("bounds", [[1.0], [2.0, 1.0], [-1.0, 1.0], [0.0, np.inf]])
    def test_invalid_bounds(self, bounds):
        with pytest.raises(ValueError):
            FrequencyGrid(np.array(bounds))

    def test_from_file(self, tmp_path):
        path = tmp_path / "groups.txt"
        path.write_text("0.01\n0.1\n1.0\n10.0\n")
        assert FrequencyGrid.from_file(path).n_groups == 3
