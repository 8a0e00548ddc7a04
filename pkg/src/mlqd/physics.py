"""Physical constants, frequency groups, Planck emission, opacities and EOS.

Unit system: temperature and photon energy in keV, length in cm, time in ns,
energy in jerks (1e9 J).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb, factorial
from pathlib import Path
from typing import Callable

import numpy as np

SPEED_OF_LIGHT = 29.9792458  # cm/ns
RADIATION_CONSTANT = 0.01372  # jerks/(cm^3 keV^4)

_PLANCK_NORM = 15.0 / np.pi**4
_SERIES_SWITCH = 2.0
# t/(e^t-1) = sum B_k t^k/k! converges for |t| < 2 pi; at t = 2 the terms
# fall like (1/pi)^k, so 40 terms reach double precision
_N_BERNOULLI = 40


def _bernoulli_numbers(n):
    # exact B_0..B_n (B_1 = -1/2); floating-point tables lose digits at small k
    B = [Fraction(1)]
    for m in range(1, n + 1):
        B.append(-sum(comb(m + 1, k) * B[k] for k in range(m)) / (m + 1))
    return B


_BERNOULLI_COEF = np.array([float(b / ((k + 3) * factorial(k)))
                            for k, b in enumerate(_bernoulli_numbers(_N_BERNOULLI))])


class DomainError(ValueError):
    """Raised for a nonpositive temperature or energy density."""


@dataclass(frozen=True)
class PhysicalConstants:
    c: float = SPEED_OF_LIGHT
    a_r: float = RADIATION_CONSTANT

    def __post_init__(self):
        if not (self.c > 0 and self.a_r > 0):
            raise ValueError("c and a_r must be positive")


def _lower_integral_small(x):
    # int_0^x t^3/(e^t - 1) dt = x^3 sum_k B_k x^k / ((k+3) k!)
    x = np.asarray(x, dtype=float)
    acc = np.full(x.shape, _BERNOULLI_COEF[-1])
    for coef in _BERNOULLI_COEF[-2::-1]:
        acc = acc * x + coef
    return acc * x**3


def _upper_integral_large(x):
    # int_x^inf t^3/(e^t - 1) dt = sum_n e^{-nx}(x^3/n + 3x^2/n^2 + 6x/n^3 + 6/n^4)
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    live = np.isfinite(x) & (x < 745.0)
    xf = x[live]
    if xf.size == 0:
        return out
    q = np.exp(-xf)
    qn = q.copy()
    acc = np.zeros_like(xf)
    n_max = int(np.ceil(38.0 / xf.min())) + 1
    for n in range(1, n_max + 1):
        term = qn * (((xf / n + 3.0 / n**2) * xf + 6.0 / n**3) * xf + 6.0 / n**4)
        acc += term
        if np.all(term <= 1e-17 * acc):
            break
        qn *= q
    out[live] = acc
    return out


def planck_band_fraction(x_lo, x_hi):
    """Fraction of a normalized Planck spectrum between x_lo and x_hi.

    Works elementwise on arrays; ``x_hi`` may be ``inf``.
    """
    x_lo = np.asarray(x_lo, dtype=float)
    x_hi = np.asarray(x_hi, dtype=float)
    if np.any(x_lo < 0) or np.any(~(x_hi >= x_lo)) or np.any(np.isnan(x_lo)):
        raise ValueError("planck_band_fraction requires 0 <= x_lo <= x_hi")
    x_lo, x_hi = np.broadcast_arrays(x_lo, x_hi)
    out = _band_from_integrals(*_integrals(x_lo), *_integrals(x_hi))
    return out[()] if out.ndim == 0 else out


def _integrals(x):
    """Lower integral where x < 2 and upper integral elsewhere (zero in the unused slot)."""
    small = x < _SERIES_SWITCH
    lower = np.zeros(x.shape)
    upper = np.zeros(x.shape)
    lower[small] = _lower_integral_small(x[small])
    upper[~small] = _upper_integral_large(x[~small])
    return small, lower, upper


def _band_from_integrals(s_lo, l_lo, u_lo, s_hi, l_hi, u_hi):
    # integrate directly when both ends are small, difference tails otherwise
    tail_lo = np.where(s_lo, 1.0 - _PLANCK_NORM * l_lo, _PLANCK_NORM * u_lo)
    tail_hi = np.where(s_hi, 1.0 - _PLANCK_NORM * l_hi, _PLANCK_NORM * u_hi)
    out = np.where(s_hi, _PLANCK_NORM * (l_hi - l_lo), tail_lo - tail_hi)
    return np.clip(out, 0.0, 1.0)


DEFAULT_GROUP_BOUNDS = np.geomspace(1e-2, 30.0, 18)


@dataclass(frozen=True)
class FrequencyGrid:
    """Group boundaries nu_{g-1/2}, g = 1..G+1, in keV.

    Emission below the first bound is folded into group 1 and emission above
    the last bound into group G, so the groups partition (0, inf).
    """

    bounds: np.ndarray = field(default_factory=lambda: DEFAULT_GROUP_BOUNDS.copy())

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least two group bounds")
        if b[0] < 0 or not np.all(np.diff(b) > 0) or not np.isfinite(b[-1]):
            raise ValueError("group bounds must be finite, >= 0 and strictly increasing")
        object.__setattr__(self, "bounds", b)

    @property
    def n_groups(self) -> int:
        return self.bounds.size - 1

    @property
    def effective_bounds(self) -> np.ndarray:
        b = self.bounds.copy()
        b[0] = 0.0
        b[-1] = np.inf
        return b

    @classmethod
    def single(cls) -> "FrequencyGrid":
        return cls(np.array([0.0, 1.0]))

    @classmethod
    def from_file(cls, path) -> "FrequencyGrid":
        values = [float(line) for line in Path(path).read_text().split() if line.strip()]
        return cls(np.array(values))


def group_emission(T, groups: FrequencyGrid, constants: PhysicalConstants = PhysicalConstants()):
    """Group Planck intensities B_g(T), shape ``T.shape + (G,)``.

    Normalized so that 4*pi*sum_g B_g = a_R c T^4.
    """
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise DomainError("temperature must be positive")
    x = groups.effective_bounds / T[..., None]
    s, lower, upper = _integrals(x)
    frac = _band_from_integrals(s[..., :-1], lower[..., :-1], upper[..., :-1],
                                s[..., 1:], lower[..., 1:], upper[..., 1:])
    return (constants.a_r * constants.c / (4 * np.pi)) * T[..., None] ** 4 * frac


def fleck_cummings_opacity(nu, T):
    """Spectral opacity 27/nu^3 (1 - exp(-nu/T)) in cm^-1."""
    return 27.0 / nu**3 * -np.expm1(-nu / T)


def constant_opacity(kappa0: float) -> Callable:
    def spectral(nu, T):
        return np.full(np.broadcast(nu, T).shape, float(kappa0))
    return spectral


@dataclass
class OpacityModel:
    """Spectral opacity with Planck-weighted group averaging.

    Closed groups use Gauss-Legendre in frequency; the open top group uses
    Gauss-Laguerre in (nu - nu_lo)/T.
    """

    spectral: Callable = fleck_cummings_opacity
    order: int = 8

    def __post_init__(self):
        self._gl = np.polynomial.legendre.leggauss(self.order)
        self._lag = np.polynomial.laguerre.laggauss(self.order)

    def group_opacity(self, T, groups: FrequencyGrid):
        """Planck-weighted group opacities, shape ``T.shape + (G,)``."""
        T = np.asarray(T, dtype=float)
        if np.any(T <= 0):
            raise DomainError("temperature must be positive")
        Tc = T[..., None, None]
        nu = groups.effective_bounds
        lo, hi = nu[:-1], nu[1:]
        closed = np.isfinite(hi)
        G = lo.size
        out = np.empty(T.shape + (G,))

        t, w = self._gl
        lo_c, hi_c = lo[closed], hi[closed]
        nodes = 0.5 * (hi_c - lo_c)[:, None] * (t + 1.0) + lo_c[:, None]
        # Planck weight scaled by exp(nu_lo/T) to stay finite at low T
        weight = nodes**3 * np.exp(-(nodes - lo_c[:, None]) / Tc) / -np.expm1(-nodes / Tc)
        weight = weight * w
        kap = self.spectral(nodes, Tc)
        out[..., closed] = (kap * weight).sum(-1) / weight.sum(-1)

        if not np.all(closed):
            tl, wl = self._lag
            lo_o = lo[~closed]
            nodes = lo_o[:, None] + Tc * tl
            weight = wl * nodes**3 / -np.expm1(-nodes / Tc)
            kap = self.spectral(nodes, Tc)
            out[..., ~closed] = (kap * weight).sum(-1) / weight.sum(-1)
        return out


@dataclass(frozen=True)
class MaterialEOS:
    """Linear equation of state eps = c_v T."""

    c_v: float = 0.5917 * RADIATION_CONSTANT

    def energy_density(self, T):
        T = np.asarray(T, dtype=float)
        if np.any(T <= 0):
            raise DomainError("temperature must be positive")
        return self.c_v * T

    def temperature(self, eps):
        eps = np.asarray(eps, dtype=float)
        if np.any(eps <= 0):
            raise DomainError("energy density must be positive")
        return eps / self.c_v
