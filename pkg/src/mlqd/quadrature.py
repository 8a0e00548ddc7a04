"""Angular quadrature for x-y geometry.

Only the upper hemisphere (Omega_z > 0) is stored; its weights are doubled
because the intensity in 2D Cartesian geometry is even in Omega_z.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class AngularQuadrature:
    """Directions ``omega`` (M, 3) and weights ``weights`` (M,) summing to 4 pi."""

    omega: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if omega.ndim != 2 or omega.shape[1] != 3 or weights.shape != (omega.shape[0],):
            raise ValueError("omega must be (M, 3) and weights (M,)")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any(np.abs(np.linalg.norm(omega, axis=1) - 1.0) > 1e-12):
            raise ValueError("directions must be unit vectors")
        if np.any(omega[:, 0] == 0.0) or np.any(omega[:, 1] == 0.0):
            raise ValueError("directions must not be aligned with the x or y axis")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "weights", weights)

    @property
    def n_directions(self) -> int:
        return self.weights.size

    @property
    def sin_polar(self) -> np.ndarray:
        """sin(zeta), the length of the in-plane projection."""
        return np.hypot(self.omega[:, 0], self.omega[:, 1])

    @property
    def in_plane(self) -> np.ndarray:
        """Normalized in-plane projections, shape (M, 2)."""
        return self.omega[:, :2] / self.sin_polar[:, None]

    def moment(self, order: int):
        """Quadrature moment sum_m w_m Omega_m^{(x)order}, for order 0, 1 or 2."""
        if order == 0:
            return self.weights.sum()
        if order == 1:
            return self.weights @ self.omega
        if order == 2:
            return np.einsum("m,mi,mj->ij", self.weights, self.omega, self.omega)
        raise ValueError("order must be 0, 1 or 2")

    @classmethod
    def from_file(cls, path) -> "AngularQuadrature":
        """Read lines of ``Ox Oy Oz w``."""
        data = np.loadtxt(Path(path), ndmin=2)
        if data.shape[1] != 4:
            raise ValueError("quadrature file lines must hold 'Ox Oy Oz w'")
        quad = cls(data[:, :3], data[:, 3])
        if abs(quad.weights.sum() - FOUR_PI) > 1e-12 * FOUR_PI:
            raise ValueError("quadrature weights must sum to 4 pi")
        return quad


def build_product_quadrature(n_polar: int, n_azimuthal: int) -> AngularQuadrature:
    """Gauss-Legendre (polar) x equal-weight Chebyshev (azimuthal) product set.

    ``n_polar`` cosines per hemisphere and ``n_azimuthal`` angles per quadrant
    give ``4 * n_polar * n_azimuthal`` directions.
    """
    if n_polar < 1 or n_azimuthal < 1:
        raise ValueError("n_polar and n_azimuthal must be >= 1")
    mu, wmu = np.polynomial.legendre.leggauss(2 * n_polar)
    upper = mu > 0
    mu, wmu = mu[upper], wmu[upper]
    # doubled hemisphere weights; sum over mu > 0 of wmu is 1
    wmu = 2.0 * wmu

    j = np.arange(n_azimuthal)
    phi_q = 0.5 * np.pi * (j + 0.5) / n_azimuthal
    phi = np.concatenate([phi_q + q * 0.5 * np.pi for q in range(4)])
    wphi = np.full(phi.size, 2.0 * np.pi / phi.size)

    mu_g, phi_g = np.meshgrid(mu, phi, indexing="ij")
    wmu_g, wphi_g = np.meshgrid(wmu, wphi, indexing="ij")
    sin_t = np.sqrt(1.0 - mu_g**2)
    omega = np.stack([sin_t * np.cos(phi_g), sin_t * np.sin(phi_g), mu_g], axis=-1).reshape(-1, 3)
    weights = (wmu_g * wphi_g).ravel()
    return AngularQuadrature(omega, weights)
