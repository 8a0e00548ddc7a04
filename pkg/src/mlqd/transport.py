"""Long-characteristics sweep of the time-discretized transport equation.

The sweep integrates the intensity exactly along every segment of every ray,
for all groups at once, and tallies cell- and face-average angular
intensities. Angular moments, Eddington tensors and boundary factors are
formed from those tallies.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np

from .mesh import CharacteristicGrid
from .physics import FrequencyGrid, PhysicalConstants, group_emission

SMALL_TAU = 1e-6
ALPHA_SERIES_TAU = 1e-2
SIDES = ("left", "right", "bottom", "top")
_OUTWARD = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "bottom": (0.0, -1.0), "top": (0.0, 1.0)}


def step_segment(I_in, tau, S):
    """Propagate intensity across one segment.

    Returns ``(I_out, I_bar)``: the outgoing intensity and the segment-average
    intensity ``alpha*I_in + (1-alpha)*I_out``. Elementwise on arrays.
    """
    I_in, tau, S = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (I_in, tau, S)))
    if np.any(tau < 0):
        raise ValueError("optical thickness must be nonnegative")
    small = tau < SMALL_TAU
    with np.errstate(divide="ignore", invalid="ignore"):
        one_minus = -np.expm1(-tau)
        I_out = I_in * np.exp(-tau) + S * one_minus
        alpha = 1.0 / tau - np.exp(-tau) / one_minus
    t = tau[small]
    I_out = np.where(small, 0.0, I_out)
    I_out[small] = I_in[small] * (1.0 - t + 0.5 * t * t) + S[small] * (t - 0.5 * t * t)
    # the closed form for alpha cancels well above SMALL_TAU, so it gets its own series
    near = tau < ALPHA_SERIES_TAU
    t2 = tau[near] ** 2
    alpha = np.where(near, 0.0, alpha)
    alpha[near] = 0.5 - tau[near] / 12.0 * (1.0 - t2 / 60.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 40.0)))
    I_bar = alpha * I_in + (1.0 - alpha) * I_out
    if I_out.ndim == 0:
        return float(I_out), float(I_bar)
    return I_out, I_bar


@numba.njit(cache=True, parallel=True)
def _sweep_kernel(dir_ray_ptr, seg_ptr, cross_ptr, seg_cell, seg_len, cross_face, widths,
                  inv_sin, kappa_t, src, I_bnd, n_cells, n_faces):
    M = dir_ray_ptr.size - 1
    G = kappa_t.shape[1]
    cell_acc = np.zeros((M, n_cells, G))
    face_acc = np.zeros((M, n_faces, G))
    for m in numba.prange(M):
        I = np.empty(G)
        for k in range(dir_ray_ptr[m], dir_ray_ptr[m + 1]):
            w = widths[k]
            c0 = cross_ptr[k]
            f = cross_face[c0]
            for g in range(G):
                I[g] = I_bnd[f, g]
                face_acc[m, f, g] += w * I[g]
            n_seg = seg_ptr[k + 1] - seg_ptr[k]
            for s in range(n_seg):
                j = seg_ptr[k] + s
                cell = seg_cell[j]
                area = seg_len[j] * w
                path = seg_len[j] * inv_sin[m]
                f = cross_face[c0 + s + 1]
                for g in range(G):
                    tau = kappa_t[cell, g] * path
                    S = src[m, cell, g]
                    I_in = I[g]
                    # alpha*I_in + (1-alpha)*I_out == S + (I_in - S)(1 - e^-tau)/tau
                    if tau < 1e-6:
                        om = tau - 0.5 * tau * tau
                        ratio = 1.0 - 0.5 * tau + tau * tau / 6.0
                    else:
                        if tau < 0.5:
                            om = -math.expm1(-tau)
                        elif tau > 40.0:
                            om = 1.0  # e^-tau below double precision of 1
                        else:
                            om = 1.0 - math.exp(-tau)
                        ratio = om / tau
                    I_out = I_in * (1.0 - om) + S * om
                    cell_acc[m, cell, g] += area * (S + (I_in - S) * ratio)
                    face_acc[m, f, g] += w * I_out
                    I[g] = I_out
    return cell_acc, face_acc


@dataclass
class CellSource:
    """Modified opacity ``kappa_t`` (cells, G) and source ``q`` (M, cells, G)."""

    kappa_t: np.ndarray
    q: np.ndarray

    @classmethod
    def build(cls, kappa, planck, psi_prev, c: float, dt: float) -> "CellSource":
        """kappa_t = kappa + 1/(c dt), q = kappa*B + psi_prev/(c dt).

        ``dt = inf`` gives the steady-state source.
        """
        inv_cdt = 0.0 if np.isinf(dt) else 1.0 / (c * dt)
        kappa_t = kappa + inv_cdt
        q = (kappa * planck)[None, :, :] + inv_cdt * psi_prev
        return cls(kappa_t, q)

    @property
    def ratio(self) -> np.ndarray:
        """Q / kappa_t, the saturation intensity of each segment."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.q / self.kappa_t[None, :, :]
        return np.where(self.kappa_t[None, :, :] > 0, r, 0.0)


@dataclass
class BoundarySpec:
    """Isotropic incoming radiation per side: a temperature (Planckian) or None (vacuum)."""

    left: float | None = None
    right: float | None = None
    bottom: float | None = None
    top: float | None = None

    def temperature(self, side: str):
        return getattr(self, side)

    def incoming_intensity(self, side: str, groups: FrequencyGrid, constants: PhysicalConstants):
        T = self.temperature(side)
        if T is None:
            return np.zeros(groups.n_groups)
        return group_emission(np.array([T]), groups, constants)[0]


class ConfigurationError(ValueError):
    pass


def boundary_intensity(grid, spec: BoundarySpec, groups: FrequencyGrid, constants: PhysicalConstants):
    """Incoming intensity per (face, group); zero on interior faces."""
    if spec is None:
        raise ConfigurationError("a boundary specification is required for the sweep")
    out = np.zeros((grid.n_faces, groups.n_groups))
    for side, faces in grid.boundary_faces().items():
        out[faces] = spec.incoming_intensity(side, groups, constants)
    return out


@dataclass
class MomentTallies:
    """Angular moments from one sweep.

    Tensors are stored as (..., 4) arrays holding the xx, yy, xy and zz
    components of the Eddington tensor.
    """

    psi_cell: np.ndarray  # (M, cells, G) cell-average angular intensity
    psi_face: np.ndarray  # (M, faces, G) face-average angular intensity
    phi_cell: np.ndarray  # (cells, G)
    phi_face: np.ndarray  # (faces, G)
    flux_cell: np.ndarray  # (cells, G, 2)
    flux_face: np.ndarray  # (faces, G) normal component, +x or +y
    f_cell: np.ndarray  # (cells, G, 4)
    f_face: np.ndarray  # (faces, G, 4)
    c: float

    @property
    def E_cell(self):
        return self.phi_cell / self.c

    @property
    def E_face(self):
        return self.phi_face / self.c


def _wsum(coef, psi):
    # sum_m coef[m] psi[m], psi: (M, N, G)
    return np.tensordot(coef, psi, axes=(0, 0))


def _second_moments(weights, omega, psi):
    # psi: (M, N, G) -> (N, G, 4) of xx, yy, xy, zz moments
    ox, oy, oz = omega[:, 0], omega[:, 1], omega[:, 2]
    comps = [ox * ox, oy * oy, ox * oy, oz * oz]
    return np.stack([_wsum(weights * cmp, psi) for cmp in comps], axis=-1)


def eddington(second, phi):
    """Eddington tensor second/phi with the isotropic tensor where phi == 0."""
    iso = np.array([1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0])
    out = np.empty_like(second)
    pos = phi > 0
    out[pos] = second[pos] / phi[pos][:, None]
    out[~pos] = iso
    return out


def sweep(chars: CharacteristicGrid, sources: CellSource, I_bnd, c: float = PhysicalConstants().c,
          check: bool = False) -> MomentTallies:
    """Sweep all directions and groups and form the moment tallies."""
    if I_bnd is None:
        raise ConfigurationError("missing boundary intensities")
    grid, quad = chars.grid, chars.quadrature
    cell_acc, face_acc = _sweep_kernel(
        chars.dir_ray_ptr, chars.seg_ptr, chars.cross_ptr, chars.seg_cell, chars.seg_len,
        chars.cross_face, chars.widths, 1.0 / quad.sin_polar,
        np.ascontiguousarray(sources.kappa_t), np.ascontiguousarray(sources.ratio),
        np.ascontiguousarray(I_bnd), grid.n_cells, grid.n_faces,
    )
    psi_cell = cell_acc / grid.cell_volume
    psi_face = face_acc / chars.face_projection()[:, :, None]
    return tallies_from_intensities(psi_cell, psi_face, quad, grid, c, check=check)


def tallies_from_intensities(psi_cell, psi_face, quad, grid, c, check=False) -> MomentTallies:
    w, om = quad.weights, quad.omega
    phi_cell = _wsum(w, psi_cell)
    phi_face = _wsum(w, psi_face)
    flux_cell = np.stack([_wsum(w * om[:, a], psi_cell) for a in (0, 1)], axis=-1)
    nxf = grid.n_xfaces
    flux_face = np.concatenate([_wsum(w * om[:, 0], psi_face[:, :nxf]),
                                _wsum(w * om[:, 1], psi_face[:, nxf:])])
    f_cell = eddington(_second_moments(w, om, psi_cell), phi_cell)
    f_face = eddington(_second_moments(w, om, psi_face), phi_face)
    tallies = MomentTallies(psi_cell, psi_face, phi_cell, phi_face, flux_cell, flux_face,
                            f_cell, f_face, c)
    if check:
        check_tensors(f_cell)
        check_tensors(f_face)
    return tallies


def check_tensors(f, tol=1e-12):
    """Assert trace = 1, diagonal in [0, 1] and nonnegative in-plane determinant."""
    trace = f[..., 0] + f[..., 1] + f[..., 3]
    if np.any(np.abs(trace - 1.0) > tol):
        raise AssertionError("Eddington tensor trace differs from 1")
    diag = f[..., [0, 1, 3]]
    if np.any(diag < -tol) or np.any(diag > 1 + tol):
        raise AssertionError("Eddington tensor diagonal outside [0, 1]")
    if np.any(f[..., 0] * f[..., 1] - f[..., 2] ** 2 < -tol):
        raise AssertionError("Eddington tensor in-plane determinant is negative")


def outward_normals(side: str):
    return np.array(_OUTWARD[side])


def incoming_partial_flux(quad, side: str, I_in):
    """sum over incoming directions of w |Omega.n| I_in, per group."""
    mu = quad.omega[:, :2] @ outward_normals(side)
    inc = mu < 0
    return np.sum(quad.weights[inc] * -mu[inc]) * np.asarray(I_in)


@dataclass
class BoundaryMoments:
    """Per boundary face and group: face energy density, outward normal flux,
    incoming and outgoing partial fluxes, and the factor C_b = F_out/(c E_b)."""

    faces: np.ndarray
    outward: np.ndarray  # +1 / -1 sign of the outward normal relative to the face normal
    E: np.ndarray
    F_n: np.ndarray
    F_in: np.ndarray
    F_out: np.ndarray
    C_b: np.ndarray


def boundary_partial_moments(tallies: MomentTallies, quad, grid, I_bnd) -> BoundaryMoments:
    """Boundary closure data; C_b falls back to the isotropic value where E_b = 0."""
    faces, signs, F_in, F_out, iso = [], [], [], [], []
    for side, fids in grid.boundary_faces().items():
        n = outward_normals(side)
        mu = quad.omega[:, :2] @ n
        out = mu > 0
        faces.append(fids)
        signs.append(np.full(fids.size, n.sum()))
        F_in.append(incoming_partial_flux(quad, side, I_bnd[fids]))
        psi = tallies.psi_face[:, fids, :]
        F_out.append(_wsum(quad.weights[out] * mu[out], psi[out]))
        iso.append(np.full(fids.size, np.sum(quad.weights[out] * mu[out]) / quad.weights.sum()))
    faces = np.concatenate(faces)
    signs = np.concatenate(signs)
    F_in = np.concatenate(F_in)
    F_out = np.concatenate(F_out)
    iso = np.concatenate(iso)
    E = tallies.E_face[faces]
    F_n = signs[:, None] * tallies.flux_face[faces]
    with np.errstate(divide="ignore", invalid="ignore"):
        C_b = F_out / (tallies.c * E)
    C_b = np.where(E > 0, C_b, iso[:, None])
    return BoundaryMoments(faces, signs, E, F_n, F_in, F_out, C_b)


def write_tallies_csv(path, tallies: MomentTallies, grid) -> None:
    """Debug dump of per-cell moments and tensors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "group", "E", "Fx", "Fy", "fxx", "fyy", "fxy", "fzz"])
        for i in range(grid.n_cells):
            for g in range(tallies.phi_cell.shape[1]):
                f = tallies.f_cell[i, g]
                writer.writerow([i, g, repr(float(tallies.E_cell[i, g])),
                                 repr(float(tallies.flux_cell[i, g, 0])),
                                 repr(float(tallies.flux_cell[i, g, 1])),
                                 *(repr(float(v)) for v in f)])
