"""Finite-volume low-order quasidiffusion (LOQD) systems.

Unknowns of one system are ordered ``[E cells | F faces | E_b boundary faces]``:
cell-centered energy density, face-normal flux (+x on x-faces, +y on
y-faces) and an auxiliary energy density on each boundary face. The same
stencil serves every group and the effective grey problem, so the grey
system is the exact group sum of the multigroup systems once the spectral
closures are formed from the multigroup solution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import MaterialGrid

log = logging.getLogger(__name__)

ISO = 1.0 / 3.0
# relative temperature change treated as converged regardless of the requested
# tolerance; smaller changes are below round-off of the linear solve
NEWTON_FLOOR = 1e-14


class SolverError(RuntimeError):
    pass


class NewtonError(RuntimeError):
    pass


class Stencil:
    """Index bookkeeping for one material grid."""

    def __init__(self, grid: MaterialGrid):
        self.grid = grid
        g = grid
        self.C, self.NF = g.n_cells, g.n_faces
        lower, upper = g.face_cells()
        self.lower, self.upper = lower, upper
        bf = g.boundary_faces()
        self.sides = list(bf)
        self.bfaces = np.concatenate([bf[s] for s in self.sides])
        self.bside = np.concatenate([np.full(bf[s].size, i) for i, s in enumerate(self.sides)])
        # outward normal relative to the face normal
        self.bsign = np.array([-1.0, 1.0, -1.0, 1.0])[self.bside]
        self.NB = self.bfaces.size
        self.bindex = np.full(self.NF, -1)
        self.bindex[self.bfaces] = np.arange(self.NB)
        self.N = self.C + self.NF + self.NB
        self.is_x = np.arange(self.NF) < g.n_xfaces
        self.h_normal = np.where(self.is_x, g.dx, g.dy)
        self.h_tangent = np.where(self.is_x, g.dy, g.dx)
        self.interior = (lower >= 0) & (upper >= 0)
        self._tangent_neighbours()

    def iF(self, f):
        return self.C + f

    def iEb(self, b):
        return self.C + self.NF + b

    def _tangent_neighbours(self):
        g = self.grid
        nx, ny = g.nx, g.ny
        f = np.arange(self.NF)
        prev = np.full(self.NF, -1)
        nxt = np.full(self.NF, -1)
        # x-faces: neighbours along y; y-faces: neighbours along x
        fx = f[self.is_x]
        ix, iy = fx % (nx + 1), fx // (nx + 1)
        prev[fx] = np.where(iy > 0, fx - (nx + 1), -1)
        nxt[fx] = np.where(iy < ny - 1, fx + (nx + 1), -1)
        fy = f[~self.is_x]
        loc = fy - g.n_xfaces
        jx = loc % nx
        prev[fy] = np.where(jx > 0, fy - 1, -1)
        nxt[fy] = np.where(jx < nx - 1, fy + 1, -1)
        self.t_prev, self.t_next = prev, nxt

    def face_energy(self, E_cell, E_b):
        """Face energy: mean of adjacent cells, or the boundary unknown."""
        out = np.empty((self.NF,) + E_cell.shape[1:])
        lo, up = self.lower, self.upper
        inter = self.interior
        out[inter] = 0.5 * (E_cell[lo[inter]] + E_cell[up[inter]])
        out[self.bfaces] = E_b
        return out

    def face_energy_terms(self):
        """Columns and coefficients expressing face energy in unknowns: two terms per face."""
        cols = np.empty((self.NF, 2), dtype=int)
        coef = np.empty((self.NF, 2))
        inter = self.interior
        cols[inter, 0] = self.lower[inter]
        cols[inter, 1] = self.upper[inter]
        coef[inter] = 0.5
        b = self.bfaces
        cols[b, 0] = self.iEb(np.arange(self.NB))
        cols[b, 1] = cols[b, 0]
        coef[b, 0] = 1.0
        coef[b, 1] = 0.0
        return cols, coef


@dataclass
class SystemCoefficients:
    """Coefficients of one LOQD system (a group or the grey problem).

    Cell arrays have length n_cells, face arrays n_faces, boundary arrays the
    number of boundary faces (ordered left, right, bottom, top).
    """

    sigma: np.ndarray  # cell absorption rate (1/ns), c*kappa
    source: np.ndarray  # cell emission (energy/cm^3/ns)
    E_prev: np.ndarray
    f_nn_cell: np.ndarray  # (cells, 2): f_xx, f_yy
    drag: np.ndarray  # face opacity multiplying F (1/cm)
    eta: np.ndarray  # face coefficient multiplying face E (1/cm)
    F_prev: np.ndarray
    f_xy_face: np.ndarray
    f_nn_face: np.ndarray  # normal diagonal component on each face
    C_b: np.ndarray
    F_in: np.ndarray


def _times(geom, v):
    """Geometric factor (n,) times values (n,) or (n, G)."""
    v = np.asarray(v, dtype=float)
    return geom[:, None] * v if v.ndim == 2 else geom * v


def _face_row_entries(st: Stencil, co: SystemCoefficients, c: float, cross_terms: bool):
    """Energy couplings of the face momentum rows.

    Returns ``(face, col, val)`` with columns numbered in the reduced unknown
    vector [cell E | boundary E_b]. The pattern depends only on the stencil and
    ``cross_terms``; ``val`` carries a trailing group axis when the
    coefficients do.
    """
    C = st.C
    faces = np.arange(st.NF)
    comp = np.where(st.is_x, 0, 1)
    fi = faces[st.interior]
    h = st.h_normal[fi]
    up, lo = st.upper[fi], st.lower[fi]
    parts = [
        (fi, up, _times(c / h, co.f_nn_cell[up, comp[fi]])),
        (fi, lo, _times(-c / h, co.f_nn_cell[lo, comp[fi]])),
    ]
    # boundary half-cell: (f E)_upper - (f E)_lower over h/2
    fb = st.bfaces
    half = 0.5 * st.h_normal[fb]
    inner = np.where(st.upper[fb] >= 0, st.upper[fb], st.lower[fb])
    s_inner = np.where(st.upper[fb] >= 0, 1.0, -1.0)
    parts.append((fb, inner, _times(s_inner * c / half, co.f_nn_cell[inner, comp[fb]])))
    parts.append((fb, C + np.arange(st.NB), _times(-s_inner * c / half, co.f_nn_face[fb])))

    ecol, ecoef = st.face_energy_terms()
    ecol = np.where(ecol < C, ecol, ecol - st.NF)
    eta = np.asarray(co.eta, dtype=float)
    for k in range(2):
        parts.append((faces, ecol[:, k], _times(ecoef[:, k], eta)))

    if cross_terms:
        # tangential difference of f_xy*E between the two corners of each face
        a_next = np.where(st.t_next >= 0, 0.5, 0.0)
        a_prev = np.where(st.t_prev >= 0, -0.5, 0.0)
        a_self = np.where(st.t_next >= 0, 0.0, 0.5) + np.where(st.t_prev >= 0, 0.0, -0.5)
        scale = c / st.h_tangent
        f_xy = np.asarray(co.f_xy_face, dtype=float)
        for nb, a in ((st.t_next, a_next), (st.t_prev, a_prev), (faces, a_self)):
            use = (a != 0) & (nb >= 0)
            src = nb[use]
            for k in range(2):
                parts.append((faces[use], ecol[src, k],
                              _times(scale[use] * a[use] * ecoef[src, k], f_xy[src])))
    face = np.concatenate([p[0] for p in parts])
    col = np.concatenate([p[1] for p in parts])
    val = np.concatenate([p[2] for p in parts])
    return face, col, val


def _flux_incidence(st: Stencil):
    """Where face fluxes enter the cell and boundary rows: (row, face, coefficient)."""
    faces = np.arange(st.NF)
    has_lo, has_up = st.lower >= 0, st.upper >= 0
    div = 1.0 / st.h_normal
    # a face is the right/top face of its lower cell and the left/bottom face of its upper cell
    row = np.concatenate([st.lower[has_lo], st.upper[has_up], st.C + np.arange(st.NB)])
    face = np.concatenate([faces[has_lo], faces[has_up], st.bfaces])
    coef = np.concatenate([div[has_lo], -div[has_up], st.bsign])
    return row, face, coef


def assemble(st: Stencil, co: SystemCoefficients, dt: float, c: float, cross_terms: bool = True):
    """Sparse matrix and right-hand side of one LOQD system.

    Unknowns are ordered [cell E | face F | boundary E_b]. Rows: cell energy
    balance, face momentum, boundary closure F.n_out - c C_b E_b = -F_in.
    """
    C, NF, NB = st.C, st.NF, st.NB
    inv_dt = 0.0 if np.isinf(dt) else 1.0 / dt
    cells = np.arange(C)
    b = np.arange(NB)
    inc_row, inc_face, inc_coef = _flux_incidence(st)
    e_face, e_col, e_val = _face_row_entries(st, co, c, cross_terms)
    full = lambda col: np.where(col < C, col, col + NF)  # noqa: E731
    rows = [cells, full(inc_row), st.iF(np.arange(NF)), st.iF(e_face), st.iEb(b)]
    cols = [cells, st.iF(inc_face), st.iF(np.arange(NF)), full(e_col), st.iEb(b)]
    vals = [inv_dt + co.sigma, inc_coef, inv_dt / c + co.drag, e_val, -c * co.C_b]
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(st.N, st.N)
    )
    rhs = np.concatenate([inv_dt * co.E_prev + co.source, inv_dt / c * co.F_prev, -co.F_in])
    return A, rhs


def solve_system(A, rhs, dump_path=None):
    """Direct sparse LU solve of an assembled system, optionally writing it as Matrix Market."""
    if dump_path is not None:
        scipy.io.mmwrite(dump_path, A)
    try:
        x = spla.splu(A.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"LOQD matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("LOQD solve produced non-finite values")
    return x


REFINE_TOL = 1e-15
# a stalled refinement is still accepted at this backward error (about 64 ulp)
REFINE_ACCEPT = 64 * np.finfo(float).eps
REFINE_MAX = 8
# fill orderings tried in turn when refinement stalls on a fresh factorization
ORDERINGS = ("MMD_AT_PLUS_A", "COLAMD")


class CondensedSolver:
    """LOQD solves with the face fluxes eliminated, batched over groups.

    A face flux appears only on the diagonal of its own momentum row, so
    F_f = (r_f - sum_j a_fj x_j) / d_f exactly. Substituting into the cell
    and boundary rows leaves a system in the energies alone. Its sparsity
    pattern is built once per stencil. LU factors are cached per slot and
    reused, through iterative refinement, while they still converge; a
    factor that stalls is recomputed.
    """

    def __init__(self, st: Stencil, cross_terms: bool = True):
        self.st = st
        self.cross_terms = cross_terms
        ne = st.C + st.NB
        self.ne = ne
        ones = SystemCoefficients(
            sigma=np.ones(st.C), source=np.zeros(st.C), E_prev=np.zeros(st.C),
            f_nn_cell=np.ones((st.C, 2)), drag=np.ones(st.NF), eta=np.ones(st.NF),
            F_prev=np.zeros(st.NF), f_xy_face=np.ones(st.NF), f_nn_face=np.ones(st.NF),
            C_b=np.ones(st.NB), F_in=np.zeros(st.NB),
        )
        e_face, e_col, _ = _face_row_entries(st, ones, 1.0, cross_terms)
        self.e_face, self.e_col = e_face, e_col
        inc_row, inc_face, inc_coef = _flux_incidence(st)
        self.inc_face, self.inc_coef = inc_face, inc_coef

        # every (incidence, entry) pair sharing a face contributes to S
        order = np.argsort(e_face, kind="stable")
        counts = np.bincount(e_face, minlength=st.NF)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        n_k = counts[inc_face]
        pair_inc = np.repeat(np.arange(inc_face.size), n_k)
        within = np.arange(pair_inc.size) - np.repeat(np.cumsum(n_k) - n_k, n_k)
        pair_ent = order[starts[inc_face[pair_inc]] + within]
        self.pair_inc, self.pair_ent = pair_inc, pair_ent

        rows = np.concatenate([inc_row[pair_inc], np.arange(ne)])
        cols = np.concatenate([e_col[pair_ent], np.arange(ne)])
        keys, target = np.unique(cols * ne + rows, return_inverse=True)
        n_contrib = rows.size
        self.gather = sp.csr_matrix((np.ones(n_contrib), (target, np.arange(n_contrib))),
                                    shape=(keys.size, n_contrib))
        self.indices = (keys % ne).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(keys // ne, minlength=ne))]
                                     ).astype(np.int32)
        self.inc_matrix = sp.csr_matrix((inc_coef, (inc_row, np.arange(inc_row.size))),
                                        shape=(ne, inc_row.size))
        self.face_sum = sp.csr_matrix((np.ones(e_face.size), (e_face, np.arange(e_face.size))),
                                      shape=(st.NF, e_face.size))
        self._factors = {}
        self.n_factorizations = 0

    def reset(self) -> None:
        """Drop cached factorizations so later solves do not depend on history."""
        self._factors.clear()

    def solve(self, co: SystemCoefficients, dt: float, c: float, slots):
        """Solve one system per slot; coefficient arrays carry a trailing slot axis.

        Returns ``(E, F, E_b)`` shaped (cells, n), (faces, n), (boundary, n).
        """
        st = self.st
        inv_dt = 0.0 if np.isinf(dt) else 1.0 / dt
        n = len(slots)

        def col2(v, size):
            v = np.asarray(v, dtype=float)
            return np.broadcast_to(v.reshape(size, -1), (size, n))

        _, _, e_val = _face_row_entries(st, co, c, self.cross_terms)
        e_val = col2(e_val, self.e_face.size)
        d = inv_dt / c + col2(co.drag, st.NF)
        if np.any(d == 0):
            raise SolverError("face momentum rows have a zero diagonal")
        scaled = e_val / d[self.e_face]
        pair = -self.inc_coef[self.pair_inc, None] * scaled[self.pair_ent]
        diag = np.concatenate([inv_dt + col2(co.sigma, st.C), -c * col2(co.C_b, st.NB)])
        data = self.gather @ np.concatenate([pair, diag])

        r_face = inv_dt / c * col2(co.F_prev, st.NF)
        rhs = np.concatenate([inv_dt * col2(co.E_prev, st.C) + col2(co.source, st.C),
                              -col2(co.F_in, st.NB)])
        rhs = rhs - self.inc_matrix @ (r_face / d)[self.inc_face]

        x = np.empty((self.ne, n))
        for j, slot in enumerate(slots):
            S = sp.csc_matrix((data[:, j], self.indices, self.indptr), shape=(self.ne, self.ne))
            x[:, j] = self._solve_slot(slot, S, rhs[:, j])
        if not np.all(np.isfinite(x)):
            raise SolverError("LOQD solve produced non-finite values")
        F = (r_face - self.face_sum @ (e_val * x[self.e_col])) / d
        return x[:st.C], F, x[st.C:]

    def _factor(self, slot, S, ordering):
        try:
            lu = spla.splu(S, permc_spec=ordering)
        except RuntimeError as exc:
            raise SolverError(f"LOQD matrix is singular: {exc}") from exc
        self._factors[slot] = lu
        self.n_factorizations += 1
        return lu

    def _solve_slot(self, slot, S, b):
        lu = self._factors.get(slot)
        if lu is not None:
            x, ok = _refine(lu, S, b)
            if ok:
                return x
        best, best_eta = None, np.inf
        for ordering in ORDERINGS:
            x, ok = _refine(self._factor(slot, S, ordering), S, b)
            if ok:
                return x
            eta = normwise_backward_error(S, x, b)
            if eta < best_eta:
                best, best_eta = x, eta
        # Componentwise accuracy can be out of reach in rows whose unknowns are
        # tens of orders below the rest; the normwise error is the fallback.
        if best_eta <= REFINE_ACCEPT:
            log.debug("slot %s: componentwise refinement stalled, normwise error %.2e",
                      slot, best_eta)
            return best
        raise SolverError(f"iterative refinement stalled (normwise backward error {best_eta:.2e})")


def normwise_backward_error(S, x, b) -> float:
    """||b - Sx|| / (||S|| ||x|| + ||b||) in the infinity norm."""
    r = b - S @ x
    norm_S = abs(S).sum(axis=1).max()
    denom = norm_S * np.abs(x).max() + np.abs(b).max()
    return float(np.abs(r).max() / denom) if denom > 0 else 0.0


def _refine(lu, S, b):
    """Iterative refinement to a componentwise backward error of REFINE_TOL.

    Returns ``(x, converged)``. Once the error stops halving, the best iterate
    is kept and counts as converged if it is within REFINE_ACCEPT (round-off
    in the residual itself).
    """
    abs_S = abs(S)
    x = lu.solve(b)
    best, best_omega = x, np.inf
    for _ in range(REFINE_MAX):
        r = b - S @ x
        scale = abs_S @ np.abs(x) + np.abs(b)
        omega = np.max(np.abs(r) / np.where(scale > 0, scale, 1.0))
        if omega <= REFINE_TOL:
            return x, True
        if omega > 0.5 * best_omega:
            break
        best, best_omega = x, omega
        x = x + lu.solve(r)
    if omega < best_omega:
        best, best_omega = x, omega
    return best, best_omega <= REFINE_ACCEPT


def split(st: Stencil, x):
    C, NF = st.C, st.NF
    return x[:C], x[C:C + NF], x[C + NF:]


@dataclass
class MultigroupFields:
    E: np.ndarray  # (cells, G)
    F: np.ndarray  # (faces, G)
    E_b: np.ndarray  # (boundary faces, G)


@dataclass
class LowOrderClosures:
    """Transport-derived closures for every group."""

    f_cell: np.ndarray  # (cells, G, 2) f_xx, f_yy
    f_xy_face: np.ndarray  # (faces, G)
    f_nn_face: np.ndarray  # (faces, G)
    C_b: np.ndarray  # (boundary faces, G)
    F_in: np.ndarray  # (boundary faces, G)

    @classmethod
    def from_tallies(cls, st: Stencil, tallies, bmom) -> "LowOrderClosures":
        f_face = tallies.f_face
        f_nn = np.where(st.is_x[:, None], f_face[..., 0], f_face[..., 1])
        if not np.array_equal(bmom.faces, st.bfaces):
            raise ValueError("boundary face ordering mismatch")
        return cls(tallies.f_cell[..., :2].copy(), f_face[..., 2].copy(), f_nn, bmom.C_b.copy(),
                   bmom.F_in.copy())

    @classmethod
    def isotropic(cls, st: Stencil, G: int, C_b: float = 0.5, F_in=None) -> "LowOrderClosures":
        F_in = np.zeros((st.NB, G)) if F_in is None else np.broadcast_to(F_in, (st.NB, G)).copy()
        return cls(np.full((st.C, G, 2), ISO), np.zeros((st.NF, G)), np.full((st.NF, G), ISO),
                   np.full((st.NB, G), C_b), F_in)


def face_opacity(st: Stencil, kappa_cell):
    """Arithmetic mean of adjacent cell opacities; the cell value on boundary faces."""
    lo, up = st.lower, st.upper
    lo_v = kappa_cell[np.where(lo >= 0, lo, up)]
    up_v = kappa_cell[np.where(up >= 0, up, lo)]
    return 0.5 * (lo_v + up_v)


def solve_multigroup(st: Stencil, closures: LowOrderClosures, kappa, planck, prev: MultigroupFields,
                     dt: float, c: float, cross_terms: bool = True,
                     solver: CondensedSolver | None = None) -> MultigroupFields:
    """Solve every group's LOQD system with fixed closures, opacities and emission."""
    G = kappa.shape[1]
    if solver is None:
        solver = CondensedSolver(st, cross_terms)
    co = SystemCoefficients(
        sigma=c * kappa,
        source=4 * np.pi * kappa * planck,
        E_prev=prev.E,
        f_nn_cell=closures.f_cell.transpose(0, 2, 1),
        drag=face_opacity(st, kappa),
        eta=np.zeros((st.NF, G)),
        F_prev=prev.F,
        f_xy_face=closures.f_xy_face,
        f_nn_face=closures.f_nn_face,
        C_b=closures.C_b,
        F_in=closures.F_in,
    )
    E, F, E_b = solver.solve(co, dt, c, [("group", g) for g in range(G)])
    return MultigroupFields(E, F, E_b)


def weighted_mean(u, w, fallback_w=None):
    """sum_g u_g w_g / sum_g w_g along the last axis, with fallback weights where sum w = 0."""
    # rescale so subnormal spectra (cold cells) keep full precision
    peak = np.abs(w).max(axis=-1, keepdims=True)
    w = w / np.where(peak > 0, peak, 1.0)
    tot = w.sum(axis=-1)
    ok = tot > 0
    out = np.empty(tot.shape)
    out[ok] = (u[ok] * w[ok]).sum(-1) / tot[ok]
    if np.any(~ok):
        if fallback_w is None:
            out[~ok] = u[~ok].mean(-1)
        else:
            fw = np.broadcast_to(fallback_w, w.shape)[~ok]
            ft = fw.sum(-1)
            out[~ok] = np.where(ft > 0, (u[~ok] * fw).sum(-1) / np.where(ft > 0, ft, 1.0),
                                u[~ok].mean(-1))
    return out


@dataclass
class GreyClosures:
    kappa_E: np.ndarray  # cells
    kappa_B: np.ndarray  # cells
    f_cell: np.ndarray  # (cells, 2)
    f_xy_face: np.ndarray  # faces
    f_nn_face: np.ndarray  # faces
    K_R: np.ndarray  # faces, normal component of the flux-weighted opacity
    eta: np.ndarray  # faces, normal component
    C_b: np.ndarray
    F_in: np.ndarray
    spectrum: np.ndarray | None = None  # (cells, G) multigroup E_g
    local_part: np.ndarray | None = None  # (cells, G) local_equilibrium_part at the closure temperature


def local_equilibrium_part(kappa, planck, dt, c):
    """Group energy density a cell would hold from its own emission alone.

    Balancing 4 pi kappa_g B_g against (c kappa_g + 1/dt) E_g; in optically
    thick cells this is the bulk of E_g and carries its temperature dependence.
    """
    inv_dt = 0.0 if np.isinf(dt) else 1.0 / dt
    return 4 * np.pi * kappa * planck / (c * kappa + inv_dt)


def compute_grey_closures(st: Stencil, mg: MultigroupFields, kappa, planck,
                          closures: LowOrderClosures, dt: float | None = None,
                          c: float | None = None) -> GreyClosures:
    """Spectrum-averaged coefficients from the multigroup solution."""
    E = mg.E
    kappa_E = weighted_mean(kappa, E, fallback_w=planck)
    kappa_B = weighted_mean(kappa, planck)
    f_cell = np.stack([weighted_mean(closures.f_cell[..., a], E, fallback_w=planck) for a in (0, 1)],
                      axis=-1)
    E_face = st.face_energy(E, mg.E_b)
    inner = np.where(st.upper[st.bfaces] >= 0, st.upper[st.bfaces], st.lower[st.bfaces])
    planck_face = st.face_energy(planck, planck[inner])
    f_xy = weighted_mean(closures.f_xy_face, E_face, fallback_w=planck_face)
    f_nn = weighted_mean(closures.f_nn_face, E_face, fallback_w=planck_face)
    kf = face_opacity(st, kappa)
    K_R = weighted_mean(kf, np.abs(mg.F), fallback_w=E_face)
    tot_E = E_face.sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = ((kf - K_R[:, None]) * mg.F).sum(-1) / tot_E
    eta = np.where(tot_E > 0, eta, 0.0)
    C_b = weighted_mean(closures.C_b, mg.E_b)
    local = None if dt is None else local_equilibrium_part(kappa, planck, dt, c)
    return GreyClosures(kappa_E, kappa_B, f_cell, f_xy, f_nn, K_R, eta, C_b, closures.F_in.sum(-1),
                        E, local)


@dataclass
class GreyFields:
    E: np.ndarray
    F: np.ndarray
    E_b: np.ndarray
    T: np.ndarray


@dataclass
class GreyResult:
    fields: GreyFields
    iterations: int
    exchange: np.ndarray  # linearized absorption - emission of the final iterate (energy/cm^3/ns)


@dataclass
class Exchange:
    """Linearized radiation-matter exchange about T*.

    absorption - emission ~= c*kappa_E*E - emission(T*) - beta*(T - T*)
    """

    kappa_E: np.ndarray
    emission: np.ndarray
    beta: np.ndarray


def frozen_exchange(gc: GreyClosures, T_star, c, a_r) -> Exchange:
    """Exchange with spectrum-averaged opacities held fixed: only T^4 is linearized."""
    emission = c * gc.kappa_B * a_r * T_star**4
    return Exchange(gc.kappa_E, emission, 4.0 * emission / T_star)


def material_exchange(gc: GreyClosures, T_star, E_star, material, dt, c,
                      rel_step=1e-7) -> Exchange:
    """Exchange with group opacities and spectrum re-evaluated at T*.

    ``material(T)`` returns group opacities and Planck intensities. The
    absorption spectrum is the multigroup E_g with its local equilibrium part
    moved to T*, so it equals E_g at the closure temperature. The temperature
    derivative of the rates is taken by a forward difference.
    """

    def rates(T):
        kappa, planck = material(T)
        if gc.local_part is None:
            w = gc.spectrum
        else:
            w = gc.spectrum - gc.local_part + local_equilibrium_part(kappa, planck, dt, c)
        return weighted_mean(kappa, w, fallback_w=planck), 4 * np.pi * (kappa * planck).sum(-1)

    kE, em = rates(T_star)
    dT = rel_step * T_star
    kE2, em2 = rates(T_star + dT)
    beta = (em2 - em) / dT - c * (kE2 - kE) / dT * E_star
    # keep the linearized sink monotone in T
    beta = np.maximum(beta, 0.0)
    return Exchange(kE, em, beta)


def meb_linearization(ex: Exchange, T_star, T_prev, dt, c, c_v):
    """Effective absorption, source and temperature update of one Newton step.

    Eliminating T from the material balance
    c_v (T - T_prev)/dt = c kE E - em* - beta (T - T*)
    leaves the cell balance with absorption ``sigma*E`` and emission ``source``.
    Returns ``(sigma, source, update)`` with ``update(E) -> (T, exchange)``.
    """
    inv_dt = 0.0 if np.isinf(dt) else 1.0 / dt
    beta = ex.beta
    d = c_v * inv_dt + beta
    A = c_v * inv_dt * T_prev - ex.emission + beta * T_star
    ck = c * ex.kappa_E
    sigma = ck * (c_v * inv_dt) / d
    source = ex.emission - beta * T_star + beta * A / d

    def update(E):
        T = (A + ck * E) / d
        return T, ck * E - ex.emission - beta * (T - T_star)

    return sigma, source, update


def solve_grey_meb(st: Stencil, gc: GreyClosures, T_prev, T_guess, prev: GreyFields, dt: float,
                   c: float, a_r: float, c_v: float, tol: float, cross_terms: bool = True,
                   max_iter: int = 100, material=None, E_guess=None,
                   solver: CondensedSolver | None = None) -> GreyResult:
    """Newton iteration on temperature for the grey LOQD + material energy balance.

    With ``material`` given, group opacities follow the temperature iterate
    (see ``material_exchange``); otherwise the closures' Planck and
    energy-weighted means stay fixed and only T^4 is linearized.
    """
    if solver is None:
        solver = CondensedSolver(st, cross_terms)
    T_star = np.array(T_guess, dtype=float)
    E_star = prev.E if E_guess is None else E_guess
    for it in range(1, max_iter + 1):
        if material is None:
            ex = frozen_exchange(gc, T_star, c, a_r)
        else:
            ex = material_exchange(gc, T_star, E_star, material, dt, c)
        sigma, source, update = meb_linearization(ex, T_star, T_prev, dt, c, c_v)
        co = SystemCoefficients(
            sigma=sigma, source=source, E_prev=prev.E, f_nn_cell=gc.f_cell, drag=gc.K_R,
            eta=gc.eta, F_prev=prev.F, f_xy_face=gc.f_xy_face, f_nn_face=gc.f_nn_face,
            C_b=gc.C_b, F_in=gc.F_in,
        )
        E, F, E_b = (a[:, 0] for a in solver.solve(co, dt, c, ["grey"]))
        T_new, exchange = update(E)
        step = T_new - T_star
        n_halve = 0
        while np.any(T_star + step <= 0):
            bad = T_star + step <= 0
            step[bad] *= 0.5
            n_halve += 1
            if n_halve > 60:
                raise NewtonError("temperature iterate cannot be kept positive")
        if n_halve:
            log.warning("grey Newton step damped %d times", n_halve)
            T_new = T_star + step
        change = np.max(np.abs(step) / T_new)
        if change < max(tol, NEWTON_FLOOR) and n_halve == 0:
            return GreyResult(GreyFields(E, F, E_b, T_new), it, exchange)
        T_star, E_star = T_new, E
    worst = int(np.argmax(np.abs(step) / T_new))
    raise NewtonError(
        f"grey Newton did not converge in {max_iter} iterations; cell {worst}: "
        f"T={T_new[worst]:.6e}, dT={step[worst]:.3e}"
    )
