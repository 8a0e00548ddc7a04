"""Material grid and characteristic (ray) grids traced over it.

Face numbering: x-faces (normal along x) come first, indexed
``iy * (nx + 1) + ix`` for ``ix = 0..nx``; y-faces follow, indexed
``n_xfaces + iy * nx + ix`` for ``iy = 0..ny``. Cells are ``iy * nx + ix``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .quadrature import AngularQuadrature


class DegenerateDirectionError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialGrid:
    lx: float
    ly: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or not (self.lx > 0 and self.ly > 0):
            raise ValueError("grid needs positive extents and at least one cell per axis")

    @classmethod
    def uniform(cls, lx: float, ly: float, h: float) -> "MaterialGrid":
        nx, ny = round(lx / h), round(ly / h)
        if nx < 1 or ny < 1 or abs(nx * h - lx) > 1e-9 * lx or abs(ny * h - ly) > 1e-9 * ly:
            raise ValueError(f"h_mat={h} must divide the domain extents ({lx}, {ly})")
        return cls(lx, ly, nx, ny)

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy

    @property
    def n_xfaces(self) -> int:
        return (self.nx + 1) * self.ny

    @property
    def n_yfaces(self) -> int:
        return self.nx * (self.ny + 1)

    @property
    def n_faces(self) -> int:
        return self.n_xfaces + self.n_yfaces

    def xface(self, ix, iy):
        return iy * (self.nx + 1) + ix

    def yface(self, ix, iy):
        return self.n_xfaces + iy * self.nx + ix

    def face_lengths(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_xfaces, self.dy), np.full(self.n_yfaces, self.dx)])

    def face_normals(self) -> np.ndarray:
        """Unit normals (+x for x-faces, +y for y-faces), shape (n_faces, 2)."""
        n = np.zeros((self.n_faces, 2))
        n[: self.n_xfaces, 0] = 1.0
        n[self.n_xfaces :, 1] = 1.0
        return n

    def face_cells(self):
        """(lower, upper) adjacent cell for every face, -1 outside the domain."""
        nx, ny = self.nx, self.ny
        ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="xy")
        xl = np.where(ix > 0, iy * nx + ix - 1, -1).ravel()
        xu = np.where(ix < nx, iy * nx + ix, -1).ravel()
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="xy")
        yl = np.where(iy > 0, (iy - 1) * nx + ix, -1).ravel()
        yu = np.where(iy < ny, iy * nx + ix, -1).ravel()
        return np.concatenate([xl, yl]), np.concatenate([xu, yu])

    def boundary_faces(self) -> dict:
        """Face ids on each side, ordered along the side."""
        nx, ny = self.nx, self.ny
        iy, ix = np.arange(ny), np.arange(nx)
        return {
            "left": self.xface(0, iy),
            "right": self.xface(nx, iy),
            "bottom": self.yface(ix, 0),
            "top": self.yface(ix, ny),
        }

    def cell_centers(self):
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(x, y, indexing="xy")
        return X.ravel(), Y.ravel()


@dataclass
class DirectionRays:
    """Rays of one direction, segments stored in CSR form.

    Ray ``k`` owns segments ``seg_ptr[k]:seg_ptr[k+1]`` and face crossings
    ``seg_ptr[k] + k : seg_ptr[k+1] + k + 1`` (one more crossing than segments;
    the first is the entry face on the boundary, the last the exit face).
    """

    direction: np.ndarray
    widths: np.ndarray
    offsets: np.ndarray
    seg_ptr: np.ndarray
    seg_cell: np.ndarray
    seg_len: np.ndarray
    cross_face: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.widths.size

    @property
    def n_segments(self) -> int:
        return self.seg_cell.size

    def segments_of(self, k: int):
        sl = slice(self.seg_ptr[k], self.seg_ptr[k + 1])
        return self.seg_cell[sl], self.seg_len[sl]

    def crossings_of(self, k: int):
        return self.cross_face[self.seg_ptr[k] + k : self.seg_ptr[k + 1] + k + 1]


def _strip_offsets(grid: MaterialGrid, wx: float, wy: float):
    """Breakpoints of vertex projections on the axis perpendicular to (wx, wy)."""
    xs = np.arange(grid.nx + 1) * grid.dx
    ys = np.arange(grid.ny + 1) * grid.dy
    proj = (-wy * xs[:, None] + wx * ys[None, :]).ravel()
    proj.sort()
    tol = 1e-12 * min(grid.dx, grid.dy)
    keep = np.concatenate([[True], np.diff(proj) > tol])
    return proj[keep]


def _split_rays(breaks: np.ndarray, h_moc: float):
    lo, hi = breaks[:-1], breaks[1:]
    w = hi - lo
    n_split = np.where(w > h_moc, np.ceil(np.log2(w / h_moc) - 1e-12), 0).astype(int)
    # halving count must make every child <= h_moc
    while True:
        bad = w / 2.0**n_split > h_moc
        if not np.any(bad):
            break
        n_split[bad] += 1
    counts = 2**n_split
    parent = np.repeat(np.arange(w.size), counts)
    child = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cw = (w / counts)[parent]
    centers = lo[parent] + (child + 0.5) * cw
    return centers, cw


def trace_direction(grid: MaterialGrid, direction, h_moc: float) -> DirectionRays:
    """Build the rays of one direction.

    ``direction`` may be a 3D unit vector or an in-plane vector; only its
    normalized x-y projection is used.
    """
    if not h_moc > 0:
        raise ValueError("h_moc must be positive")
    d = np.asarray(direction, dtype=float)[:2]
    if abs(d[0]) <= 1e-12 or abs(d[1]) <= 1e-12:
        raise DegenerateDirectionError(f"direction {direction} is too close to a grid axis")
    d = d / np.hypot(d[0], d[1])
    sx, sy = np.sign(d[0]), np.sign(d[1])
    # trace in the reflected frame where both components are positive
    wx, wy = abs(d[0]), abs(d[1])
    breaks = _strip_offsets(grid, wx, wy)
    offsets, widths = _split_rays(breaks, h_moc)

    # ray: r(u) = s*p + u*w with p = (-wy, wx)
    base_x, base_y = -wy * offsets, wx * offsets
    xs = np.arange(grid.nx + 1) * grid.dx
    ys = np.arange(grid.ny + 1) * grid.dy
    u_x = (xs[None, :] - base_x[:, None]) / wx
    y_at = base_y[:, None] + u_x * wy
    u_y = (ys[None, :] - base_y[:, None]) / wy
    x_at = base_x[:, None] + u_y * wx
    valid_x = (y_at > 0) & (y_at < grid.ly)
    valid_y = (x_at > 0) & (x_at < grid.lx)
    # x-line i crossing at row floor(y/dy): x-face (i, row)
    row = np.clip(np.floor(y_at / grid.dy).astype(int), 0, grid.ny - 1)
    face_x = row * (grid.nx + 1) + np.arange(grid.nx + 1)[None, :]
    col = np.clip(np.floor(x_at / grid.dx).astype(int), 0, grid.nx - 1)
    face_y = grid.n_xfaces + np.arange(grid.ny + 1)[None, :] * grid.nx + col

    u_all = np.concatenate([np.where(valid_x, u_x, np.inf), np.where(valid_y, u_y, np.inf)], axis=1)
    f_all = np.concatenate([face_x, face_y], axis=1)
    order = np.argsort(u_all, axis=1, kind="stable")
    u_all = np.take_along_axis(u_all, order, axis=1)
    f_all = np.take_along_axis(f_all, order, axis=1)
    n_cross = np.isfinite(u_all).sum(axis=1)
    if np.any(n_cross < 2):
        raise RuntimeError("ray does not cross the domain; vertex projection is inconsistent")

    mask = np.isfinite(u_all)
    seg_mask = mask[:, 1:]
    lengths = np.diff(np.where(mask, u_all, 0.0), axis=1)[seg_mask]
    mid = np.where(seg_mask, 0.5 * (u_all[:, :-1] + u_all[:, 1:]), 0.0)
    mx = base_x[:, None] + mid * wx
    my = base_y[:, None] + mid * wy
    cix = np.clip(np.floor(mx / grid.dx).astype(int), 0, grid.nx - 1)
    ciy = np.clip(np.floor(my / grid.dy).astype(int), 0, grid.ny - 1)
    cells = (ciy * grid.nx + cix)[seg_mask]
    faces = f_all[mask]
    seg_ptr = np.concatenate([[0], np.cumsum(n_cross - 1)])

    if sx < 0 or sy < 0:
        cells, faces = _reflect(grid, cells, faces, sx < 0, sy < 0)
    if np.any(lengths <= 0):
        raise RuntimeError("zero-length segment produced; ray passes through a vertex")
    return DirectionRays(
        direction=np.array([d[0], d[1]]),
        widths=widths,
        offsets=offsets,
        seg_ptr=seg_ptr.astype(np.int64),
        seg_cell=cells.astype(np.int64),
        seg_len=lengths,
        cross_face=faces.astype(np.int64),
    )


def _reflect(grid: MaterialGrid, cells, faces, flip_x: bool, flip_y: bool):
    nx, ny = grid.nx, grid.ny
    ix, iy = cells % nx, cells // nx
    if flip_x:
        ix = nx - 1 - ix
    if flip_y:
        iy = ny - 1 - iy
    cells = iy * nx + ix

    faces = faces.copy()
    isx = faces < grid.n_xfaces
    fx = faces[isx]
    fix, fiy = fx % (nx + 1), fx // (nx + 1)
    if flip_x:
        fix = nx - fix
    if flip_y:
        fiy = ny - 1 - fiy
    faces[isx] = fiy * (nx + 1) + fix
    fy = faces[~isx] - grid.n_xfaces
    gix, giy = fy % nx, fy // nx
    if flip_x:
        gix = nx - 1 - gix
    if flip_y:
        giy = ny - giy
    faces[~isx] = grid.n_xfaces + giy * nx + gix
    return cells, faces


@dataclass
class CharacteristicGrid:
    """Rays for every direction of a quadrature, flattened for the sweep kernel."""

    grid: MaterialGrid
    quadrature: AngularQuadrature
    h_moc: float
    directions: list = field(default_factory=list)

    def __post_init__(self):
        if not self.directions:
            self.directions = [
                trace_direction(self.grid, om, self.h_moc) for om in self.quadrature.omega
            ]
        self._flatten()

    def _flatten(self):
        rays_per_dir = np.array([d.n_rays for d in self.directions])
        segs_per_dir = np.array([d.n_segments for d in self.directions])
        self.dir_ray_ptr = np.concatenate([[0], np.cumsum(rays_per_dir)]).astype(np.int64)
        self.widths = np.concatenate([d.widths for d in self.directions])
        seg_ptr, cross_ptr = [], []
        seg_base = 0
        cross_base = 0
        for d in self.directions:
            seg_ptr.append(d.seg_ptr[:-1] + seg_base)
            cross_ptr.append(d.seg_ptr[:-1] + np.arange(d.n_rays) + cross_base)
            seg_base += d.n_segments
            cross_base += d.n_segments + d.n_rays
        self.seg_ptr = np.concatenate(seg_ptr + [[seg_base]]).astype(np.int64)
        self.cross_ptr = np.concatenate(cross_ptr + [[cross_base]]).astype(np.int64)
        self.seg_cell = np.concatenate([d.seg_cell for d in self.directions])
        self.seg_len = np.concatenate([d.seg_len for d in self.directions])
        self.cross_face = np.concatenate([d.cross_face for d in self.directions])
        self.n_segments_per_dir = segs_per_dir

    @property
    def n_rays(self) -> int:
        return int(self.dir_ray_ptr[-1])

    @property
    def n_segments(self) -> int:
        return int(self.seg_ptr[-1])

    def face_projection(self) -> np.ndarray:
        """L_f |w_m . n_f| for every (direction, face), shape (M, n_faces)."""
        ip = np.array([d.direction for d in self.directions])
        return np.abs(ip @ self.grid.face_normals().T) * self.grid.face_lengths()[None, :]

    def cell_coverage(self) -> np.ndarray:
        """sum of l*w per (direction, cell); equals the cell area."""
        out = np.zeros((len(self.directions), self.grid.n_cells))
        for m, d in enumerate(self.directions):
            w = np.repeat(d.widths, np.diff(d.seg_ptr))
            np.add.at(out[m], d.seg_cell, d.seg_len * w)
        return out

    def face_coverage(self) -> np.ndarray:
        """sum of w over ray crossings per (direction, face)."""
        out = np.zeros((len(self.directions), self.grid.n_faces))
        for m, d in enumerate(self.directions):
            w = np.repeat(d.widths, np.diff(d.seg_ptr) + 1)
            np.add.at(out[m], d.cross_face, w)
        return out

    def write_csv(self, path) -> None:
        """Diagnostic dump of (m, k, s, cell, length, width) per segment."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["m", "k", "s", "cell", "length", "width"])
            for m, d in enumerate(self.directions):
                for k in range(d.n_rays):
                    cells, lens = d.segments_of(k)
                    for s, (c, ell) in enumerate(zip(cells, lens)):
                        writer.writerow([m, k, s, int(c), repr(float(ell)), repr(float(d.widths[k]))])


def build_characteristic_grids(grid: MaterialGrid, quad: AngularQuadrature, h_moc: float) -> CharacteristicGrid:
    return CharacteristicGrid(grid, quad, h_moc)
