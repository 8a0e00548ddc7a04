"""Mesh-refinement studies: run a ladder of material or characteristic grid widths.

One width is held fixed while the other is halved down the ladder. Solutions
at the final time are compared between consecutive rungs,

    |dy_h| = |y_h - y_2h|,   rho_h = |dy_2h| / |dy_h|,

with a volume-weighted discrete L2 norm over material cells. For material-grid
ladders the finer solution is first averaged onto the coarser grid.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .driver import FieldState, IterationRecord, Problem, Simulation
from .mesh import MaterialGrid

log = logging.getLogger(__name__)

CSV_COLUMNS = ("h", "ratio", "norm_dT", "rho_T", "norm_dE", "rho_E", "rel_dT", "rel_dE")


@dataclass(frozen=True)
class RefinementLadder:
    """Widths for the varied parameter, each half the previous one."""

    varied: str  # "h_mat" or "h_moc"
    values: tuple
    fixed_value: float
    problem: Problem

    def __post_init__(self):
        if self.varied not in ("h_mat", "h_moc"):
            raise ValueError("varied must be 'h_mat' or 'h_moc'")
        v = np.asarray(self.values, dtype=float)
        if v.size < 2:
            raise ValueError("a ladder needs at least two values")
        if np.any(v <= 0) or self.fixed_value <= 0:
            raise ValueError("mesh widths must be positive")
        if not np.allclose(v[:-1] / v[1:], 2.0, rtol=1e-12, atol=0.0):
            raise ValueError("consecutive ladder values must halve exactly")
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    @property
    def fixed(self) -> str:
        return "h_moc" if self.varied == "h_mat" else "h_mat"

    def widths(self, h: float) -> tuple[float, float]:
        """(h_mat, h_moc) for one rung."""
        return (h, self.fixed_value) if self.varied == "h_mat" else (self.fixed_value, h)

    def problem_for(self, h: float) -> Problem:
        h_mat, h_moc = self.widths(h)
        g = self.problem.grid
        return replace(self.problem, grid=MaterialGrid.uniform(g.lx, g.ly, h_mat), h_moc=h_moc)


@dataclass(frozen=True)
class StudyRow:
    h: float
    ratio: float  # h_mat / h_moc
    norm_dT: float
    rho_T: float | None
    norm_dE: float
    rho_E: float | None
    rel_dT: float
    rel_dE: float

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [fmt(getattr(self, name)) for name in CSV_COLUMNS]


@dataclass
class LadderRun:
    h: float
    grid: MaterialGrid
    state: FieldState
    records: list[IterationRecord] = field(default_factory=list)


@dataclass
class StudyResult:
    ladder: RefinementLadder
    runs: list[LadderRun]
    rows: list[StudyRow]


def restrict_to_coarse(fine: np.ndarray, fine_grid: MaterialGrid,
                       coarse_grid: MaterialGrid) -> np.ndarray:
    """Average a cell field onto the grid with twice the cell width in each direction."""
    nested = (
        fine_grid.nx == 2 * coarse_grid.nx and fine_grid.ny == 2 * coarse_grid.ny
        and np.isclose(fine_grid.lx, coarse_grid.lx) and np.isclose(fine_grid.ly, coarse_grid.ly)
    )
    if not nested:
        raise ValueError(
            f"grids are not nested: fine {fine_grid.nx}x{fine_grid.ny} on "
            f"{fine_grid.lx}x{fine_grid.ly}, coarse {coarse_grid.nx}x{coarse_grid.ny} on "
            f"{coarse_grid.lx}x{coarse_grid.ly}")
    fine = np.asarray(fine, dtype=float)
    if fine.shape[0] != fine_grid.n_cells:
        raise ValueError("field does not match the fine grid")
    blocks = fine.reshape((coarse_grid.ny, 2, coarse_grid.nx, 2) + fine.shape[1:])
    return blocks.mean(axis=(1, 3)).reshape((coarse_grid.n_cells,) + fine.shape[1:])


def l2_norm(y, volume) -> float:
    """sqrt(sum_i V_i y_i^2)."""
    y = np.asarray(y, dtype=float)
    return float(np.sqrt(np.sum(np.broadcast_to(volume, y.shape) * y**2)))


def diff_norms(y_h, y_2h, volume) -> tuple[float, float]:
    """Absolute and relative L2 differences of two fields on a common grid."""
    y_h = np.asarray(y_h, dtype=float)
    y_2h = np.asarray(y_2h, dtype=float)
    if y_h.shape != y_2h.shape:
        raise ValueError(f"field shapes differ: {y_h.shape} vs {y_2h.shape}")
    d = l2_norm(y_h - y_2h, volume)
    ref = l2_norm(y_h, volume)
    return d, (d / ref if ref > 0 else 0.0)


def convergence_rates(norms) -> list[float | None]:
    """rho_h = |d_2h| / |d_h| for each row after the first."""
    out: list[float | None] = [None]
    for prev, cur in zip(norms[:-1], norms[1:]):
        out.append(prev / cur if cur > 0 else float("inf"))
    return out


def compare_runs(ladder: RefinementLadder, runs: list[LadderRun]) -> list[StudyRow]:
    """Table rows from consecutive ladder solutions."""
    diffs = []
    for coarse, fine in zip(runs[:-1], runs[1:]):
        T_f, E_f = fine.state.T, fine.state.grey.E
        if ladder.varied == "h_mat":
            T_f = restrict_to_coarse(T_f, fine.grid, coarse.grid)
            E_f = restrict_to_coarse(E_f, fine.grid, coarse.grid)
        V = coarse.grid.cell_volume
        diffs.append((fine, diff_norms(T_f, coarse.state.T, V), diff_norms(E_f, coarse.state.grey.E, V)))
    rho_T = convergence_rates([d[1][0] for d in diffs])
    rho_E = convergence_rates([d[2][0] for d in diffs])
    rows = []
    for (run, (dT, rT), (dE, rE)), pT, pE in zip(diffs, rho_T, rho_E):
        h_mat, h_moc = ladder.widths(run.h)
        rows.append(StudyRow(run.h, h_mat / h_moc, dT, pT, dE, pE, rT, rE))
    return rows


def write_study_csv(path, rows: list[StudyRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def run_ladder(ladder: RefinementLadder, csv_path=None,
               simulate: Callable[[Problem], tuple[FieldState, list]] | None = None) -> StudyResult:
    """Run every rung to the final time and tabulate differences.

    If a rung fails, the rows available so far are written before the error
    propagates.
    """
    simulate = simulate or _simulate
    runs: list[LadderRun] = []
    try:
        for h in ladder.values:
            problem = ladder.problem_for(h)
            log.info("ladder %s=%g (%s=%g)", ladder.varied, h, ladder.fixed, ladder.fixed_value)
            state, records = simulate(problem)
            runs.append(LadderRun(h, problem.grid, state, records))
    finally:
        if csv_path is not None and len(runs) >= 2:
            write_study_csv(Path(csv_path), compare_runs(ladder, runs))
    rows = compare_runs(ladder, runs)
    return StudyResult(ladder, runs, rows)


def _simulate(problem: Problem):
    return Simulation(problem).run()
