"""Time stepping and the nested multilevel iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import loqd
from .mesh import CharacteristicGrid, MaterialGrid
from .physics import FrequencyGrid, MaterialEOS, OpacityModel, PhysicalConstants, group_emission
from .quadrature import AngularQuadrature, build_product_quadrature
from .transport import BoundarySpec, CellSource, boundary_intensity, boundary_partial_moments, sweep

log = logging.getLogger(__name__)

T_FLOOR = 1e-30
E_FLOOR = 1e-30


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeControls:
    dt: float = 0.02
    n_steps: int = 150

    def __post_init__(self):
        if not self.dt > 0 or self.n_steps < 0:
            raise ValueError("dt must be positive and n_steps nonnegative")

    @property
    def t_end(self) -> float:
        return self.dt * self.n_steps

    @classmethod
    def from_end(cls, dt: float, t_end: float) -> "TimeControls":
        """Controls reaching ``t_end`` in whole steps of ``dt``."""
        n = round(t_end / dt)
        if n < 0 or abs(n * dt - t_end) > 1e-9 * max(t_end, dt):
            raise ValueError(f"t_end={t_end} is not a whole number of steps dt={dt}")
        return cls(dt, n)


@dataclass(frozen=True)
class IterationControls:
    eps_outer: float = 1e-12
    eps_inner: float = 1e-12
    max_outer: int = 50
    max_inner: int = 100
    anderson_depth: int = 3

    def __post_init__(self):
        if not (0 < self.eps_inner <= self.eps_outer <= 1):
            raise ValueError("need 0 < eps_inner <= eps_outer <= 1")


@dataclass
class Problem:
    """Everything that defines a simulation apart from its state."""

    grid: MaterialGrid
    h_moc: float
    quadrature: AngularQuadrature = field(default_factory=lambda: build_product_quadrature(6, 6))
    groups: FrequencyGrid = field(default_factory=FrequencyGrid)
    opacity: OpacityModel = field(default_factory=OpacityModel)
    eos: MaterialEOS = field(default_factory=MaterialEOS)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    boundary: BoundarySpec = field(default_factory=lambda: BoundarySpec(left=1.0))
    T0: float = 1e-3
    time: TimeControls = field(default_factory=TimeControls)
    iteration: IterationControls = field(default_factory=IterationControls)
    cross_terms: bool = True
    check_tensors: bool = False


@dataclass
class FieldState:
    step: int
    time: float
    T: np.ndarray
    mg: loqd.MultigroupFields
    grey: loqd.GreyFields
    psi: np.ndarray  # (M, cells, G) cell-average intensities of the last sweep

    def copy(self) -> "FieldState":
        mg = loqd.MultigroupFields(self.mg.E.copy(), self.mg.F.copy(), self.mg.E_b.copy())
        grey = loqd.GreyFields(self.grey.E.copy(), self.grey.F.copy(), self.grey.E_b.copy(),
                               self.grey.T.copy())
        return FieldState(self.step, self.time, self.T.copy(), mg, grey, self.psi.copy())

    def save(self, path) -> None:
        np.savez(path, step=self.step, time=self.time, T=self.T, mg_E=self.mg.E, mg_F=self.mg.F,
                 mg_Eb=self.mg.E_b, E=self.grey.E, F=self.grey.F, Eb=self.grey.E_b, psi=self.psi)

    @classmethod
    def load(cls, path) -> "FieldState":
        d = np.load(path)
        mg = loqd.MultigroupFields(d["mg_E"], d["mg_F"], d["mg_Eb"])
        grey = loqd.GreyFields(d["E"], d["F"], d["Eb"], d["T"])
        return cls(int(d["step"]), float(d["time"]), d["T"], mg, grey, d["psi"])


@dataclass
class IterationRecord:
    step: int
    time: float
    outer: int
    inner: list
    residual_T: float
    residual_E: float
    outer_history: list = field(default_factory=list)
    energy_residual: float = 0.0
    consistency_E: float = 0.0
    consistency_F: float = 0.0
    T_min: float = 0.0
    T_max: float = 0.0

    @property
    def total_inner(self) -> int:
        return int(sum(self.inner))


def relative_change(new, old, floor):
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(new), floor)))


def relative_norm_diff(a, b):
    na = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / na) if na > 0 else float(np.linalg.norm(a - b))


class AndersonMixer:
    """Anderson acceleration of a fixed-point map x -> g(x).

    ``update(x, g)`` returns the next iterate from the latest evaluation,
    mixing up to ``depth`` previous differences (depth 0 is plain iteration).
    """

    def __init__(self, depth: int):
        self.depth = depth
        self.xs, self.gs = [], []

    def update(self, x, g):
        if self.depth == 0:
            return g
        self.xs = (self.xs + [x])[-self.depth - 1:]
        self.gs = (self.gs + [g])[-self.depth - 1:]
        if len(self.xs) < 2:
            return g
        res = np.array(self.gs) - np.array(self.xs)
        d_res = np.diff(res, axis=0).T
        d_g = np.diff(np.array(self.gs), axis=0).T
        gamma = np.linalg.lstsq(d_res, res[-1], rcond=None)[0]
        return g - d_g @ gamma


class Simulation:
    """Static data (grids, stencil, boundary sources) plus the stepping logic."""

    def __init__(self, problem: Problem, chars: CharacteristicGrid | None = None):
        self.problem = problem
        p = problem
        self.stencil = loqd.Stencil(p.grid)
        self.solver = loqd.CondensedSolver(self.stencil, p.cross_terms)
        self.chars = chars if chars is not None else CharacteristicGrid(p.grid, p.quadrature, p.h_moc)
        self.I_bnd = boundary_intensity(p.grid, p.boundary, p.groups, p.constants)
        b = self.stencil.bfaces
        self.bface_length = p.grid.face_lengths()[b]

    def material(self, T):
        p = self.problem
        return p.opacity.group_opacity(T, p.groups), group_emission(T, p.groups, p.constants)

    def initial_state(self, T0: float | None = None) -> FieldState:
        """Isotropic equilibrium at uniform temperature T0."""
        p = self.problem
        T0 = p.T0 if T0 is None else T0
        st = self.stencil
        T = np.full(st.C, T0)
        _, B = self.material(T)
        E_g = 4 * np.pi * B / p.constants.c
        G = p.groups.n_groups
        Eb_g = E_g[np.where(st.upper[st.bfaces] >= 0, st.upper[st.bfaces], st.lower[st.bfaces])]
        mg = loqd.MultigroupFields(E_g, np.zeros((st.NF, G)), Eb_g)
        grey = loqd.GreyFields(E_g.sum(1), np.zeros(st.NF), Eb_g.sum(1), T.copy())
        psi = np.broadcast_to(B, (p.quadrature.n_directions,) + B.shape).copy()
        return FieldState(0, 0.0, T, mg, grey, psi)

    def energy_content(self, state: FieldState) -> float:
        V = self.problem.grid.cell_volume
        return float(V * (state.grey.E.sum() + self.problem.eos.c_v * state.T.sum()))

    def boundary_inflow(self, F_grey) -> float:
        """Net energy inflow rate through the domain boundary."""
        st = self.stencil
        return float(-np.sum(st.bsign * F_grey[st.bfaces] * self.bface_length))

    def advance_step(self, state: FieldState) -> tuple[FieldState, IterationRecord]:
        p = self.problem
        c, a_r, c_v = p.constants.c, p.constants.a_r, p.eos.c_v
        dt = p.time.dt
        ctl = p.iteration
        st = self.stencil

        # factors are reused only within a step, so a restarted run is bitwise identical
        self.solver.reset()
        T = state.T.copy()
        E = state.grey.E.copy()
        kappa, B = self.material(T)
        inner_counts, history = [], []
        T_outer, E_outer = state.T, state.grey.E
        for outer in range(1, ctl.max_outer + 1):
            src = CellSource.build(kappa, B, state.psi, c, dt)
            tallies = sweep(self.chars, src, self.I_bnd, c, check=p.check_tensors)
            bmom = boundary_partial_moments(tallies, p.quadrature, p.grid, self.I_bnd)
            clos = loqd.LowOrderClosures.from_tallies(st, tallies, bmom)
            mixer = AndersonMixer(ctl.anderson_depth)
            for inner in range(1, ctl.max_inner + 1):
                mg = loqd.solve_multigroup(st, clos, kappa, B, state.mg, dt, c, p.cross_terms,
                                           solver=self.solver)
                gc = loqd.compute_grey_closures(st, mg, kappa, B, clos, dt, c)
                gr = loqd.solve_grey_meb(st, gc, state.T, T, state.grey, dt, c, a_r, c_v,
                                         tol=0.1 * ctl.eps_inner, cross_terms=p.cross_terms,
                                         material=self.material, E_guess=E, solver=self.solver)
                dT = relative_change(gr.fields.T, T, T_FLOOR)
                dE = relative_change(gr.fields.E, E, E_FLOOR)
                if max(dT, dE) < ctl.eps_inner:
                    T, E = gr.fields.T, gr.fields.E
                    break
                T = np.exp(mixer.update(np.log(T), np.log(gr.fields.T)))
                E = gr.fields.E
                kappa, B = self.material(T)
            else:
                raise ConvergenceError(
                    f"step {state.step + 1}: inner iterations did not converge "
                    f"(dT={dT:.3e}, dE={dE:.3e})")
            inner_counts.append(inner)
            res_T = relative_change(T, T_outer, T_FLOOR)
            res_E = relative_change(E, E_outer, E_FLOOR)
            history.append(max(res_T, res_E))
            if len(history) > 2 and history[-1] > history[-2]:
                log.info("step %d: outer residual increased %.3e -> %.3e",
                         state.step + 1, history[-2], history[-1])
            T_outer, E_outer = T, E
            if max(res_T, res_E) < ctl.eps_outer:
                break
        else:
            raise ConvergenceError(
                f"step {state.step + 1}: {ctl.max_outer} outer iterations exceeded; "
                f"residual history {history}")

        grey = gr.fields
        new = FieldState(state.step + 1, state.time + dt, grey.T.copy(), mg, grey,
                         tallies.psi_cell)
        V = p.grid.cell_volume
        d_rad = V * np.sum(grey.E - state.grey.E)
        d_mat = V * c_v * np.sum(grey.T - state.T)
        inflow = self.boundary_inflow(grey.F) * dt
        scale = max(abs(d_rad) + abs(d_mat) + abs(inflow), 1e-300)
        record = IterationRecord(
            step=new.step, time=new.time, outer=outer, inner=inner_counts,
            residual_T=res_T, residual_E=res_E, outer_history=history,
            energy_residual=float((d_rad + d_mat - inflow) / scale),
            consistency_E=relative_norm_diff(grey.E, mg.E.sum(1)),
            consistency_F=relative_norm_diff(grey.F, mg.F.sum(1)),
            T_min=float(grey.T.min()), T_max=float(grey.T.max()),
        )
        self._check_bounds(record)
        return new, record

    def temperature_bounds(self) -> tuple[float, float]:
        """Range a maximum principle allows: initial temperature up to the hottest drive."""
        p = self.problem
        drives = [p.boundary.temperature(s) for s in ("left", "right", "bottom", "top")]
        hottest = max([p.T0] + [t for t in drives if t is not None])
        return p.T0 * (1 - 1e-9), hottest * (1 + 1e-3)

    def _check_bounds(self, rec: IterationRecord) -> None:
        lo, hi = self.temperature_bounds()
        if rec.T_min < lo or rec.T_max > hi:
            log.warning("step %d: temperature [%.6e, %.6e] outside [%.6e, %.6e]",
                        rec.step, rec.T_min, rec.T_max, lo, hi)

    def run(self, state: FieldState | None = None, n_steps: int | None = None, callback=None):
        """Advance ``n_steps`` steps; returns (final state, list of records)."""
        state = self.initial_state() if state is None else state
        n_steps = self.problem.time.n_steps if n_steps is None else n_steps
        records = []
        if callback is not None:
            callback(state, None)
        for _ in range(n_steps):
            state, rec = self.advance_step(state)
            records.append(rec)
            log.info("step %d t=%.4f outer=%d inner=%d", rec.step, rec.time, rec.outer,
                     rec.total_inner)
            if callback is not None:
                callback(state, rec)
        return state, records


def fleck_cummings(h_mat: float, h_moc: float, **overrides) -> Problem:
    """The 6x6 cm Fleck-Cummings slab driven by a 1 keV Planckian on the left."""
    grid = MaterialGrid.uniform(6.0, 6.0, h_mat)
    problem = Problem(grid=grid, h_moc=h_moc)
    return replace(problem, **overrides)
