"""Command-line entry point, run configuration and CSV output.

Configuration files are flat ``section.key = value`` lines; ``#`` starts a
comment. See ``SCHEMA`` (or ``mlqd keys``) for every key, its default and
meaning; the bundled ``data/fc.cfg`` encodes the Fleck-Cummings problem.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .driver import FieldState, IterationControls, IterationRecord, Problem, Simulation, TimeControls
from .mesh import CharacteristicGrid, MaterialGrid
from .physics import (RADIATION_CONSTANT, SPEED_OF_LIGHT, FrequencyGrid, MaterialEOS,
                      OpacityModel, PhysicalConstants, constant_opacity, fleck_cummings_opacity)
from .quadrature import AngularQuadrature, build_product_quadrature
from .study import RefinementLadder, run_ladder
from .transport import SIDES, BoundarySpec

log = logging.getLogger("mlqd")

REQUIRED = object()


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _boundary(text: str):
    """``vacuum`` or ``planckian <T keV>``; returns the temperature or None."""
    parts = text.split()
    if parts == ["vacuum"]:
        return None
    if len(parts) == 2 and parts[0] == "planckian":
        T = float(parts[1])
        if T <= 0:
            raise ValueError("Planckian temperature must be positive")
        return T
    raise ValueError("expected 'vacuum' or 'planckian <T>'")


def _float_list(text: str):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _text(text: str) -> str:
    return text.strip()


# key: (parser, default, description)
SCHEMA = {
    "domain.lx": (float, REQUIRED, "domain width in x (cm)"),
    "domain.ly": (float, REQUIRED, "domain width in y (cm)"),
    "mesh.h_mat": (float, REQUIRED, "material grid cell width (cm)"),
    "mesh.h_moc": (float, REQUIRED, "maximum spacing between parallel characteristics (cm)"),
    "quadrature.n_polar": (int, 6, "polar cosines per hemisphere"),
    "quadrature.n_azimuthal": (int, 6, "azimuthal angles per quadrant"),
    "quadrature.file": (_text, None, "file of 'Ox Oy Oz w' lines; overrides the product set"),
    "groups.count": (int, 17, "number of frequency groups"),
    "groups.nu_min": (float, 1e-2, "lowest interior group bound (keV)"),
    "groups.nu_max": (float, 30.0, "highest group bound (keV)"),
    "groups.file": (_text, None, "file of group bounds (keV); overrides count/nu_min/nu_max"),
    "physics.c": (float, SPEED_OF_LIGHT, "speed of light (cm/ns)"),
    "physics.a_r": (float, RADIATION_CONSTANT, "radiation constant (jerks/cm^3/keV^4)"),
    "physics.c_v": (float, None, "heat capacity (jerks/cm^3/keV); default 0.5917 a_r"),
    "opacity.model": (_text, "fleck-cummings", "'fleck-cummings' (27/nu^3 (1-e^-nu/T)) or 'constant'"),
    "opacity.kappa0": (float, None, "opacity of the constant model (1/cm)"),
    "opacity.order": (int, 8, "quadrature points per group for group opacities"),
    "boundary.left": (_boundary, None, "'vacuum' or 'planckian <T>'"),
    "boundary.right": (_boundary, None, "'vacuum' or 'planckian <T>'"),
    "boundary.bottom": (_boundary, None, "'vacuum' or 'planckian <T>'"),
    "boundary.top": (_boundary, None, "'vacuum' or 'planckian <T>'"),
    "initial.T0": (float, 1e-3, "initial temperature (keV)"),
    "time.dt": (float, REQUIRED, "time step (ns)"),
    "time.t_end": (float, REQUIRED, "final time (ns), a whole number of steps"),
    "iteration.eps_outer": (float, 1e-12, "outer (transport) relative tolerance"),
    "iteration.eps_inner": (float, 1e-12, "inner (multigroup-grey) relative tolerance"),
    "iteration.max_outer": (int, 50, "outer iterations allowed per step"),
    "iteration.max_inner": (int, 100, "inner iterations allowed per outer iteration"),
    "iteration.anderson_depth": (int, 3, "Anderson mixing depth of the inner iteration (0: off)"),
    "output.directory": (_text, "output", "directory for CSV output"),
    "output.snapshot_interval": (float, 0.5, "field snapshot spacing (ns); the final time is always written"),
    "output.snapshot_times": (_float_list, None, "explicit snapshot times (ns); replaces the interval"),
    "features.cross_terms": (_bool, True, "include the off-diagonal Eddington tensor terms"),
    "features.check_tensors": (_bool, False, "check Eddington tensor invariants after each sweep"),
}


@dataclass(frozen=True)
class RunConfig:
    problem: Problem
    output_dir: Path
    snapshot_times: tuple
    values: dict  # parsed key -> value, defaults included

    @property
    def grid(self) -> MaterialGrid:
        return self.problem.grid


def _read_pairs(text: str, source: str) -> dict:
    pairs = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in pairs:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def parse_config(path) -> RunConfig:
    """Read and validate a configuration file."""
    path = Path(path)
    return config_from_text(path.read_text(), source=str(path), base=path.parent)


def config_from_text(text: str, source: str = "<config>", base: Path | None = None) -> RunConfig:
    pairs = _read_pairs(text, source)
    missing = [k for k, (_, default, _) in SCHEMA.items() if default is REQUIRED and k not in pairs]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    v = {}
    for key, (parse, default, _) in SCHEMA.items():
        if key in pairs:
            try:
                v[key] = parse(pairs[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: {key} = {pairs[key]!r}: {exc}") from None
        else:
            v[key] = default
    base = base or Path(".")
    return RunConfig(_build_problem(v, base), Path(v["output.directory"]),
                     _snapshots(v), v)


def _positive(v: dict, *keys):
    for k in keys:
        if v[k] is not None and not v[k] > 0:
            raise ConfigError(f"{k} must be positive")


def _build_problem(v: dict, base: Path) -> Problem:
    _positive(v, "domain.lx", "domain.ly", "mesh.h_mat", "mesh.h_moc", "time.dt", "physics.c",
              "physics.a_r", "physics.c_v", "initial.T0", "groups.nu_min", "groups.nu_max")
    lx, ly, h = v["domain.lx"], v["domain.ly"], v["mesh.h_mat"]
    for name, length in (("Lx", lx), ("Ly", ly)):
        n = round(length / h)
        if n < 1 or abs(n * h - length) > 1e-9 * length:
            raise ConfigError(f"h_mat must divide {name} (h_mat={h}, {name}={length})")
    grid = MaterialGrid.uniform(lx, ly, h)
    if v["mesh.h_moc"] > h:
        log.warning("h_moc=%g exceeds h_mat=%g; characteristics will be coarser than cells",
                    v["mesh.h_moc"], h)

    if v["quadrature.file"]:
        quad = AngularQuadrature.from_file(base / v["quadrature.file"])
    else:
        quad = build_product_quadrature(v["quadrature.n_polar"], v["quadrature.n_azimuthal"])
    if v["groups.file"]:
        groups = FrequencyGrid.from_file(base / v["groups.file"])
    else:
        if v["groups.count"] < 1 or not v["groups.nu_max"] > v["groups.nu_min"]:
            raise ConfigError("groups.count must be >= 1 and groups.nu_max > groups.nu_min")
        groups = FrequencyGrid(np.geomspace(v["groups.nu_min"], v["groups.nu_max"],
                                            v["groups.count"] + 1))
    model = v["opacity.model"]
    if model == "fleck-cummings":
        spectral = fleck_cummings_opacity
    elif model == "constant":
        if v["opacity.kappa0"] is None or v["opacity.kappa0"] < 0:
            raise ConfigError("opacity.kappa0 must be given and nonnegative for the constant model")
        spectral = constant_opacity(v["opacity.kappa0"])
    else:
        raise ConfigError(f"opacity.model must be 'fleck-cummings' or 'constant', not {model!r}")
    constants = PhysicalConstants(v["physics.c"], v["physics.a_r"])
    c_v = v["physics.c_v"] if v["physics.c_v"] is not None else 0.5917 * constants.a_r
    try:
        time = TimeControls.from_end(v["time.dt"], v["time.t_end"])
        iteration = IterationControls(v["iteration.eps_outer"], v["iteration.eps_inner"],
                                      v["iteration.max_outer"], v["iteration.max_inner"],
                                      v["iteration.anderson_depth"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    boundary = BoundarySpec(**{s: v[f"boundary.{s}"] for s in SIDES})
    return Problem(
        grid=grid, h_moc=v["mesh.h_moc"], quadrature=quad, groups=groups,
        opacity=OpacityModel(spectral, v["opacity.order"]), eos=MaterialEOS(c_v),
        constants=constants, boundary=boundary, T0=v["initial.T0"], time=time,
        iteration=iteration, cross_terms=v["features.cross_terms"],
        check_tensors=v["features.check_tensors"],
    )


def _snapshots(v: dict) -> tuple:
    t_end = v["time.dt"] * round(v["time.t_end"] / v["time.dt"])
    if v["output.snapshot_times"] is not None:
        times = [t for t in v["output.snapshot_times"] if t <= t_end + 1e-12]
    else:
        step = v["output.snapshot_interval"]
        if not step > 0:
            raise ConfigError("output.snapshot_interval must be positive")
        times = list(np.arange(0.0, t_end + 1e-12, step))
    return tuple(sorted(set(round(t, 12) for t in times) | {round(t_end, 12)}))


def bundled_config_path() -> Path:
    return Path(str(resources.files("mlqd") / "data" / "fc.cfg"))


# ---------------------------------------------------------------- output


def field_filename(name: str, time: float) -> str:
    return f"{name}_{time:.4f}.csv"


def write_field_csv(path, values, grid: MaterialGrid, time: float, name: str, units: str) -> None:
    """Grid-shaped CSV (row iy, column ix) with a one-line ``#`` header."""
    data = np.asarray(values, dtype=float).reshape(grid.ny, grid.nx)
    header = (f"# field={name} time={time!r} units={units} nx={grid.nx} ny={grid.ny} "
              f"lx={grid.lx!r} ly={grid.ly!r} rows=iy cols=ix")
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        csv.writer(fh).writerows([[repr(float(x)) for x in row] for row in data])


def read_field_csv(path) -> tuple[dict, np.ndarray]:
    """Inverse of ``write_field_csv``: header fields and the (ny, nx) array."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        data = np.array([[float(x) for x in row] for row in csv.reader(fh) if row])
    return meta, data


ITERATION_COLUMNS = ("step", "time", "outer_iters", "total_inner_iters", "final_residual_T",
                     "final_residual_E", "energy_residual", "consistency_E", "consistency_F",
                     "T_min", "T_max", "inner_per_outer")


def iteration_row(rec: IterationRecord) -> list:
    return [rec.step, repr(rec.time), rec.outer, rec.total_inner, repr(rec.residual_T),
            repr(rec.residual_E), repr(rec.energy_residual), repr(rec.consistency_E),
            repr(rec.consistency_F), repr(rec.T_min), repr(rec.T_max),
            " ".join(str(n) for n in rec.inner)]


def run_simulation(cfg: RunConfig, state: FieldState | None = None) -> tuple[FieldState, list]:
    """Run the configured problem, writing snapshots and the iteration log."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(cfg.problem)
    pending = list(cfg.snapshot_times)
    grid = cfg.grid
    dt = cfg.problem.time.dt

    with open(out / "iterations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ITERATION_COLUMNS)

        def callback(st: FieldState, rec: IterationRecord | None):
            if rec is not None:
                writer.writerow(iteration_row(rec))
                fh.flush()
            while pending and pending[0] <= st.time + 0.5 * dt * 1e-6:
                pending.pop(0)
                t = st.time
                write_field_csv(out / field_filename("T", t), st.T, grid, t, "T", "keV")
                write_field_csv(out / field_filename("E", t), st.grey.E, grid, t, "E",
                                "jerks/cm^3")

        start = sim.initial_state() if state is None else state
        pending[:] = [t for t in pending if t > start.time - 0.5 * dt * 1e-6]
        n_steps = cfg.problem.time.n_steps - start.step
        return sim.run(start, n_steps, callback)


# ---------------------------------------------------------------- commands


def _values(text: str):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _cmd_run(args) -> int:
    cfg = _load(args)
    state = FieldState.load(args.restart) if args.restart else None
    final, records = run_simulation(cfg, state)
    if args.save_state:
        final.save(args.save_state)
    worst = max((r.outer for r in records), default=0)
    print(f"t={final.time:.4f} ns after {final.step} steps; max outer iterations {worst}; "
          f"output in {cfg.output_dir}")
    return 0


def _cmd_study(args, varied: str) -> int:
    cfg = _load(args)
    fixed = args.hmoc if varied == "h_mat" else args.hmat
    if fixed is None:
        fixed = cfg.problem.h_moc if varied == "h_mat" else cfg.grid.dx
    ladder = RefinementLadder(varied, args.values, fixed, cfg.problem)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    result = run_ladder(ladder, csv_path=cfg.output_dir / "study.csv")
    for row in result.rows:
        rho = "" if row.rho_T is None else f" rho_T={row.rho_T:.3f} rho_E={row.rho_E:.3f}"
        print(f"{varied}={row.h:g}: |dT|={row.norm_dT:.4e} |dE|={row.norm_dE:.4e}{rho}")
    return 0


def _cmd_mesh_dump(args) -> int:
    cfg = _load(args)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    chars = CharacteristicGrid(cfg.grid, cfg.problem.quadrature, cfg.problem.h_moc)
    path = cfg.output_dir / "mesh.csv"
    chars.write_csv(path)
    print(f"{chars.seg_len.size} segments written to {path}")
    return 0


def _cmd_keys(args) -> int:
    for key, (_, default, doc) in SCHEMA.items():
        d = "required" if default is REQUIRED else f"default {default!r}"
        print(f"{key:28s} {d:28s} {doc}")
    return 0


def _load(args) -> RunConfig:
    cfg = parse_config(args.config)
    if args.output:
        cfg = replace(cfg, output_dir=Path(args.output))
    if getattr(args, "steps", None) is not None:
        p = cfg.problem
        cfg = replace(cfg, problem=replace(p, time=TimeControls(p.time.dt, args.steps)))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlqd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--workers", type=int, default=None,
                        help="threads for the transport sweep (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="configuration file ('fc' for the bundled F-C setup)")
        p.add_argument("-o", "--output", help="output directory (overrides output.directory)")
        return p

    p = with_config(sub.add_parser("run", help="run a simulation"))
    p.add_argument("--steps", type=int, help="number of time steps (overrides time.t_end)")
    p.add_argument("--restart", help="continue from a state saved with --save-state")
    p.add_argument("--save-state", help="write the final state (.npz) for restarting")
    p.set_defaults(func=_cmd_run)

    p = with_config(sub.add_parser("study-mat", help="material-grid refinement ladder"))
    p.add_argument("--values", type=_values, required=True, help="h_mat values, e.g. 0.6,0.3,0.15")
    p.add_argument("--hmoc", type=float, help="fixed h_moc (default: mesh.h_moc)")
    p.add_argument("--steps", type=int, help="number of time steps (overrides time.t_end)")
    p.set_defaults(func=lambda a: _cmd_study(a, "h_mat"))

    p = with_config(sub.add_parser("study-moc", help="characteristic-grid refinement ladder"))
    p.add_argument("--values", type=_values, required=True, help="h_moc values, e.g. 7.5e-2,3.75e-2")
    p.add_argument("--hmat", type=float, help="fixed h_mat (default: mesh.h_mat)")
    p.add_argument("--steps", type=int, help="number of time steps (overrides time.t_end)")
    p.set_defaults(func=lambda a: _cmd_study(a, "h_moc"))

    p = with_config(sub.add_parser("mesh-dump", help="write the characteristic grid as CSV"))
    p.set_defaults(func=_cmd_mesh_dump)

    p = sub.add_parser("keys", help="list configuration keys")
    p.set_defaults(func=_cmd_keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "config", None) == "fc":
        args.config = bundled_config_path()
    if args.workers is not None:
        import numba
        numba.set_num_threads(args.workers)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"mlqd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
