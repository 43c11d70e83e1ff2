"""Scenario files, the experiment driver and CSV/VTK reporting.

A scenario is a JSON document::

    {
      "name": "2c",
      "grid": {"nx": 200, "ny": 200, "h": 0.005, "origin": [0, 0]},
      "fractures": "fractures_25.txt",
      "continua": [{"id": 1, "kind": "matrix", "c": 0.1, "k": 1.0, "initial": 1.0}, ...],
      "couplings": [{"pair": [1, 2], "sigma": 1.0}],
      "wells": [{"continuum": 2, "rect": [0.1, 0.15, 0.1, 0.15], "q_w": 1e5, "p_w": 1.2}],
      "time": {"T": 0.002, "n_steps": 50},
      "solver": {"tol": 1e-8, "maxit": null},
      "coarse": {"grids": [[20, 20], [40, 40]], "layers": 4},
      "schemes": ["coupled", "l", "d", "u"],
      "output": "out/2c",
      "dump_every": 0
    }

Relative paths (fracture file, output) resolve against the scenario file's
directory. ``"fractures": "builtin:fractures_25"`` selects the bundled network.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import shutil
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .assembly import (
    FRACTURE,
    MATRIX,
    ContinuumSpec,
    CouplingSpec,
    MulticontinuumSystem,
    WellSpec,
    assemble_system,
)
from .geometry import build_grid, mesh_fractures, read_fracture_file
from .linalg import DEFAULT_TOL
from .metrics import error_series
from .nlmc import DEFAULT_LAYERS, NlmcSpace, build_nlmc
from .timestepping import RunRecord, SchemeKind, run

__all__ = [
    "ConfigError",
    "GridSpec",
    "TimeSpec",
    "SolverSpec",
    "CoarseSpec",
    "Scenario",
    "LevelResult",
    "Report",
    "load_scenario",
    "save_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "build_fine_system",
    "run_scenario",
    "make_paper_scenarios",
    "paper_scenario",
    "bundled_network_path",
    "write_vtk_cells",
    "write_fracture_csv",
    "smooth_two_continuum",
    "splitting_order_study",
]

log = logging.getLogger(__name__)

BUILTIN_PREFIX = "builtin:"
ALL_SCHEMES = ("coupled", "l", "d", "u")


class ConfigError(ValueError):
    pass


@dataclass
class GridSpec:
    nx: int
    ny: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)


@dataclass
class TimeSpec:
    T: float
    n_steps: int

    @property
    def tau(self) -> float:
        return self.T / self.n_steps


@dataclass
class SolverSpec:
    tol: float = DEFAULT_TOL
    maxit: int | None = None


@dataclass
class CoarseSpec:
    grids: list = field(default_factory=list)  # [(Nx, Ny), ...]
    layers: int = DEFAULT_LAYERS
    exchange: str = "galerkin"
    conservative: bool = True


@dataclass
class Scenario:
    name: str
    grid: GridSpec
    fractures: str | None
    continua: list
    couplings: list = field(default_factory=list)
    wells: list = field(default_factory=list)
    time: TimeSpec = field(default_factory=lambda: TimeSpec(0.002, 50))
    solver: SolverSpec = field(default_factory=SolverSpec)
    coarse: CoarseSpec = field(default_factory=CoarseSpec)
    schemes: list = field(default_factory=lambda: list(ALL_SCHEMES))
    output: str = "out"
    dump_every: int = 0
    well_sign: str = "injection"
    colocated_measure: bool = True
    error_norm: str = "euclidean"
    base_dir: Path | None = None

    def __post_init__(self):
        if not self.time.T > 0 or self.time.n_steps < 1:
            raise ConfigError("time: T must be positive and n_steps at least 1")
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        for s in self.schemes:
            try:
                SchemeKind.parse(s)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.error_norm not in ("euclidean", "weighted"):
            raise ConfigError(f"unknown error norm {self.error_norm!r}")
        if self.dump_every < 0:
            raise ConfigError("dump_every must be nonnegative")

    def resolve(self, path) -> Path:
        p = Path(path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p


def bundled_network_path() -> Path:
    return Path(str(resources.files("fracflow") / "data" / "fractures_25.txt"))


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def scenario_from_dict(data: dict, base_dir=None) -> Scenario:
    try:
        g = _require(data, "grid", "scenario")
        grid = GridSpec(int(_require(g, "nx", "grid")), int(_require(g, "ny", "grid")),
                        float(_require(g, "h", "grid")), tuple(float(v) for v in g.get("origin", (0, 0))))
        continua = [
            ContinuumSpec(int(_require(c, "id", "continuum")), str(_require(c, "kind", "continuum")),
                          float(_require(c, "c", "continuum")), float(_require(c, "k", "continuum")),
                          float(c.get("f", 0.0)), float(c.get("initial", 1.0)))
            for c in _require(data, "continua", "scenario")
        ]
        couplings = [CouplingSpec(tuple(_require(c, "pair", "coupling")), float(_require(c, "sigma", "coupling")))
                     for c in data.get("couplings", [])]
        wells = [WellSpec(int(_require(w, "continuum", "well")), tuple(float(v) for v in _require(w, "rect", "well")),
                          float(_require(w, "q_w", "well")), float(_require(w, "p_w", "well")))
                 for w in data.get("wells", [])]
        t = _require(data, "time", "scenario")
        time = TimeSpec(float(_require(t, "T", "time")), int(_require(t, "n_steps", "time")))
        s = data.get("solver", {})
        solver = SolverSpec(float(s.get("tol", DEFAULT_TOL)), None if s.get("maxit") is None else int(s["maxit"]))
        c = data.get("coarse") or {}
        coarse = CoarseSpec([tuple(int(v) for v in gr) for gr in c.get("grids", [])],
                            int(c.get("layers", DEFAULT_LAYERS)), str(c.get("exchange", "galerkin")),
                            bool(c.get("conservative", True)))
        opts = data.get("options", {})
        return Scenario(
            name=str(data.get("name", "scenario")),
            grid=grid,
            fractures=data.get("fractures"),
            continua=continua,
            couplings=couplings,
            wells=wells,
            time=time,
            solver=solver,
            coarse=coarse,
            schemes=[str(v) for v in data.get("schemes", ALL_SCHEMES)],
            output=str(data.get("output", "out")),
            dump_every=int(data.get("dump_every", 0)),
            well_sign=str(opts.get("well_sign", "injection")),
            colocated_measure=bool(opts.get("colocated_measure", True)),
            error_norm=str(opts.get("error_norm", "euclidean")),
            base_dir=None if base_dir is None else Path(base_dir),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(str(exc)) from exc


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "grid": {"nx": sc.grid.nx, "ny": sc.grid.ny, "h": sc.grid.h, "origin": list(sc.grid.origin)},
        "fractures": sc.fractures,
        "continua": [dataclasses.asdict(c) for c in sc.continua],
        "couplings": [{"pair": list(c.pair), "sigma": c.sigma} for c in sc.couplings],
        "wells": [{"continuum": w.continuum, "rect": list(w.rect), "q_w": w.q_w, "p_w": w.p_w} for w in sc.wells],
        "time": {"T": sc.time.T, "n_steps": sc.time.n_steps},
        "solver": {"tol": sc.solver.tol, "maxit": sc.solver.maxit},
        "coarse": {"grids": [list(g) for g in sc.coarse.grids], "layers": sc.coarse.layers,
                   "exchange": sc.coarse.exchange, "conservative": sc.coarse.conservative},
        "schemes": list(sc.schemes),
        "output": sc.output,
        "dump_every": sc.dump_every,
        "options": {"well_sign": sc.well_sign, "colocated_measure": sc.colocated_measure,
                    "error_norm": sc.error_norm},
    }


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return scenario_from_dict(data, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_scenario(sc: Scenario, path):
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


def build_fine_system(sc: Scenario) -> MulticontinuumSystem:
    try:
        grid = build_grid(sc.grid.nx, sc.grid.ny, sc.grid.h, sc.grid.origin)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    fmesh = None
    if sc.fractures:
        if sc.fractures.startswith(BUILTIN_PREFIX):
            name = sc.fractures[len(BUILTIN_PREFIX):]
            if name != "fractures_25":
                raise ConfigError(f"unknown built-in network {name!r}")
            fpath = bundled_network_path()
        else:
            fpath = sc.resolve(sc.fractures)
        try:
            network = read_fracture_file(fpath)
        except OSError as exc:
            raise ConfigError(f"{fpath}: {exc.strerror or exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{fpath}: {exc}") from exc
        try:
            fmesh = mesh_fractures(grid, network)
        except ValueError as exc:
            raise ConfigError(f"{fpath}: {exc}") from exc
    try:
        return assemble_system(grid, fmesh, sc.continua, sc.couplings, sc.wells,
                               sc.well_sign, sc.colocated_measure)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class LevelResult:
    level: str
    system: MulticontinuumSystem
    records: dict = field(default_factory=dict)  # scheme name -> RunRecord
    errors: dict = field(default_factory=dict)  # scheme name -> ErrorSeries
    space: NlmcSpace | None = None


@dataclass
class Report:
    scenario: Scenario
    levels: dict = field(default_factory=dict)  # "fine" / "coarse20x20" -> LevelResult
    files: list = field(default_factory=list)

    def summary_rows(self) -> list[dict]:
        rows = []
        for level, res in self.levels.items():
            for name, rec in res.records.items():
                row = {"level": level, "scheme": name, "dofs": res.system.n, "n_steps": rec.n_steps}
                err = res.errors.get(name)
                row["final_error_pct"] = err.final if err is not None else 0.0
                for target in sorted(rec.reports, key=str):
                    label = _target_label(res.system, target)
                    row[f"avg_iter_{label}"] = rec.average_iterations(target)
                rows.append(row)
        return rows


def _target_label(system, target) -> str:
    return "all" if target == "all" else f"c{system.ids[target]}"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10e}"
    return str(x)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def write_vtk_cells(path, values, nx, ny, spacing, origin=(0.0, 0.0), name="pressure"):
    """Cell data on a structured-points grid, legacy ASCII VTK."""
    values = np.asarray(values, dtype=float)
    lines = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} 1",
        f"ORIGIN {origin[0]!r} {origin[1]!r} 0",
        f"SPACING {spacing[0]!r} {spacing[1]!r} 1",
        f"CELL_DATA {nx * ny}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    lines += [f"{v:.10e}" for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


def write_fracture_csv(path, points, values, lengths=None):
    """Fracture (or coarse fracture) values at their midpoints as CSV."""
    points = np.asarray(points, dtype=float)
    cols = [points[:, 0], points[:, 1]]
    header = ["x", "y"]
    if lengths is not None:
        cols.append(np.asarray(lengths, dtype=float))
        header.append("length")
    cols.append(np.asarray(values, dtype=float))
    header.append("value")
    _write_csv(Path(path), header, zip(*cols))


def _dump_fields(out: Path, level: str, name: str, res: LevelResult, rec: RunRecord, every: int):
    sys_ = res.system
    files = []
    steps = [n for n in rec.snapshot_steps if n % every == 0 or n == rec.n_steps]
    for n in steps:
        p = rec.snapshots[list(rec.snapshot_steps).index(n)]
        for a, cid in enumerate(sys_.ids):
            vals = p[sys_.slice(a)]
            stem = out / f"{level}_{name}_c{cid}_step{n:04d}"
            if res.space is None:
                setup = sys_.setup
                g = setup.grid
                if sys_.kinds[a] == MATRIX:
                    write_vtk_cells(stem.with_suffix(".vtk"), vals, g.nx, g.ny, (g.h, g.h), g.origin)
                    files.append(stem.with_suffix(".vtk"))
                else:
                    fm = setup.fracture_mesh
                    write_fracture_csv(stem.with_suffix(".csv"), fm.midpoints, vals, fm.length)
                    files.append(stem.with_suffix(".csv"))
            else:
                cg = res.space.cgrid
                if sys_.kinds[a] == MATRIX and len(cg.cells[a]) == cg.n_cells:
                    write_vtk_cells(stem.with_suffix(".vtk"), vals, cg.Nx, cg.Ny, cg.H, cg.fine.origin)
                    files.append(stem.with_suffix(".vtk"))
                else:
                    write_fracture_csv(stem.with_suffix(".csv"), cg.centers(cg.cells[a]), vals)
                    files.append(stem.with_suffix(".csv"))
    return files


def _run_level(res: LevelResult, schemes, sc: Scenario, reference):
    """Run ``schemes`` on one level; errors against ``reference`` (an array)."""
    tau, nt = sc.time.tau, sc.time.n_steps
    weights = None if sc.error_norm == "euclidean" else res.system.measure
    for name in schemes:
        rec = run(res.system, name, tau, nt, tol=sc.solver.tol, maxit=sc.solver.maxit)
        res.records[name] = rec
        if reference is not None:
            res.errors[name] = error_series(reference[1:], rec.snapshots[1:], weights)
        log.info("%s %s: done, %s", res.level, name,
                 "" if name not in res.errors else f"final error {res.errors[name].final:.4f}%")


def _ordered(schemes) -> list[str]:
    names = [SchemeKind.parse(s).value for s in schemes]
    return ["coupled"] + [s for s in ALL_SCHEMES[1:] if s in names]


def run_scenario(scenario, out=None, schemes=None, coarse: bool = True, dump_every=None,
                 threads=None, cache: bool = True) -> Report:
    """Run the fine level (and the NLMC levels when ``coarse``) and write reports.

    The fine coupled run is always made; it is the reference for every
    error series. Coarse errors compare against it averaged to the coarse grid.
    Output files:

    - ``summary.csv``: per (level, scheme) dofs, final error, N_it per solve target
    - ``timing.csv``: per (level, scheme) total and per-continuum solver time
    - ``errors_<level>.csv``: e^n per step for each scheme
    - ``iterations_<level>.csv``: CG iterations per step and solve target
    - field dumps every ``dump_every`` steps (VTK for matrix continua, CSV for fractures)
    """
    sc = load_scenario(scenario) if isinstance(scenario, (str, Path)) else scenario
    names = _ordered(schemes if schemes is not None else sc.schemes)
    every = sc.dump_every if dump_every is None else int(dump_every)
    outdir = Path(out) if out is not None else sc.resolve(sc.output)
    outdir.mkdir(parents=True, exist_ok=True)
    report = Report(sc)

    fine = LevelResult("fine", build_fine_system(sc))
    report.levels["fine"] = fine
    _run_level(fine, ["coupled"], sc, None)
    ref = fine.records["coupled"].snapshots
    fine.errors["coupled"] = error_series(ref[1:], ref[1:])
    _run_level(fine, [n for n in names if n != "coupled"], sc, ref)

    if coarse:
        for Nx, Ny in sc.coarse.grids:
            try:
                space = build_nlmc(fine.system, Nx, Ny, m=sc.coarse.layers, threads=threads,
                                   cache_dir=outdir / "cache" if cache else None,
                                   exchange=sc.coarse.exchange, conservative=sc.coarse.conservative)
            except ValueError as exc:
                raise ConfigError(f"coarse grid {Nx}x{Ny}: {exc}") from exc
            level = LevelResult(space.system.label, space.system, space=space)
            report.levels[level.level] = level
            _run_level(level, names, sc, space.average(ref))

    report.files += _write_reports(report, outdir, every)
    return report


def _write_reports(report: Report, outdir: Path, every: int) -> list[Path]:
    files = []
    rows = report.summary_rows()
    keys = ["level", "scheme", "dofs", "n_steps", "final_error_pct"]
    extra = sorted({k for r in rows for k in r if k not in keys})
    path = outdir / "summary.csv"
    _write_csv(path, keys + extra, [[r.get(k, "") for k in keys + extra] for r in rows])
    files.append(path)

    trows = []
    tkeys = set()
    for level, res in report.levels.items():
        for name, rec in res.records.items():
            t = {"level": level, "scheme": name, "time_tot": rec.total_time}
            for target, v in rec.solve_time.items():
                t[f"time_{_target_label(res.system, target)}"] = v
            tkeys |= set(t)
            trows.append(t)
    tk = ["level", "scheme", "time_tot"] + sorted(tkeys - {"level", "scheme", "time_tot"})
    path = outdir / "timing.csv"
    _write_csv(path, tk, [[t.get(k, "") for k in tk] for t in trows])
    files.append(path)

    for level, res in report.levels.items():
        names = list(res.errors)
        if names:
            nt = len(res.errors[names[0]].values)
            tau = report.scenario.time.tau
            path = outdir / f"errors_{level}.csv"
            _write_csv(path, ["step", "time"] + [f"e_{n}" for n in names],
                       [[n + 1, (n + 1) * tau] + [res.errors[s].values[n] for s in names] for n in range(nt)])
            files.append(path)
        header, cols = ["step"], []
        for name, rec in res.records.items():
            for target in sorted(rec.reports, key=str):
                header.append(f"{name}_{_target_label(res.system, target)}")
                cols.append([r.iterations for r in rec.reports[target]])
        if cols:
            path = outdir / f"iterations_{level}.csv"
            _write_csv(path, header, [[n + 1] + [c[n] for c in cols] for n in range(len(cols[0]))])
            files.append(path)
        if every > 0:
            dump = outdir / "fields"
            dump.mkdir(exist_ok=True)
            for name, rec in res.records.items():
                files += _dump_fields(dump, level, name, res, rec, every)
    return files


PAPER_WELLS = ((0.1, 0.15, 0.1, 0.15), (0.6, 0.65, 0.85, 0.9))


def paper_scenario(kind: str, n: int = 200, fractures: str = "fractures_25.txt") -> Scenario:
    """The two-continuum or three-continuum setup on an n x n grid of [0, 1]^2."""
    if kind == "2c":
        continua = [ContinuumSpec(1, MATRIX, 0.1, 1.0), ContinuumSpec(2, FRACTURE, 1.0, 1e6)]
        couplings = [CouplingSpec((1, 2), 1.0)]
        fid = 2
    elif kind == "3c":
        continua = [ContinuumSpec(1, MATRIX, 0.05, 1e-3), ContinuumSpec(2, MATRIX, 0.1, 1.0),
                    ContinuumSpec(3, FRACTURE, 1.0, 1e6)]
        couplings = [CouplingSpec((1, 2), 1.0), CouplingSpec((1, 3), 1e-3), CouplingSpec((2, 3), 1.0)]
        fid = 3
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    grids = [(N, N) for N in (20, 40) if n % N == 0]
    return Scenario(
        name=f"{kind}_{n}",
        grid=GridSpec(n, n, 1.0 / n),
        fractures=fractures,
        continua=continua,
        couplings=couplings,
        wells=[WellSpec(fid, r, 1e5, 1.2) for r in PAPER_WELLS],
        time=TimeSpec(0.002, 50),
        coarse=CoarseSpec(grids),
        output=f"out/{kind}_{n}",
    )


def make_paper_scenarios(outdir) -> list[Path]:
    """Write 2C/3C scenario files at 200x200 and 100x100 plus the fracture file."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net = outdir / "fractures_25.txt"
    shutil.copyfile(bundled_network_path(), net)
    files = [net]
    for n in (200, 100):
        for kind in ("2c", "3c"):
            path = outdir / f"{kind}_{n}.json"
            save_scenario(paper_scenario(kind, n, net.name), path)
            files.append(path)
    return files


def smooth_two_continuum(n: int = 50, sigma: float = 10.0) -> MulticontinuumSystem:
    """Two co-located matrix continua with a smooth initial state and no wells.

    Continuum 1 starts at ``1 + cos(pi x) cos(pi y)`` and continuum 2 at 1, so
    the exchange term drives a smooth transient with no fracture singularity.
    """
    grid = build_grid(n, n, 1.0 / n)
    continua = [ContinuumSpec(1, MATRIX, 0.1, 1.0), ContinuumSpec(2, MATRIX, 1.0, 10.0)]
    sys_ = assemble_system(grid, None, continua, [CouplingSpec((1, 2), sigma)])
    xy = grid.centers()
    bump = 1.0 + np.cos(np.pi * xy[:, 0]) * np.cos(np.pi * xy[:, 1])
    return sys_.with_initial(np.concatenate([bump, np.ones(grid.n_cells)]))


def splitting_order_study(system=None, T: float = 0.002, steps=(25, 50, 100, 200),
                          schemes=("d", "l", "u"), tol: float = 1e-12) -> dict:
    """Final-time ``||p_split - p_coupled|| / ||p_coupled||`` per scheme and N_T.

    Returns ``{scheme: {"diff": [...], "ratio": [...]}}`` where ``ratio[j]`` is
    ``diff[j] / diff[j + 1]`` for successive halvings of the step.
    """
    system = smooth_two_continuum() if system is None else system
    out = {s: {"diff": [], "ratio": []} for s in schemes}
    for nt in steps:
        ref = run(system, "coupled", T / nt, nt, stride=nt, tol=tol).snapshots[-1]
        for s in schemes:
            p = run(system, s, T / nt, nt, stride=nt, tol=tol).snapshots[-1]
            out[s]["diff"].append(float(np.linalg.norm(p - ref) / np.linalg.norm(ref)))
    for s in schemes:
        d = out[s]["diff"]
        out[s]["ratio"] = [a / b for a, b in zip(d[:-1], d[1:])]
    return out
