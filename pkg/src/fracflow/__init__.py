"""Single-phase flow in multicontinuum fractured media: fine finite volumes,
coupled and decoupled time stepping, and NLMC upscaling."""

from .assembly import ContinuumSpec, CouplingSpec, MulticontinuumSystem, WellSpec, assemble_system
from .experiments import build_fine_system, load_scenario, paper_scenario, run_scenario
from .geometry import FractureNetwork, build_grid, mesh_fractures, read_fracture_file
from .linalg import cg_solve, direct_solve, ilu0_factor
from .nlmc import build_nlmc, run_coarse
from .timestepping import SchemeKind, make_split, run

__version__ = "0.1.0"

__all__ = [
    "ContinuumSpec",
    "CouplingSpec",
    "WellSpec",
    "MulticontinuumSystem",
    "assemble_system",
    "FractureNetwork",
    "build_grid",
    "mesh_fractures",
    "read_fracture_file",
    "cg_solve",
    "direct_solve",
    "ilu0_factor",
    "build_nlmc",
    "run_coarse",
    "SchemeKind",
    "make_split",
    "run",
    "build_fine_system",
    "load_scenario",
    "paper_scenario",
    "run_scenario",
]
