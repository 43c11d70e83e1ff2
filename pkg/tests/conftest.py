import numpy as np
import pytest

from fracflow.assembly import ContinuumSpec, CouplingSpec, WellSpec, assemble_system
from fracflow.geometry import FractureNetwork, build_grid, mesh_fractures

SEGMENTS = [
    [0.1, 0.2, 0.9, 0.7],
    [0.2, 0.8, 0.8, 0.15],
    [0.55, 0.05, 0.6, 0.95],
    [0.05, 0.5, 0.45, 0.52],
    [0.3, 0.9, 0.95, 0.88],
]


def two_continua(n=8, sigma=1.0, wells=True, kf=1e3, segments=SEGMENTS):
    grid = build_grid(n, n, 1.0 / n)
    fm = mesh_fractures(grid, FractureNetwork(np.array(segments)))
    continua = [ContinuumSpec(1, "matrix", 0.1, 1.0), ContinuumSpec(2, "fracture", 1.0, kf)]
    w = [WellSpec(2, (0.0, 0.3, 0.0, 0.4), 10.0, 1.2)] if wells else []
    return assemble_system(grid, fm, continua, [CouplingSpec((1, 2), sigma)], w)


def three_continua(n=8, s12=1.0, s13=1e-3, s23=1.0, wells=True, segments=SEGMENTS):
    grid = build_grid(n, n, 1.0 / n)
    fm = mesh_fractures(grid, FractureNetwork(np.array(segments)))
    continua = [ContinuumSpec(1, "matrix", 0.05, 1e-3), ContinuumSpec(2, "matrix", 0.1, 1.0),
                ContinuumSpec(3, "fracture", 1.0, 1e3)]
    couplings = [CouplingSpec((1, 2), s12), CouplingSpec((1, 3), s13), CouplingSpec((2, 3), s23)]
    w = [WellSpec(3, (0.0, 0.3, 0.0, 0.4), 10.0, 1.2)] if wells else []
    return assemble_system(grid, fm, continua, couplings, w)


@pytest.fixture
def sys2():
    return two_continua()


@pytest.fixture
def sys3():
    return three_continua()


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
