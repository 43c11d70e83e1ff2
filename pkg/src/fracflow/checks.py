"""Invariant checks on built-in micro-cases (``fracflow check``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import ContinuumSpec, CouplingSpec, WellSpec, assemble_system
from .geometry import FractureNetwork, build_grid, mesh_fractures
from .nlmc import build_nlmc, local_problem, solve_basis
from .timestepping import make_split, run

__all__ = ["CheckResult", "micro_system", "run_checks"]

MICRO_SEGMENTS = [
    [0.1, 0.2, 0.9, 0.7],
    [0.2, 0.8, 0.8, 0.15],
    [0.55, 0.05, 0.6, 0.95],
]


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def micro_system(n: int = 8, sigma: float = 1.0, wells: bool = True, segments=None):
    """Two continua (matrix, fracture) on an n x n grid of the unit square."""
    grid = build_grid(n, n, 1.0 / n)
    fm = mesh_fractures(grid, FractureNetwork(np.array(segments or MICRO_SEGMENTS)))
    continua = [ContinuumSpec(1, "matrix", 0.1, 1.0), ContinuumSpec(2, "fracture", 1.0, 1e3)]
    w = [WellSpec(2, (0.0, 0.3, 0.0, 0.4), 10.0, 1.2)] if wells else []
    return assemble_system(grid, fm, continua, [CouplingSpec((1, 2), sigma)], w)


def _assembly(sys_) -> CheckResult:
    A = sys_.A
    amax = abs(A).max()
    asym = abs(A - A.T).max() if (A - A.T).nnz else 0.0
    nw = sys_.without_wells()
    null = np.abs(nw.A @ np.ones(nw.n)).max()
    rng = np.random.default_rng(1)
    quad = min(float(v @ (A @ v)) / float(v @ v) for v in rng.standard_normal((20, sys_.n)))
    ok = asym == 0.0 and null <= 1e-10 * amax and quad >= -1e-10 * amax
    return CheckResult("assembly: symmetric, A 1 = 0, PSD", ok,
                       f"asym={asym:.1e} |A1|={null:.1e} min vAv/vv={quad:.3e}")


def _oracle(sys_, tau=0.01, nt=5) -> CheckResult:
    rec = run(sys_, "coupled", tau, nt, tol=1e-12)
    K = (sys_.M / tau + sys_.A).toarray()
    p = sys_.p0.copy()
    worst = 0.0
    for n in range(1, nt + 1):
        p = np.linalg.solve(K, sys_.M @ p / tau + sys_.rhs(n * tau))
        worst = max(worst, np.linalg.norm(rec.snapshots[n] - p) / np.linalg.norm(p))
    return CheckResult("coupled scheme matches dense backward Euler", worst <= 1e-8, f"max rel diff {worst:.1e}")


def _stability(sys_, label) -> CheckResult:
    nw = sys_.without_wells()
    rng = np.random.default_rng(2)
    p0 = rng.standard_normal(nw.n)
    bad = []
    for kind in ("coupled", "d", "l", "u"):
        rec = run(nw, kind, 0.01, 10, p0=p0, tol=1e-12)
        a = rec.anorms
        if np.any(a[1:] > a[:-1] + 1e-8 * a[0]):
            bad.append(kind)
    return CheckResult(f"{label}: A-norm nonincreasing for all schemes", not bad,
                       "ok" if not bad else f"increase in {bad}")


def _decoupling() -> CheckResult:
    sys_ = micro_system(sigma=0.0)
    ref = run(sys_, "coupled", 0.01, 5, tol=1e-12)
    worst = 0.0
    for kind in ("d", "l", "u"):
        rec = run(sys_, kind, 0.01, 5, tol=1e-12)
        worst = max(worst, np.abs(rec.snapshots - ref.snapshots).max() / np.abs(ref.snapshots).max())
    return CheckResult("sigma = 0: decoupled equals coupled", worst <= 1e-10, f"max rel diff {worst:.1e}")


def _nlmc(sys_) -> list[CheckResult]:
    space = build_nlmc(sys_, 2, 2, m=1, threads=1)
    cg = space.cgrid
    worst = 0.0
    for i in range(cg.n_cells):
        prob = local_problem(sys_, cg, i)
        psi = solve_basis(prob)
        n = prob.dofs.size
        worst = max(worst, np.abs(prob.C @ psi - prob.rhs[n:]).max())
    A = space.system.A
    asym = abs(A - A.T).max() / abs(A).max()
    Dbar = space.Dbar
    dnull = np.abs(Dbar @ np.ones(Dbar.shape[0])).max() / abs(Dbar).max()
    return [
        CheckResult("NLMC: basis constraints", worst <= 1e-8, f"max residual {worst:.1e}"),
        CheckResult("NLMC: coarse operator symmetric", asym <= 1e-10, f"rel asym {asym:.1e}"),
        CheckResult("NLMC: R D R^T 1 = 0 when K_i^+ is the domain", dnull <= 1e-10, f"{dnull:.1e}"),
    ]


def run_checks() -> list[CheckResult]:
    sys_ = micro_system()
    tiny = micro_system(n=4, segments=[[0.1, 0.3, 0.9, 0.6]])
    out = [_assembly(sys_), _oracle(tiny), _stability(sys_, "fine"), _decoupling()]
    out += _nlmc(sys_)
    coarse = build_nlmc(sys_, 4, 4, m=2, threads=1).system
    out.append(_stability(coarse, "coarse"))
    return out
