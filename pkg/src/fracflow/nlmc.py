"""Nonlocal multicontinuum (NLMC) upscaling.

For every coarse cell ``K_i`` and every continuum present in it, a basis
function is found by minimising the coupled fine-scale energy over the
oversampled region ``K_i^+`` subject to average constraints: mean one on
``K_i`` for its own continuum, mean zero on every other (cell, continuum)
pair in ``K_i^+``. The bases form the rows of ``R`` and give the nonlocal
coarse diffusion ``R D R^T``. Mass, exchange and source terms are projected
with the piecewise-constant averaging operator and cross-checked against
closed-form coarse-cell formulas.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import FRACTURE, MATRIX, MulticontinuumSystem
from .geometry import FractureMesh, StructuredGrid2D
from .linalg import DEFAULT_TOL, SolverError
from .timestepping import RunRecord, run

__all__ = [
    "CoarseGrid",
    "LocalSaddleProblem",
    "NlmcSpace",
    "BasisError",
    "AssemblyConsistencyError",
    "build_coarse_grid",
    "fracture_coarse_cells",
    "local_problem",
    "solve_basis",
    "compute_bases",
    "assemble_coarse",
    "build_nlmc",
    "average_fine_to_coarse",
    "run_coarse",
    "layer_energy_fraction",
    "save_basis_cache",
    "load_basis_cache",
]

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-8
CROSS_CHECK_TOL = 1e-8
_CACHE_MAGIC = b"FFNLMC01"
DEFAULT_LAYERS = 4


class BasisError(SolverError):
    pass


class AssemblyConsistencyError(RuntimeError):
    pass


def _coarse_of_cells(grid: StructuredGrid2D, cells, Nx: int, Ny: int) -> np.ndarray:
    ix, iy = grid.ij(cells)
    return (iy // (grid.ny // Ny)) * Nx + ix // (grid.nx // Nx)


def fracture_coarse_cells(grid: StructuredGrid2D, fmesh: FractureMesh, Nx: int, Ny: int) -> np.ndarray:
    """Coarse cell of each fracture cell (the coarse cell of its host)."""
    _check_divisible(grid, Nx, Ny)
    return _coarse_of_cells(grid, fmesh.host, Nx, Ny)


def _check_divisible(grid, Nx, Ny):
    if Nx < 1 or Ny < 1 or grid.nx % Nx or grid.ny % Ny:
        raise ValueError(f"fine grid {grid.nx}x{grid.ny} is not divisible by coarse grid {Nx}x{Ny}")


@dataclass
class CoarseGrid:
    """Fine-to-coarse maps for every continuum of a fine system.

    ``cell_of[a]`` maps continuum ``a``'s fine dofs to coarse cells;
    ``cells[a]`` lists the coarse cells carrying a dof of continuum ``a``
    (ascending), which fixes the coarse dof layout.
    """

    fine: StructuredGrid2D
    Nx: int
    Ny: int
    m: int
    cell_of: list
    cells: list

    def __post_init__(self):
        self.sizes = np.array([len(c) for c in self.cells], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.local_index = []
        for c in self.cells:
            idx = np.full(self.n_cells, -1, dtype=np.int64)
            idx[c] = np.arange(len(c))
            self.local_index.append(idx)

    @property
    def n_cells(self) -> int:
        return self.Nx * self.Ny

    @property
    def H(self) -> tuple[float, float]:
        return (self.fine.nx // self.Nx) * self.fine.h, (self.fine.ny // self.Ny) * self.fine.h

    @property
    def n_dofs(self) -> int:
        return int(self.offsets[-1])

    def ij(self, cell):
        cell = np.asarray(cell)
        return cell % self.Nx, cell // self.Nx

    def centers(self, cells=None) -> np.ndarray:
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        ix, iy = self.ij(cells)
        Hx, Hy = self.H
        x0, y0 = self.fine.origin
        return np.column_stack([x0 + (ix + 0.5) * Hx, y0 + (iy + 0.5) * Hy])

    def oversampled(self, i: int, layers: int | None = None) -> np.ndarray:
        """Coarse cells of K_i^+ (K_i grown by ``layers`` rings, clipped)."""
        m = self.m if layers is None else layers
        ci, cj = self.ij(i)
        xs = np.arange(max(ci - m, 0), min(ci + m, self.Nx - 1) + 1)
        ys = np.arange(max(cj - m, 0), min(cj + m, self.Ny - 1) + 1)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        return (Y * self.Nx + X).ravel()

    def coarse_dof(self, a: int, cell: int) -> int:
        k = self.local_index[a][cell]
        return -1 if k < 0 else int(self.offsets[a] + k)

    def prolongation_pattern(self, fine_sizes) -> sp.csr_matrix:
        """Indicator matrix P (coarse dofs x fine dofs), ones on K_i^a."""
        rows, cols = [], []
        off = np.concatenate([[0], np.cumsum(fine_sizes)])
        for a, cmap in enumerate(self.cell_of):
            rows.append(self.offsets[a] + self.local_index[a][cmap])
            cols.append(off[a] + np.arange(len(cmap)))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_dofs, int(off[-1])))


def build_coarse_grid(system: MulticontinuumSystem, Nx: int, Ny: int, m: int = DEFAULT_LAYERS) -> CoarseGrid:
    setup = system.setup
    if setup is None:
        raise ValueError("system carries no fine geometry; assemble it with assemble_system")
    grid = setup.grid
    _check_divisible(grid, Nx, Ny)
    if m < 1:
        raise ValueError("oversampling needs at least one layer")
    matrix_map = _coarse_of_cells(grid, np.arange(grid.n_cells), Nx, Ny)
    cell_of, cells = [], []
    for kind in system.kinds:
        cmap = matrix_map if kind == MATRIX else fracture_coarse_cells(grid, setup.fracture_mesh, Nx, Ny)
        cell_of.append(np.asarray(cmap, dtype=np.int64))
        cells.append(np.unique(cmap))
    return CoarseGrid(grid, int(Nx), int(Ny), int(m), cell_of, cells)


@dataclass
class LocalSaddleProblem:
    """Constrained energy minimisation on K_i^+ for one coarse cell.

    ``dofs`` are global fine dofs inside K_i^+ (exterior dofs are fixed to
    zero by omission). Row ``r`` of ``C`` averages continuum
    ``keys[r][0]`` over coarse cell ``keys[r][1]``. ``targets`` lists the
    continua that own a basis function on ``K_i``; column ``t`` of ``rhs``
    is the corresponding delta.
    """

    cell: int
    dofs: np.ndarray
    A: sp.csr_matrix
    C: sp.csr_matrix
    keys: list
    targets: list
    rhs: np.ndarray

    def matrix(self) -> sp.csc_matrix:
        return sp.bmat([[self.A, self.C.T], [self.C, None]], format="csc")


def _fine_coarse_map(system, cgrid) -> np.ndarray:
    return np.concatenate(cgrid.cell_of)


def local_problem(system: MulticontinuumSystem, cgrid: CoarseGrid, i: int,
                  energy=None, coarse_of_dof=None) -> LocalSaddleProblem:
    energy = (system.D + system.Q).tocsr() if energy is None else energy
    coarse_of_dof = _fine_coarse_map(system, cgrid) if coarse_of_dof is None else coarse_of_dof
    owner = system.continuum_of_dof()
    region = cgrid.oversampled(i)
    inside = np.isin(coarse_of_dof, region)
    dofs = np.flatnonzero(inside)
    A_loc = energy[dofs][:, dofs].tocsr()

    # one constraint row per (continuum, coarse cell) present in K_i^+
    pair = owner[dofs] * cgrid.n_cells + coarse_of_dof[dofs]
    keys_flat, row_of = np.unique(pair, return_inverse=True)
    w = system.measure[dofs]
    totals = np.bincount(row_of, weights=w)
    C = sp.csr_matrix((w / totals[row_of], (row_of, np.arange(dofs.size))),
                      shape=(keys_flat.size, dofs.size))
    keys = [(int(k // cgrid.n_cells), int(k % cgrid.n_cells)) for k in keys_flat]
    targets = [a for a in range(system.L) if cgrid.local_index[a][i] >= 0]
    rhs = np.zeros((dofs.size + len(keys), len(targets)))
    for t, a in enumerate(targets):
        rhs[dofs.size + keys.index((a, i)), t] = 1.0
    return LocalSaddleProblem(i, dofs, A_loc, C, keys, targets, rhs)


def solve_basis(problem: LocalSaddleProblem) -> np.ndarray:
    """Basis values on ``problem.dofs``, one column per target continuum."""
    n = problem.dofs.size
    # balance the constraint block against the energy block, then refine
    a_max = abs(problem.A).max() if problem.A.nnz else 1.0
    c_max = abs(problem.C).max() if problem.C.nnz else 1.0
    s = a_max / c_max
    C = problem.C * s
    K = sp.bmat([[problem.A, C.T], [C, None]], format="csc")
    b = problem.rhs.copy()
    b[n:] *= s
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise BasisError(f"singular local problem for coarse cell {problem.cell}: {exc}") from exc
    sol = lu.solve(b)
    for _ in range(2):
        sol += lu.solve(b - K @ sol)
    psi = sol[:n]
    resid = np.abs(problem.C @ psi - problem.rhs[n:]).max(axis=0) if n else np.zeros(1)
    for t, r in enumerate(np.atleast_1d(resid)):
        if not np.isfinite(r) or r > CONSTRAINT_TOL:
            raise BasisError(
                f"basis (cell {problem.cell}, continuum {problem.targets[t]}) violates its "
                f"constraints by {r:.3e}"
            )
    return psi


def _threads() -> int:
    env = os.environ.get("FRACFLOW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def compute_bases(system: MulticontinuumSystem, cgrid: CoarseGrid, threads: int | None = None) -> sp.csr_matrix:
    """All basis functions as the rows of R (coarse dofs x fine dofs)."""
    energy = (system.D + system.Q).tocsr()
    cmap = _fine_coarse_map(system, cgrid)

    def one(i):
        prob = local_problem(system, cgrid, i, energy, cmap)
        if not prob.targets:
            return i, None, None, None
        return i, prob.dofs, prob.targets, solve_basis(prob)

    workers = threads or _threads()
    cells = range(cgrid.n_cells)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, cells))
    else:
        results = [one(i) for i in cells]

    rows, cols, vals = [], [], []
    for i, dofs, targets, psi in results:
        if dofs is None:
            continue
        for t, a in enumerate(targets):
            col = psi[:, t]
            nz = col != 0.0
            rows.append(np.full(int(nz.sum()), cgrid.coarse_dof(a, i)))
            cols.append(dofs[nz])
            vals.append(col[nz])
    R = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(cgrid.n_dofs, system.n),
    )
    R.sort_indices()
    return R


@dataclass
class NlmcSpace:
    cgrid: CoarseGrid
    R: sp.csr_matrix
    P: sp.csr_matrix
    system: MulticontinuumSystem  # the coarse system
    Dbar: sp.csr_matrix
    direct: dict  # closed-form M, Q, W, F used in the cross-check
    fine_measure: np.ndarray

    @property
    def m(self) -> int:
        return self.cgrid.m

    def block(self, mat, a, b):
        return self.system.block(mat, a, b)

    def average(self, fine_vector) -> np.ndarray:
        return average_fine_to_coarse(fine_vector, self.cgrid, self.fine_measure, self.P)


def average_fine_to_coarse(fine_vector, cgrid: CoarseGrid, measure, P=None) -> np.ndarray:
    """Measure-weighted mean over each K_i^a; works on (..., N_fine) arrays."""
    if P is None:
        P = cgrid.prolongation_pattern([len(c) for c in cgrid.cell_of])
    measure = np.asarray(measure, dtype=float)
    totals = P @ measure
    v = np.asarray(fine_vector, dtype=float)
    if v.ndim == 1:
        return (P @ (measure * v)) / totals
    return ((P @ (measure[None, :] * v).T) / totals[:, None]).T


def _direct_operators(system: MulticontinuumSystem, cgrid: CoarseGrid):
    """Closed-form coarse M, Q, W, F for coefficients constant per coarse cell."""
    setup = system.setup
    grid, fm = setup.grid, setup.fracture_mesh
    Hx, Hy = cgrid.H
    Nc = cgrid.n_cells
    frac_len = np.zeros(Nc)
    if fm is not None and fm.n_cells:
        fcell = fracture_coarse_cells(grid, fm, cgrid.Nx, cgrid.Ny)
        frac_len = np.bincount(fcell, weights=fm.length, minlength=Nc)

    def size(a):
        return np.full(Nc, Hx * Hy) if system.kinds[a] == MATRIX else frac_len

    mass, src = [], []
    for a, spec in enumerate(setup.continua):
        cells = cgrid.cells[a]
        mass.append(spec.c * size(a)[cells])
        src.append(spec.f * size(a)[cells])
    F = np.concatenate(src)
    W = np.zeros(cgrid.n_dofs)
    sign = 1.0 if setup.well_sign == "injection" else -1.0
    pos = {cid: a for a, cid in enumerate(system.ids)}
    for w in setup.wells:
        a = pos[w.continuum]
        sel = w.selects(fm.midpoints)
        wl = np.bincount(fcell[sel], weights=fm.length[sel], minlength=Nc)
        dofs = cgrid.offsets[a] + cgrid.local_index[a][np.flatnonzero(wl)]
        W[dofs] += sign * w.q_w * wl[wl > 0]
        F[dofs] += sign * w.q_w * w.p_w * wl[wl > 0]

    blocks = {}
    for cp in setup.couplings:
        a, b = pos[cp.pair[0]], pos[cp.pair[1]]
        if system.kinds[a] == MATRIX and system.kinds[b] == MATRIX:
            per_cell = Hx * Hy if setup.colocated_measure else (grid.nx // cgrid.Nx) * (grid.ny // cgrid.Ny)
            shared = np.intersect1d(cgrid.cells[a], cgrid.cells[b])
            q = np.full(shared.size, cp.sigma * per_cell)
        else:
            f = b if system.kinds[b] == FRACTURE else a
            conn = np.bincount(fcell, weights=cp.sigma * fm.length / fm.distance, minlength=Nc)
            shared = cgrid.cells[f]
            q = conn[shared]
        ra, rb = cgrid.local_index[a][shared], cgrid.local_index[b][shared]
        blocks[(a, b)] = sp.csr_matrix((q, (ra, rb)), shape=(cgrid.sizes[a], cgrid.sizes[b]))
        blocks[(b, a)] = blocks[(a, b)].T.tocsr()
    Q = _exchange_matrix(blocks, cgrid.sizes)
    return {
        "M": sp.diags(np.concatenate(mass), format="csr"),
        "F_volume": np.concatenate(src),
        "Q": Q,
        "Qblocks": blocks,
        "W": sp.diags(W, format="csr"),
        "F": F,
        "measure": np.concatenate([size(a)[cgrid.cells[a]] for a in range(system.L)]),
    }


def _exchange_matrix(blocks: dict, sizes) -> sp.csr_matrix:
    L = len(sizes)
    grid = [[None] * L for _ in range(L)]
    for a in range(L):
        diag = np.zeros(sizes[a])
        for b in range(L):
            if (a, b) in blocks:
                diag += np.asarray(blocks[(a, b)].sum(axis=1)).ravel()
                grid[a][b] = -blocks[(a, b)]
        grid[a][a] = sp.diags(diag)
    Q = sp.bmat(grid, format="csr")
    Q.sort_indices()
    return Q


def _rel_diff(x, y) -> float:
    x = x.toarray() if sp.issparse(x) else np.asarray(x)
    y = y.toarray() if sp.issparse(y) else np.asarray(y)
    scale = max(np.abs(y).max(initial=0.0), np.abs(x).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(x - y).max() / scale)


def _zero_row_sums(X: sp.csr_matrix) -> sp.csr_matrix:
    """Flux form: shift the diagonal so that constants lie in the kernel."""
    out = (X - sp.diags(np.asarray(X @ np.ones(X.shape[1])).ravel())).tocsr()
    out.sort_indices()
    return out


def _sym(X) -> sp.csr_matrix:
    out = (0.5 * (X + X.T)).tocsr()
    out.sort_indices()
    return out


def assemble_coarse(system: MulticontinuumSystem, cgrid: CoarseGrid, R: sp.csr_matrix,
                    check: bool = True, exchange: str = "galerkin",
                    conservative: bool = True) -> NlmcSpace:
    """Coarse operators from the bases.

    ``Dbar = R D R^T`` (nonlocal, with inter-continuum blocks). ``exchange``
    selects how Q, W and F reach the coarse level: ``"galerkin"`` uses
    ``R X R^T`` and ``R F``; ``"direct"`` uses the per-coarse-cell formulas.
    M is always the diagonal ``c |K_i^a|``. With ``conservative`` the
    diagonals of Dbar and Qbar are reset so that rows sum to zero, which
    removes the leak left by truncating the bases to K_i^+.

    When ``check`` is on, M and the volumetric part of F obtained through
    the bases (``R M P^T``, ``R F``) and Q, W obtained by cell averaging
    (``P Q P^T``) must match the closed-form coarse formulas to 1e-8.
    """
    if exchange not in ("galerkin", "direct"):
        raise ValueError(f"unknown exchange projection {exchange!r}")
    P = cgrid.prolongation_pattern(system.sizes)
    Pt = P.T.tocsr()
    Rt = R.T.tocsr()
    Dbar = _sym(R @ system.D @ Rt)
    direct = _direct_operators(system, cgrid)
    if check:
        vol = np.concatenate([np.full(n, spec.f) for n, spec in zip(system.sizes, system.setup.continua)])
        routes = {
            "M": ((R @ system.M @ Pt).tocsr(), direct["M"]),
            "Q": ((P @ system.Q @ Pt).tocsr(), direct["Q"]),
            "W": ((P @ system.W @ Pt).tocsr(), direct["W"]),
            "F": (R @ (vol * system.measure), direct["F_volume"]),
        }
        for name, (proj, ref) in routes.items():
            err = _rel_diff(proj, ref)
            if err > CROSS_CHECK_TOL:
                raise AssemblyConsistencyError(
                    f"coarse {name}: projection and direct formulas differ by {err:.3e}"
                )
    if exchange == "galerkin":
        Q, W, F = _sym(R @ system.Q @ Rt), _sym(R @ system.W @ Rt), R @ system.F
    else:
        Q, W, F = direct["Q"], direct["W"], direct["F"]
    D = Dbar
    if conservative:
        D, Q = _zero_row_sums(Dbar), _zero_row_sums(Q)
    measure = P @ system.measure
    coarse = MulticontinuumSystem(
        ids=list(system.ids),
        kinds=list(system.kinds),
        perms=system.perms.copy(),
        sizes=cgrid.sizes.copy(),
        M=direct["M"],
        D=D,
        Q=Q,
        W=W,
        F=np.asarray(F, dtype=float),
        p0=average_fine_to_coarse(system.p0, cgrid, system.measure, P),
        Qblocks=direct["Qblocks"],
        measure=measure,
        label=f"coarse{cgrid.Nx}x{cgrid.Ny}",
    )
    return NlmcSpace(cgrid, R, P, coarse, Dbar, direct, system.measure)


def _cache_key(system: MulticontinuumSystem, cgrid: CoarseGrid) -> str:
    setup = system.setup
    h = hashlib.sha256()
    g = setup.grid
    h.update(json.dumps([g.nx, g.ny, g.h, list(g.origin), cgrid.Nx, cgrid.Ny, cgrid.m]).encode())
    if setup.fracture_mesh is not None:
        fm = setup.fracture_mesh
        for arr in (fm.p0, fm.p1, fm.edges, fm.edge_factor, fm.distance):
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr([(c.id, c.kind, c.k) for c in setup.continua]).encode())
    h.update(repr([(cp.pair, cp.sigma) for cp in setup.couplings]).encode())
    h.update(repr(setup.colocated_measure).encode())
    return h.hexdigest()[:24]


def save_basis_cache(path, R: sp.csr_matrix):
    """Header (magic, rows, cols, nnz) then little-endian int64 indptr/indices and float64 values."""
    R = R.tocsr()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<qqq", R.shape[0], R.shape[1], R.nnz))
        fh.write(R.indptr.astype("<i8").tobytes())
        fh.write(R.indices.astype("<i8").tobytes())
        fh.write(R.data.astype("<f8").tobytes())


def load_basis_cache(path) -> sp.csr_matrix:
    raw = Path(path).read_bytes()
    if raw[:8] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a basis cache file")
    nr, nc, nnz = struct.unpack("<qqq", raw[8:32])
    o = 32
    indptr = np.frombuffer(raw, "<i8", nr + 1, o)
    o += 8 * (nr + 1)
    indices = np.frombuffer(raw, "<i8", nnz, o)
    o += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, o)
    return sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(nr, nc))


def build_nlmc(system: MulticontinuumSystem, Nx: int, Ny: int, m: int = DEFAULT_LAYERS,
               threads: int | None = None, cache_dir=None, check: bool = True,
               exchange: str = "galerkin", conservative: bool = True) -> NlmcSpace:
    """Coarse grid, bases (optionally cached on disk) and coarse operators.

    Wells and sources of ``system`` are carried to the coarse level by the
    averaging projection.
    """
    cgrid = build_coarse_grid(system, Nx, Ny, m)
    R = None
    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"nlmc_{_cache_key(system, cgrid)}.bin"
        if cache_file.exists():
            R = load_basis_cache(cache_file)
            log.info("loaded %d bases from %s", R.shape[0], cache_file)
    if R is None:
        R = compute_bases(system, cgrid, threads)
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            save_basis_cache(cache_file, R)
    return assemble_coarse(system, cgrid, R, check=check, exchange=exchange, conservative=conservative)


def run_coarse(space: NlmcSpace, kind, tau: float, n_steps: int, reference=None,
               tol: float = DEFAULT_TOL, maxit=None, stride: int = 1) -> RunRecord:
    """Time-step the coarse system; ``reference`` is a coarse trajectory."""
    return run(space.system, kind, tau, n_steps, reference=reference, tol=tol, maxit=maxit, stride=stride)


def layer_energy_fraction(system: MulticontinuumSystem, cgrid: CoarseGrid, i: int, column: int = 0) -> float:
    """Share of a basis function's energy that sits in the outermost ring of K_i^+."""
    prob = local_problem(system, cgrid, i)
    psi = solve_basis(prob)[:, column]
    cmap = _fine_coarse_map(system, cgrid)[prob.dofs]
    inner = cgrid.oversampled(i, cgrid.m - 1)
    ring = ~np.isin(cmap, inner)
    total = psi @ (prob.A @ psi)
    sub = prob.A[ring][:, ring]
    return float((psi[ring] @ (sub @ psi[ring])) / total)
