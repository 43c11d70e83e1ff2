"""Finite-volume operators for multicontinuum flow.

Every continuum lives either on the matrix grid (``kind="matrix"``) or on the
embedded fracture mesh (``kind="fracture"``). Global unknowns are ordered by
continuum, in the order the continua are given.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import FractureMesh, StructuredGrid2D

__all__ = [
    "ContinuumSpec",
    "CouplingSpec",
    "WellSpec",
    "MulticontinuumSystem",
    "FineSetup",
    "UnsupportedConfiguration",
    "assemble_diffusion",
    "assemble_mass",
    "assemble_coupling",
    "assemble_system",
]

MATRIX = "matrix"
FRACTURE = "fracture"


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class ContinuumSpec:
    id: int
    kind: str
    c: float
    k: float
    f: float = 0.0
    initial: float = 1.0

    def __post_init__(self):
        if self.kind not in (MATRIX, FRACTURE):
            raise ValueError(f"continuum {self.id}: unknown kind {self.kind!r}")
        if self.c < 0 or self.k < 0:
            raise ValueError(f"continuum {self.id}: c and k must be nonnegative")


@dataclass(frozen=True)
class CouplingSpec:
    pair: tuple[int, int]
    sigma: float

    def __post_init__(self):
        a, b = self.pair
        if a == b:
            raise ValueError(f"coupling of continuum {a} with itself")
        if self.sigma < 0:
            raise ValueError(f"coupling {self.pair}: sigma must be nonnegative")
        object.__setattr__(self, "pair", (int(a), int(b)))

    @property
    def key(self) -> tuple[int, int]:
        return tuple(sorted(self.pair))


@dataclass(frozen=True)
class WellSpec:
    """Well on the fracture cells whose midpoint falls in ``rect``.

    ``rect`` is ``(xmin, xmax, ymin, ymax)``.
    """

    continuum: int
    rect: tuple[float, float, float, float]
    q_w: float
    p_w: float

    def selects(self, points: np.ndarray) -> np.ndarray:
        x0, x1, y0, y1 = self.rect
        return (points[:, 0] >= x0) & (points[:, 0] <= x1) & (points[:, 1] >= y0) & (points[:, 1] <= y1)


def _mesh_measure(mesh) -> np.ndarray:
    if isinstance(mesh, StructuredGrid2D):
        return mesh.areas()
    return np.asarray(mesh.length, dtype=float)


def _mesh_size(mesh) -> int:
    return mesh.n_cells


def assemble_diffusion(mesh, k: float) -> sp.csr_matrix:
    """TPFA diffusion matrix with homogeneous Neumann boundaries."""
    n = _mesh_size(mesh)
    if isinstance(mesh, StructuredGrid2D):
        left, right, area, dist = mesh.faces()
        trans = k * area / dist
    else:
        left, right = mesh.edges[:, 0], mesh.edges[:, 1]
        trans = k * mesh.edge_factor
    rows = np.concatenate([left, right, left, right])
    cols = np.concatenate([right, left, left, right])
    vals = np.concatenate([-trans, -trans, trans, trans])
    return _csr(rows, cols, vals, (n, n))


def assemble_mass(mesh, c: float) -> sp.csr_matrix:
    return sp.diags(c * _mesh_measure(mesh), format="csr")


def _csr(rows, cols, vals, shape) -> sp.csr_matrix:
    out = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def assemble_coupling(
    grid: StructuredGrid2D,
    fracture_mesh: FractureMesh | None,
    kinds: tuple[str, str],
    sigma: float,
    colocated_measure: bool = True,
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Exchange block Q_ab and its transpose Q_ba.

    Co-located continua exchange cell by cell (sigma times the cell area,
    or plain sigma when ``colocated_measure`` is off). A matrix continuum and
    the fracture continuum exchange through the connectivity
    sigma |E| / d between each fracture cell and its host.
    """
    ka, kb = kinds
    if ka == FRACTURE and kb == FRACTURE:
        raise UnsupportedConfiguration("coupling between two fracture continua is not supported")
    if ka == MATRIX and kb == MATRIX:
        w = grid.areas() if colocated_measure else np.ones(grid.n_cells)
        q = sp.diags(sigma * w, format="csr")
        return q, q.copy()
    if fracture_mesh is None:
        raise UnsupportedConfiguration("fracture continuum requires a fracture mesh")
    host, frac, area, dist = fracture_mesh.connections()
    vals = sigma * area / dist
    q_mf = _csr(host, frac, vals, (grid.n_cells, fracture_mesh.n_cells))
    q_fm = q_mf.T.tocsr()
    q_fm.sort_indices()
    if ka == MATRIX:
        return q_mf, q_fm
    return q_fm, q_mf


@dataclass
class MulticontinuumSystem:
    """Block operators of ``M dp/dt + A p = F`` with ``A = D + Q + W``.

    ``W`` holds the well productivity on the diagonal. For coarse systems
    ``D`` may carry off-diagonal continuum blocks.
    """

    ids: list[int]
    kinds: list[str]
    perms: np.ndarray  # permeability of each continuum, drives L/U ordering
    sizes: np.ndarray
    M: sp.csr_matrix
    D: sp.csr_matrix
    Q: sp.csr_matrix
    W: sp.csr_matrix
    F: np.ndarray
    p0: np.ndarray
    Dblocks: list = field(default_factory=list)
    Qblocks: dict = field(default_factory=dict)
    measure: np.ndarray | None = None
    source: Callable[[float], np.ndarray] | None = None
    label: str = "fine"
    setup: "FineSetup | None" = None

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.A = (self.D + self.Q + self.W).tocsr()
        self.A.sort_indices()

    @property
    def L(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def slice(self, a: int) -> slice:
        return slice(int(self.offsets[a]), int(self.offsets[a + 1]))

    def block(self, mat, a: int, b: int):
        return mat[self.slice(a), self.slice(b)]

    def continuum_of_dof(self) -> np.ndarray:
        return np.repeat(np.arange(self.L), self.sizes)

    def position(self, cid: int) -> int:
        return self.ids.index(cid)

    def rhs(self, t: float) -> np.ndarray:
        if self.source is None:
            return self.F
        return self.F + self.source(t)

    def without_wells(self) -> "MulticontinuumSystem":
        zero = sp.csr_matrix(self.W.shape)
        setup = self.setup
        if setup is not None:
            setup = FineSetup(setup.grid, setup.fracture_mesh, setup.continua, setup.couplings,
                              (), setup.well_sign, setup.colocated_measure)
        return _replace(self, W=zero, F=np.zeros_like(self.F), source=None, setup=setup)

    def with_initial(self, p0) -> "MulticontinuumSystem":
        return _replace(self, p0=np.asarray(p0, dtype=float).copy())

    def anorm(self, p) -> float:
        return float(np.sqrt(max(p @ (self.A @ p), 0.0)))


@dataclass(frozen=True)
class FineSetup:
    """Inputs a fine system was assembled from (needed for upscaling)."""

    grid: StructuredGrid2D
    fracture_mesh: FractureMesh | None
    continua: tuple
    couplings: tuple
    wells: tuple
    well_sign: str
    colocated_measure: bool


def _replace(sys: MulticontinuumSystem, **changes) -> MulticontinuumSystem:
    kw = dict(
        ids=sys.ids, kinds=sys.kinds, perms=sys.perms, sizes=sys.sizes, M=sys.M, D=sys.D,
        Q=sys.Q, W=sys.W, F=sys.F, p0=sys.p0, Dblocks=sys.Dblocks, Qblocks=sys.Qblocks,
        measure=sys.measure, source=sys.source, label=sys.label, setup=sys.setup,
    )
    kw.update(changes)
    return MulticontinuumSystem(**kw)


def assemble_system(
    grid: StructuredGrid2D,
    fracture_mesh: FractureMesh | None,
    continua: Sequence[ContinuumSpec],
    couplings: Sequence[CouplingSpec] = (),
    wells: Sequence[WellSpec] = (),
    well_sign: str = "injection",
    colocated_measure: bool = True,
) -> MulticontinuumSystem:
    """Assemble M, D, Q, the well matrix W and F for all continua.

    With ``well_sign="injection"`` a well contributes ``q_w (p_w - p)`` per
    unit fracture length; ``"literal"`` flips it to ``q_w (p - p_w)``.
    """
    ids = [c.id for c in continua]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate continuum ids in {ids}")
    if well_sign not in ("injection", "literal"):
        raise ValueError(f"unknown well sign convention {well_sign!r}")
    pos = {cid: i for i, cid in enumerate(ids)}
    meshes = []
    for c in continua:
        if c.kind == FRACTURE:
            if fracture_mesh is None:
                raise UnsupportedConfiguration(f"continuum {c.id} needs a fracture mesh")
            meshes.append(fracture_mesh)
        else:
            meshes.append(grid)
    sizes = np.array([_mesh_size(m) for m in meshes])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    L = len(continua)

    Dblocks = [assemble_diffusion(m, c.k) for m, c in zip(meshes, continua)]
    Mblocks = [assemble_mass(m, c.c) for m, c in zip(meshes, continua)]
    measure = np.concatenate([_mesh_measure(m) for m in meshes])

    Qblocks: dict[tuple[int, int], sp.csr_matrix] = {}
    seen = set()
    for cp in couplings:
        for cid in cp.pair:
            if cid not in pos:
                raise ValueError(f"coupling {cp.pair} refers to unknown continuum {cid}")
        if cp.key in seen:
            raise ValueError(f"duplicate coupling for pair {cp.key}")
        seen.add(cp.key)
        a, b = pos[cp.pair[0]], pos[cp.pair[1]]
        qab, qba = assemble_coupling(
            grid, fracture_mesh, (continua[a].kind, continua[b].kind), cp.sigma, colocated_measure
        )
        Qblocks[(a, b)] = qab
        Qblocks[(b, a)] = qba

    grid_q = [[None] * L for _ in range(L)]
    for a in range(L):
        diag = sp.csr_matrix((sizes[a], sizes[a]))
        for b in range(L):
            if (a, b) in Qblocks:
                rowsum = np.asarray(Qblocks[(a, b)].sum(axis=1)).ravel()
                diag = diag + sp.diags(rowsum)
                grid_q[a][b] = -Qblocks[(a, b)]
        grid_q[a][a] = diag
    Q = sp.bmat(grid_q, format="csr")
    D = sp.block_diag(Dblocks, format="csr")
    M = sp.block_diag(Mblocks, format="csr")

    N = int(offsets[-1])
    wdiag = np.zeros(N)
    F = np.concatenate([c.f * _mesh_measure(m) for c, m in zip(continua, meshes)]).astype(float)
    sign = 1.0 if well_sign == "injection" else -1.0
    for w in wells:
        if w.continuum not in pos:
            raise ValueError(f"well refers to unknown continuum {w.continuum}")
        a = pos[w.continuum]
        if continua[a].kind != FRACTURE:
            raise UnsupportedConfiguration("wells are attached to fracture continua only")
        sel = np.flatnonzero(w.selects(fracture_mesh.midpoints))
        idx = offsets[a] + sel
        wdiag[idx] += sign * w.q_w * fracture_mesh.length[sel]
        F[idx] += sign * w.q_w * w.p_w * fracture_mesh.length[sel]

    p0 = np.concatenate([np.full(s, c.initial, dtype=float) for s, c in zip(sizes, continua)])
    for mat in (Q, D, M):
        mat.sort_indices()
    return MulticontinuumSystem(
        ids=ids,
        kinds=[c.kind for c in continua],
        perms=np.array([c.k for c in continua], dtype=float),
        sizes=sizes,
        M=M,
        D=D,
        Q=Q,
        W=sp.diags(wdiag, format="csr"),
        F=F,
        p0=p0,
        Dblocks=Dblocks,
        Qblocks=Qblocks,
        measure=measure,
        setup=FineSetup(grid, fracture_mesh, tuple(continua), tuple(couplings), tuple(wells),
                        well_sign, colocated_measure),
    )
