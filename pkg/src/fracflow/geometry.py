"""Structured matrix grid and embedded fracture meshing.

Fractures are line segments clipped against the square cells of the matrix
grid; every resulting piece lives in exactly one host cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "StructuredGrid2D",
    "FractureNetwork",
    "FractureMesh",
    "build_grid",
    "mesh_fractures",
    "read_fracture_file",
    "write_fracture_file",
]

# relative tolerance (in units of h) below which a piece is discarded
DEGENERATE_TOL = 1e-12
_QUAD_POINTS = 4


@dataclass(frozen=True)
class StructuredGrid2D:
    nx: int
    ny: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, x0 + self.nx * self.h, y0, y0 + self.ny * self.h

    def index(self, ix, iy):
        """Row-major cell index: x runs fastest."""
        return np.asarray(iy) * self.nx + np.asarray(ix)

    def ij(self, idx):
        idx = np.asarray(idx)
        return idx % self.nx, idx // self.nx

    def centers(self) -> np.ndarray:
        ix, iy = self.ij(np.arange(self.n_cells))
        x0, y0 = self.origin
        return np.column_stack([x0 + (ix + 0.5) * self.h, y0 + (iy + 0.5) * self.h])

    def areas(self) -> np.ndarray:
        return np.full(self.n_cells, self.cell_area)

    def faces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Interior facets as ``(left, right, facet_length, center_distance)``."""
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        ix, iy = ix.ravel(), iy.ravel()
        cells = self.index(ix, iy)
        east = ix < self.nx - 1
        north = iy < self.ny - 1
        left = np.concatenate([cells[east], cells[north]])
        right = np.concatenate([cells[east] + 1, cells[north] + self.nx])
        n = left.size
        return left, right, np.full(n, self.h), np.full(n, self.h)

    def locate(self, points) -> np.ndarray:
        """Host cell of each point; points on a shared edge go to the lower index."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x0, y0 = self.origin
        ix = _axis_index((pts[:, 0] - x0) / self.h, self.nx)
        iy = _axis_index((pts[:, 1] - y0) / self.h, self.ny)
        return self.index(ix, iy)


def _axis_index(u: np.ndarray, n: int) -> np.ndarray:
    r = np.rint(u)
    on_line = np.abs(u - r) < 1e-11
    idx = np.where(on_line, r - 1, np.floor(u)).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def build_grid(nx: int, ny: int, h: float, origin=(0.0, 0.0)) -> StructuredGrid2D:
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"grid dimensions must be positive integers, got {nx}x{ny}")
    if not h > 0:
        raise ValueError(f"cell size must be positive, got {h}")
    return StructuredGrid2D(int(nx), int(ny), float(h), (float(origin[0]), float(origin[1])))


@dataclass(frozen=True)
class FractureNetwork:
    segments: np.ndarray  # (n, 4): x1 y1 x2 y2

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        lengths = np.hypot(seg[:, 2] - seg[:, 0], seg[:, 3] - seg[:, 1])
        bad = np.flatnonzero(~(lengths > 0))
        if bad.size:
            raise ValueError(f"segment {bad[0]} has zero length")
        seg.setflags(write=False)
        object.__setattr__(self, "segments", seg)

    def __len__(self):
        return len(self.segments)

    @property
    def lengths(self) -> np.ndarray:
        s = self.segments
        return np.hypot(s[:, 2] - s[:, 0], s[:, 3] - s[:, 1])


def read_fracture_file(path) -> FractureNetwork:
    """Parse ``x1 y1 x2 y2`` lines; ``#`` lines and blank lines are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return FractureNetwork(np.array(rows, dtype=float).reshape(-1, 4))


def write_fracture_file(path, network: FractureNetwork, header: str | None = None):
    lines = [f"# {header}"] if header else []
    lines += [" ".join(f"{v:.6f}" for v in seg) for seg in network.segments]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class FractureMesh:
    """Lower-dimensional fracture cells with their matrix connections.

    ``edge_factor`` is the geometric transmissibility |E|/d between two
    fracture cells (multiply by the fracture permeability). Matrix
    connections are one per cell: host ``host[l]``, interface length
    ``length[l]`` and distance ``distance[l]``.
    """

    segment: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    length: np.ndarray
    host: np.ndarray
    distance: np.ndarray
    edges: np.ndarray  # (ne, 2) int, i < j
    edge_factor: np.ndarray
    n_segments: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_cells(self) -> int:
        return len(self.length)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.p0 + self.p1)

    def connections(self):
        """(matrix cell, fracture cell, |E|, d) for every matrix-fracture link."""
        idx = np.arange(self.n_cells)
        return self.host, idx, self.length, self.distance

    def neighbors(self, l: int) -> np.ndarray:
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == l, 1], e[e[:, 1] == l, 0]]))


def _segment_intersections(seg: np.ndarray) -> list[list[float]]:
    """Parameters along each segment where it meets another one."""
    n = len(seg)
    hits: list[list[float]] = [[] for _ in range(n)]
    p = seg[:, :2]
    r = seg[:, 2:] - seg[:, :2]
    for a in range(n):
        for b in range(a + 1, n):
            denom = r[a, 0] * r[b, 1] - r[a, 1] * r[b, 0]
            if abs(denom) < 1e-14 * np.dot(r[a], r[a]) ** 0.5 * np.dot(r[b], r[b]) ** 0.5:
                continue  # parallel or collinear: no point junction
            qp = p[b] - p[a]
            ta = (qp[0] * r[b, 1] - qp[1] * r[b, 0]) / denom
            tb = (qp[0] * r[a, 1] - qp[1] * r[a, 0]) / denom
            eps = 1e-12
            if -eps <= ta <= 1 + eps and -eps <= tb <= 1 + eps:
                hits[a].append(min(max(ta, 0.0), 1.0))
                hits[b].append(min(max(tb, 0.0), 1.0))
    return hits


def _line_crossings(a: float, b: float, lo: float, h: float, n: int) -> np.ndarray:
    if a == b:
        return np.empty(0)
    lines = lo + h * np.arange(n + 1)
    with np.errstate(over="ignore"):  # near-parallel segments push t far outside [0, 1]
        t = (lines - a) / (b - a)
    return t[(t > 0) & (t < 1)]


def _average_line_distance(host_origin: np.ndarray, h: float, seg: np.ndarray) -> np.ndarray:
    """Mean distance from the host cell to the segment's supporting line.

    Midpoint rule on a 4x4 subgrid of the cell.
    """
    s = (np.arange(_QUAD_POINTS) + 0.5) / _QUAD_POINTS * h
    qx, qy = np.meshgrid(s, s, indexing="xy")
    qx, qy = qx.ravel(), qy.ravel()
    px = host_origin[:, 0:1] + qx[None, :]
    py = host_origin[:, 1:2] + qy[None, :]
    d = seg[:, 2:] - seg[:, :2]
    norm = np.hypot(d[:, 0], d[:, 1])
    cross = (px - seg[:, 0:1]) * d[:, 1:2] - (py - seg[:, 1:2]) * d[:, 0:1]
    return np.abs(cross).mean(axis=1) / norm


def mesh_fractures(grid: StructuredGrid2D, network: FractureNetwork) -> FractureMesh:
    """Clip every segment against the grid and link the pieces.

    Pieces meeting at a point (consecutive pieces of one segment, or pieces of
    different segments at an intersection) are connected with a star-delta
    transmissibility built from half-piece lengths; for two collinear pieces
    this is 1 / (distance between midpoints).
    """
    seg = np.asarray(network.segments, dtype=float)
    x0, x1, y0, y1 = grid.extent
    tol = 1e-9 * grid.h
    outside = (
        (seg[:, [0, 2]] < x0 - tol) | (seg[:, [0, 2]] > x1 + tol)
        | (seg[:, [1, 3]] < y0 - tol) | (seg[:, [1, 3]] > y1 + tol)
    ).any(axis=1)
    if outside.any():
        raise ValueError(f"segment {np.flatnonzero(outside)[0]} leaves the domain {grid.extent}")

    hits = _segment_intersections(seg)
    min_len = DEGENERATE_TOL * grid.h
    seg_ids, starts, ends = [], [], []
    for s, (ax, ay, bx, by) in enumerate(seg):
        ts = np.concatenate([
            [0.0, 1.0],
            _line_crossings(ax, bx, x0, grid.h, grid.nx),
            _line_crossings(ay, by, y0, grid.h, grid.ny),
            hits[s],
        ])
        ts = np.unique(ts)
        length = np.hypot(bx - ax, by - ay)
        for ta, tb in zip(ts[:-1], ts[1:]):
            if (tb - ta) * length < min_len:
                continue
            seg_ids.append(s)
            starts.append((ax + ta * (bx - ax), ay + ta * (by - ay)))
            ends.append((ax + tb * (bx - ax), ay + tb * (by - ay)))

    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    p0 = np.asarray(starts, dtype=float).reshape(-1, 2)
    p1 = np.asarray(ends, dtype=float).reshape(-1, 2)
    lengths = np.hypot(*(p1 - p0).T)
    host = grid.locate(0.5 * (p0 + p1)) if len(lengths) else np.empty(0, dtype=np.int64)
    hx, hy = grid.ij(host)
    host_origin = np.column_stack([x0 + hx * grid.h, y0 + hy * grid.h])
    distance = _average_line_distance(host_origin, grid.h, seg[seg_ids])

    edges, factors = _junction_edges(p0, p1, lengths, 1e-9 * grid.h)
    return FractureMesh(
        segment=seg_ids,
        p0=p0,
        p1=p1,
        length=lengths,
        host=np.asarray(host, dtype=np.int64),
        distance=distance,
        edges=edges,
        edge_factor=factors,
        n_segments=len(seg),
    )


def _junction_edges(p0, p1, lengths, tol):
    n = len(lengths)
    if n == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    ends = np.vstack([p0, p1])
    owner = np.concatenate([np.arange(n), np.arange(n)])

    parent = np.arange(2 * n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in sorted(cKDTree(ends).query_pairs(tol)):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(2 * n)])

    half = 2.0 / lengths  # 1 / (half length)
    pairs: dict[tuple[int, int], float] = {}
    order = np.argsort(roots, kind="stable")
    groups = np.split(order, np.flatnonzero(np.diff(roots[order])) + 1)
    for grp in groups:
        cells = np.unique(owner[grp])
        if len(cells) < 2:
            continue
        total = half[cells].sum()
        for ia in range(len(cells)):
            for ib in range(ia + 1, len(cells)):
                a, b = int(cells[ia]), int(cells[ib])
                pairs[(a, b)] = pairs.get((a, b), 0.0) + half[a] * half[b] / total
    keys = sorted(pairs)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    factors = np.array([pairs[k] for k in keys], dtype=float)
    return edges, factors
