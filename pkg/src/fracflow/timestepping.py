"""Coupled backward Euler and the decoupled D/L/U splittings.

A split writes ``A = A0 + A1``; each step solves
``(M/tau + A0) p^n = M p^{n-1}/tau + F^n - A1 p^{n-1}``. For the decoupled
kinds A0 is block diagonal or block triangular in ascending-permeability
order, so the step reduces to one solve per continuum.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import MulticontinuumSystem
from .linalg import DEFAULT_TOL, IluPreconditioner, SolverError, SolverReport, cg_solve

__all__ = [
    "SchemeKind",
    "SchemeSplit",
    "RunRecord",
    "StepError",
    "make_split",
    "permeability_order",
    "Integrator",
    "step",
    "run",
    "check_stability_condition",
]


class SchemeKind(enum.Enum):
    COUPLED = "coupled"
    D = "d"
    L = "l"
    U = "u"

    @classmethod
    def parse(cls, value) -> "SchemeKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"decoupledd": "d", "decoupledl": "l", "decoupledu": "u",
                   "d-scheme": "d", "l-scheme": "l", "u-scheme": "u"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}") from None

    @property
    def label(self) -> str:
        return "Coupled" if self is SchemeKind.COUPLED else f"{self.name}-scheme"


class StepError(SolverError):
    def __init__(self, message, continuum=None, step=None):
        super().__init__(message)
        self.continuum = continuum
        self.step = step


def permeability_order(system: MulticontinuumSystem) -> list[int]:
    """Continuum positions sorted by permeability, ties by id."""
    return sorted(range(system.L), key=lambda a: (system.perms[a], system.ids[a]))


@dataclass
class SchemeSplit:
    kind: SchemeKind
    A0: sp.csr_matrix
    A1: sp.csr_matrix
    order: list[int]  # solve order of continuum positions
    rank: np.ndarray  # position of each continuum in ascending-permeability order


def make_split(system: MulticontinuumSystem, kind) -> SchemeSplit:
    kind = SchemeKind.parse(kind)
    asc = permeability_order(system)
    rank = np.empty(system.L, dtype=np.int64)
    rank[asc] = np.arange(system.L)
    A = system.A.tocoo()
    if kind is SchemeKind.COUPLED:
        A1 = sp.csr_matrix(A.shape)
        return SchemeSplit(kind, system.A.copy(), A1, asc, rank)
    owner = system.continuum_of_dof()
    rr, rc = rank[owner[A.row]], rank[owner[A.col]]
    if kind is SchemeKind.D:
        keep = rr == rc
        order = asc
    elif kind is SchemeKind.L:
        keep = rr >= rc
        order = asc
    else:
        keep = rr <= rc
        order = asc[::-1]
    A0 = sp.csr_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
    A1 = sp.csr_matrix((A.data[~keep], (A.row[~keep], A.col[~keep])), shape=A.shape)
    for m in (A0, A1):
        m.sort_indices()
    return SchemeSplit(kind, A0, A1, list(order), rank)


@dataclass
class RunRecord:
    kind: SchemeKind
    tau: float
    n_steps: int
    times: np.ndarray
    snapshots: np.ndarray  # (n_saved, N)
    snapshot_steps: np.ndarray
    anorms: np.ndarray  # ||p^n||_A for n = 0..N_T
    reports: dict = field(default_factory=dict)  # solve target -> [SolverReport]
    solve_time: dict = field(default_factory=dict)
    errors: object = None

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def total_iterations(self, target) -> int:
        return sum(r.iterations for r in self.reports.get(target, []))

    def average_iterations(self, target) -> float:
        if self.n_steps == 0:
            return 0.0
        return self.total_iterations(target) / self.n_steps

    @property
    def total_time(self) -> float:
        return float(sum(self.solve_time.values()))


class Integrator:
    """Holds the per-run operators and preconditioners for a fixed tau."""

    def __init__(self, system: MulticontinuumSystem, split: SchemeSplit, tau: float,
                 tol: float = DEFAULT_TOL, maxit: int | None = None):
        if not tau > 0:
            raise ValueError("time step must be positive")
        self.system = system
        self.split = split
        self.tau = float(tau)
        self.tol = tol
        self.maxit = maxit
        self.Mtau = (system.M / self.tau).tocsr()
        if split.kind is SchemeKind.COUPLED:
            K = (self.Mtau + split.A0).tocsr()
            K.sort_indices()
            self.targets = ["all"]
            self.blocks = {"all": (K, IluPreconditioner(K), None)}
        else:
            self.targets = list(split.order)
            self.blocks = {}
            for a in split.order:
                rows = system.slice(a)
                K = (system.block(self.Mtau, a, a) + system.block(split.A0, a, a)).tocsr()
                K.sort_indices()
                sub = split.A0[rows, :].tocoo()
                out = (sub.col < rows.start) | (sub.col >= rows.stop)
                off = sp.csr_matrix((sub.data[out], (sub.row[out], sub.col[out])), shape=sub.shape)
                self.blocks[a] = (K, IluPreconditioner(K), off)

    def step(self, p_prev, t_n: float, index: int = 0):
        """Advance one step; returns ``(p_next, {target: SolverReport})``."""
        sys = self.system
        base = self.Mtau @ p_prev + sys.rhs(t_n)
        if self.split.kind is not SchemeKind.COUPLED:
            base = base - self.split.A1 @ p_prev
        reports = {}
        if self.split.kind is SchemeKind.COUPLED:
            K, pc, _ = self.blocks["all"]
            x, rep = self._solve(K, pc, base, p_prev, "all", index)
            return x, {"all": rep}
        p_next = np.array(p_prev, dtype=float, copy=True)
        for a in self.split.order:
            K, pc, off = self.blocks[a]
            rows = sys.slice(a)
            rhs = base[rows] - off @ p_next
            p_next[rows], reports[a] = self._solve(K, pc, rhs, p_prev[rows], a, index)
        return p_next, reports

    def _solve(self, K, pc, rhs, x0, target, index):
        try:
            return cg_solve(K, rhs, x0=x0, tol=self.tol, maxit=self.maxit, precond=pc)
        except SolverError as exc:
            who = "coupled system" if target == "all" else f"continuum {self.system.ids[target]}"
            raise StepError(f"step {index}, {who}: {exc}", continuum=target, step=index) from exc


def step(system, split, p_prev, t_n, tau, tol=DEFAULT_TOL, maxit=None):
    """Single step without reusing factorizations across calls."""
    return Integrator(system, split, tau, tol, maxit).step(np.asarray(p_prev, float), t_n)


def run(system: MulticontinuumSystem, kind, tau: float, n_steps: int, reference=None,
        stride: int = 1, tol: float = DEFAULT_TOL, maxit: int | None = None,
        p0=None, error_kind: str = "euclidean") -> RunRecord:
    """March ``n_steps`` steps from ``system.p0`` (or ``p0``).

    Snapshots are kept every ``stride`` steps plus the final one. With a
    reference trajectory (``(N_T + 1, N)`` array or a RunRecord on the same
    dofs), the per-step relative errors land in ``record.errors``.
    """
    split = make_split(system, kind)
    integ = Integrator(system, split, tau, tol, maxit)
    p = np.array(system.p0 if p0 is None else p0, dtype=float, copy=True)
    snaps, snap_steps = [p.copy()], [0]
    anorms = [system.anorm(p)]
    reports = {t: [] for t in integ.targets}
    solve_time = {t: 0.0 for t in integ.targets}
    for n in range(1, n_steps + 1):
        p, reps = integ.step(p, n * tau, n)
        for t, r in reps.items():
            reports[t].append(r)
            solve_time[t] += r.time
        anorms.append(system.anorm(p))
        if n % stride == 0 or n == n_steps:
            snaps.append(p.copy())
            snap_steps.append(n)
    rec = RunRecord(
        kind=split.kind,
        tau=float(tau),
        n_steps=int(n_steps),
        times=tau * np.asarray(snap_steps, dtype=float),
        snapshots=np.array(snaps),
        snapshot_steps=np.asarray(snap_steps),
        anorms=np.asarray(anorms),
        reports=reports,
        solve_time=solve_time,
    )
    if reference is not None:
        from .metrics import error_series

        ref = reference.snapshots if isinstance(reference, RunRecord) else np.asarray(reference)
        rec.errors = error_series(ref[1:], rec.snapshots[1:], weights=None
                                  if error_kind == "euclidean" else system.measure)
    return rec


def check_stability_condition(split: SchemeSplit, iterations: int = 50, seed: int = 0):
    """Estimate lambda_min of sym(A0 - A1) and test it against -1e-8 ||A||.

    Power iteration on ``s I - S`` with ``s = ||S||_inf`` (an upper bound of
    the spectral radius). The estimate never undershoots lambda_min, so a
    negative value is a certificate of indefiniteness.
    """
    S = split.A0 - split.A1
    S = (0.5 * (S + S.T)).tocsr()
    A = split.A0 + split.A1
    anorm = spla_norm(A)
    n = S.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)

    def power(op):
        x = v / np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            y = op(x)
            lam = float(x @ y)
            ny = np.linalg.norm(y)
            if ny == 0.0:
                return 0.0
            x = y / ny
        return lam

    shift = spla_norm(S)
    lam_min = shift - power(lambda x: shift * x - S @ x)
    return bool(lam_min >= -1e-8 * max(anorm, 1e-300)), float(lam_min)


def spla_norm(A) -> float:
    """Infinity norm of a sparse matrix."""
    if A.nnz == 0:
        return 0.0
    return float(abs(A).sum(axis=1).max())
