"""Sparse solvers: ILU(0)-preconditioned conjugate gradients and a direct solve.

The CSR kernels are compiled with numba; matrices are ``scipy.sparse``
CSR with sorted column indices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolverReport",
    "SolverError",
    "ConvergenceError",
    "IndefiniteError",
    "FactorizationError",
    "SingularMatrixError",
    "IluPreconditioner",
    "ilu0_factor",
    "cg_solve",
    "direct_solve",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-8


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class IndefiniteError(SolverError):
    pass


class FactorizationError(SolverError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SingularMatrixError(SolverError):
    pass


@dataclass
class SolverReport:
    iterations: int
    residual: float
    time: float
    converged: bool = True


def _as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=float)
    if not A.has_sorted_indices:
        A = A.sorted_indices()
    A.sum_duplicates()
    return A


@numba.njit(cache=True)
def _ilu0_kernel(indptr, indices, data, diag_tol):
    n = indptr.size - 1
    lu = data.copy()
    diag = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                diag[i] = p
                break
        if diag[i] < 0:
            return lu, diag, i
    where = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        start, stop = indptr[i], indptr[i + 1]
        for p in range(start, stop):
            where[indices[p]] = p
        for p in range(start, stop):
            k = indices[p]
            if k >= i:
                break
            lu[p] /= lu[diag[k]]
            mult = lu[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                w = where[indices[q]]
                if w >= 0:
                    lu[w] -= mult * lu[q]
        for p in range(start, stop):
            where[indices[p]] = -1
        if abs(lu[diag[i]]) <= diag_tol:
            return lu, diag, i
    return lu, diag, -1


@numba.njit(cache=True)
def _ilu_apply(indptr, indices, lu, diag, r, out):
    n = r.size
    for i in range(n):
        s = r[i]
        for p in range(indptr[i], diag[i]):
            s -= lu[p] * out[indices[p]]
        out[i] = s
    for i in range(n - 1, -1, -1):
        s = out[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            s -= lu[p] * out[indices[p]]
        out[i] = s / lu[diag[i]]


@numba.njit(cache=True)
def _spmv(indptr, indices, data, x, out):
    for i in range(x.size):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * x[indices[p]]
        out[i] = s


@numba.njit(cache=True)
def _pcg(indptr, indices, data, b, x, tol_abs, maxit, use_prec, lu_ptr, lu_idx, lu, diag, curv_tol):
    """Returns (iterations, status); status 0 ok, 1 maxit, 2 breakdown."""
    n = b.size
    r = np.empty(n)
    z = np.empty(n)
    q = np.empty(n)
    _spmv(indptr, indices, data, x, q)
    for i in range(n):
        r[i] = b[i] - q[i]
    it = 0
    while True:
        rn = np.sqrt(np.dot(r, r))
        if rn <= tol_abs:
            return it, 0
        if it >= maxit:
            return it, 1
        if use_prec:
            _ilu_apply(lu_ptr, lu_idx, lu, diag, r, z)
        else:
            z[:] = r
        p = z.copy()
        rz = np.dot(r, z)
        # inner loop on the recursive residual; the outer loop re-checks the true one
        while it < maxit:
            _spmv(indptr, indices, data, p, q)
            pq = np.dot(p, q)
            pp = np.dot(p, p)
            if pq <= curv_tol * pp:
                return it, 2
            alpha = rz / pq
            x += alpha * p
            r -= alpha * q
            it += 1
            if np.sqrt(np.dot(r, r)) <= tol_abs:
                break
            if use_prec:
                _ilu_apply(lu_ptr, lu_idx, lu, diag, r, z)
            else:
                z[:] = r
            rz_new = np.dot(r, z)
            beta = rz_new / rz
            rz = rz_new
            p = z + beta * p
        _spmv(indptr, indices, data, x, q)
        for i in range(n):
            r[i] = b[i] - q[i]


class IluPreconditioner:
    """Zero fill-in incomplete LU factors stored on the pattern of A.

    The strictly lower part holds L (unit diagonal implied), the rest holds U.
    """

    def __init__(self, A):
        A = _as_csr(A)
        self.shape = A.shape
        self.indptr = A.indptr.astype(np.int64)
        self.indices = A.indices.astype(np.int64)
        dmax = np.abs(A.diagonal()).max() if A.shape[0] else 0.0
        lu, diag, bad = _ilu0_kernel(self.indptr, self.indices, A.data.astype(float), 1e-14 * dmax)
        if bad >= 0:
            raise FactorizationError(f"ILU(0): zero or missing pivot in row {bad}", row=int(bad))
        self.lu = lu
        self.diag = diag

    def apply(self, r) -> np.ndarray:
        r = np.ascontiguousarray(r, dtype=float)
        out = np.empty_like(r)
        _ilu_apply(self.indptr, self.indices, self.lu, self.diag, r, out)
        return out

    __call__ = apply

    def factors(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Return (L, U) as explicit sparse matrices."""
        n = self.shape[0]
        m = sp.csr_matrix((self.lu, self.indices, self.indptr), shape=self.shape)
        L = sp.tril(m, k=-1, format="csr") + sp.identity(n, format="csr")
        U = sp.triu(m, k=0, format="csr")
        return L, U


def ilu0_factor(A) -> IluPreconditioner:
    return IluPreconditioner(A)


def cg_solve(A, b, x0=None, tol=DEFAULT_TOL, maxit=None, precond="ilu0"):
    """Preconditioned CG until ||b - Ax|| <= tol ||b||.

    ``precond`` is ``"ilu0"``, ``None`` or a prebuilt :class:`IluPreconditioner`.
    Returns ``(x, SolverReport)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    A = _as_csr(A)
    b = np.ascontiguousarray(b, dtype=float)
    n = b.size
    if maxit is None:
        maxit = 10 * max(n, 1)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, time.perf_counter() - t0)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)

    if precond == "ilu0":
        precond = IluPreconditioner(A)
    if precond is None:
        args = (np.zeros(1, np.int64), np.zeros(1, np.int64), np.zeros(1), np.zeros(1, np.int64))
        use = False
    else:
        args = (precond.indptr, precond.indices, precond.lu, precond.diag)
        use = True
    anorm = np.abs(A.data).max() if A.nnz else 0.0
    it, status = _pcg(
        A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data, b, x,
        tol * bnorm, int(maxit), use, *args, 1e-14 * anorm,
    )
    res = np.linalg.norm(b - A @ x) / bnorm
    report = SolverReport(int(it), float(res), time.perf_counter() - t0, status == 0)
    if status == 2:
        raise IndefiniteError(f"CG breakdown: non-positive curvature after {it} iterations")
    if status == 1:
        report.converged = False
        raise ConvergenceError(
            f"CG did not converge in {maxit} iterations (relative residual {res:.3e})", report
        )
    return x, report


def direct_solve(A, b) -> np.ndarray:
    """Sparse LU solve; raises :class:`SingularMatrixError` on singular input."""
    A = sp.csc_matrix(A, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("direct solve produced non-finite values")
    return x
