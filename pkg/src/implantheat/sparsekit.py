"""Sparse SPD linear algebra: CSR wrapper, IC(0), and preconditioned CG.

The conjugate-gradient driver accepts either a matrix or any callable
operator, so it serves both the voxel FEM systems (assembled CSR) and
the matrix-free reduced system of the 3D-1D coupling solver.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import ConvergenceError, FactorizationError, SolverError

__all__ = ["SparseSpd", "IncompleteCholesky", "ic0_factorize", "pcg"]

log = logging.getLogger(__name__)


class SparseSpd:
    """Compressed-row symmetric positive-definite matrix.

    Thin validating wrapper around a canonical ``scipy.sparse.csr_matrix``;
    the heavy operations (matvec, triangular pieces) stay in scipy/numba.
    """

    def __init__(self, matrix, validate: bool = True):
        m = sp.csr_matrix(matrix).copy()
        m.sum_duplicates()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise SolverError(f"matrix must be square, got {m.shape}")
        diag = m.diagonal()
        if np.any(diag <= 0):
            raise SolverError("diagonal must be present and positive")
        if validate:
            scale = np.abs(m.data).max() if m.nnz else 1.0
            asym = abs(m - m.T)
            if asym.nnz and asym.data.max() > 1e-10 * scale:
                raise SolverError("matrix is not symmetric")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def dot(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    __matmul__ = dot

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def lower_csr(self) -> sp.csr_matrix:
        """Lower triangle including the diagonal, canonical CSR."""
        low = sp.tril(self.matrix, format="csr")
        low.sort_indices()
        return low


class IncompleteCholesky:
    """Zero-fill incomplete Cholesky factor with the input's lower pattern."""

    def __init__(self, n, indptr, indices, data, shift: float = 0.0):
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self.shift = shift

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Apply (L L^T)^-1 to b."""
        y = np.empty_like(b)
        _kernels.lower_solve(self.n, self.indptr, self.indices, self.data, b, y)
        x = np.empty_like(b)
        _kernels.lower_transpose_solve(self.n, self.indptr, self.indices, self.data, y, x)
        return x

    __call__ = solve

    def factor_csr(self) -> sp.csr_matrix:
        """The factor L as a scipy matrix (for testing/inspection)."""
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))


def ic0_factorize(a, shift_seed: float = 1e-8, max_shift_doublings: int = 40) -> IncompleteCholesky:
    """IC(0) factorization of an SPD matrix.

    A non-positive pivot triggers a diagonal shift A + alpha I with
    alpha = shift_seed * max(diag), doubling until the factorization
    succeeds; a persistent breakdown raises FactorizationError.
    """
    if not isinstance(a, SparseSpd):
        a = SparseSpd(a, validate=False)
    low = a.lower_csr()
    n = a.n
    indptr = low.indptr.astype(np.int64)
    indices = low.indices.astype(np.int64)
    base = low.data.astype(float)
    diag_pos = indptr[1:] - 1
    if not np.array_equal(indices[diag_pos], np.arange(n)):
        raise FactorizationError("diagonal entry missing from some row")

    max_diag = base[diag_pos].max()
    shift = 0.0
    for attempt in range(max_shift_doublings + 1):
        data = base.copy()
        if shift:
            data[diag_pos] += shift
        bad_row = _kernels.ic0_factor_inplace(n, indptr, indices, data)
        if bad_row < 0:
            if shift:
                log.debug("ic0: succeeded with diagonal shift %.3e", shift)
            return IncompleteCholesky(n, indptr, indices, data, shift=shift)
        shift = shift_seed * max_diag if shift == 0.0 else 2.0 * shift
    raise FactorizationError(
        f"IC(0) breakdown persists after shift {shift:.3e} (row {bad_row})")


def _as_operator(a):
    if callable(a) and not sp.issparse(a) and not isinstance(a, np.ndarray):
        return a
    if isinstance(a, SparseSpd):
        return a.dot
    if sp.issparse(a):
        return lambda x: a @ x
    m = np.asarray(a)
    return lambda x: m @ x


def _as_preconditioner(m):
    if m is None:
        return lambda r: r
    if isinstance(m, IncompleteCholesky):
        return m.solve
    if callable(m):
        return m
    raise SolverError(f"unusable preconditioner type {type(m).__name__}")


def pcg(a, b, m=None, rtol=1e-7, maxit=None, x0=None, callback=None):
    """Preconditioned conjugate gradients for SPD operators.

    Parameters
    ----------
    a : matrix, SparseSpd, or callable x -> A x (must be SPD)
    b : right-hand side
    m : preconditioner (None, IncompleteCholesky, or callable r -> M^-1 r)
    rtol : target on ||b - A x|| / ||b||
    maxit : iteration cap (default: problem size)
    x0 : optional warm start
    callback : called as callback(x, r) after each iteration with views of
        the current iterate and residual (do not mutate them)

    Returns
    -------
    x, iterations, residual_history (relative residuals, starting at iteration 0)

    Raises
    ------
    ConvergenceError at the iteration cap; SolverError on negative
    curvature (operator not positive definite).
    """
    apply_a = _as_operator(a)
    apply_m = _as_preconditioner(m)
    b = np.asarray(b, dtype=float)
    n = len(b)
    if maxit is None:
        maxit = max(n, 100)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b), 0, np.array([0.0])

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.asarray(x0, dtype=float).copy()
        r = b - apply_a(x)

    history = [np.linalg.norm(r) / norm_b]
    if history[0] <= rtol:
        return x, 0, np.array(history)

    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    for k in range(maxit):
        q = apply_a(p)
        pq = float(p @ q)
        if pq <= 0.0:
            raise SolverError(
                f"negative curvature at iteration {k}: operator is not positive definite")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        res = np.linalg.norm(r) / norm_b
        history.append(res)
        if callback is not None:
            callback(x, r)
        if res <= rtol:
            return x, k + 1, np.array(history)
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"PCG did not reach rtol={rtol:.1e} in {maxit} iterations (residual {history[-1]:.3e})",
        iterations=maxit, residual=history[-1])
