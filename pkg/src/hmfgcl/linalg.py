"""Sparse/dense kernels used by propagation and factorization.

Dense matrices are plain ``float64`` numpy arrays. ``SparseMatrix`` is a
validated CSR container; products are delegated to ``scipy.sparse`` whose CSR
kernels accumulate each output row sequentially in index order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, RangeError, ShapeError

__all__ = [
    "SparseMatrix",
    "SvdResult",
    "spmm",
    "spmm_t",
    "truncated_svd",
    "frobenius_distance",
]


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0:
            raise ShapeError("indptr must have length rows + 1 and start at 0")
        if np.any(np.diff(indptr) < 0):
            raise ShapeError("indptr must be monotone")
        if indices.shape != data.shape or indptr[-1] != len(data):
            raise ShapeError("indices/data length must equal indptr[-1]")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ShapeError("column index out of range")
        if len(indices) > 1:
            within = np.ones(len(indices) - 1, dtype=bool)
            cuts = indptr[1:-1]
            cuts = cuts[(cuts > 0) & (cuts < len(indices))]
            within[cuts - 1] = False
            bad = np.flatnonzero(within & (np.diff(indices) <= 0))
            if len(bad):
                row = int(np.searchsorted(indptr, bad[0], side="right") - 1)
                raise ShapeError(f"column indices not strictly increasing in row {row}")
        if not np.all(np.isfinite(data)) or np.any(data == 0):
            raise ShapeError("values must be finite and nonzero")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        csr = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_coo(cls, rows, cols, r, c, values) -> "SparseMatrix":
        """Build from triplets. Duplicate coordinates are summed."""
        coo = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(r), np.asarray(c))),
            shape=(rows, cols),
        )
        return cls.from_scipy(coo)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        csr = sp.csr_matrix(m, dtype=np.float64)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def todense(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self._csr.T)

    def row_coords(self) -> np.ndarray:
        """Row index of every stored value."""
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.S)

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _check_dense(b, name="B") -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {b.shape}")
    return b


def spmm(a: SparseMatrix, b) -> np.ndarray:
    """Return ``a @ b`` for sparse ``a`` and dense ``b``."""
    b = _check_dense(b)
    if a.cols != b.shape[0]:
        raise ShapeError(f"spmm: A is {a.shape}, B is {b.shape}")
    return np.asarray(a.to_scipy() @ b)


def spmm_t(a: SparseMatrix, b) -> np.ndarray:
    """Return ``a.T @ b`` without building the transposed CSR."""
    b = _check_dense(b)
    if a.rows != b.shape[0]:
        raise ShapeError(f"spmm_t: A is {a.shape}, B is {b.shape}")
    # .T of a csr_matrix is a csc view over the same buffers
    return np.asarray(a.to_scipy().T @ b)


def _operator(a):
    if isinstance(a, SparseMatrix):
        return a.to_scipy(), a.shape
    if sp.issparse(a):
        return sp.csr_matrix(a, dtype=np.float64), a.shape
    arr = _check_dense(a, "A")
    return arr, arr.shape


def _orthonormalize(y: np.ndarray, stage: str) -> np.ndarray:
    try:
        q, _ = np.linalg.qr(y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"QR failed during {stage}: {exc}") from exc
    if not np.all(np.isfinite(q)):
        raise NumericalError(
            f"QR produced non-finite values during {stage} "
            f"(input max |y| = {np.max(np.abs(y)) if y.size else 0.0:g})"
        )
    return q


def truncated_svd(a, q: int, oversample: int = 8, power_iters: int = 4, seed: int = 0) -> SvdResult:
    """Rank-``q`` SVD by randomized range finding with subspace iteration.

    A Gaussian test matrix with ``q + oversample`` columns sketches the range
    of ``a``; each power iteration re-orthonormalizes by QR after both the
    ``a.T`` and ``a`` products. Singular values come out descending and each
    left singular vector is sign-fixed so its largest-magnitude entry is
    nonnegative.
    """
    op, (m, n) = _operator(a)
    if not 1 <= q <= min(m, n):
        raise RangeError(f"rank q={q} outside [1, {min(m, n)}]")
    width = min(q + max(oversample, 0), min(m, n))
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, width))

    basis = _orthonormalize(np.asarray(op @ omega), "range sketch")
    for it in range(power_iters):
        w = _orthonormalize(np.asarray(op.T @ basis), f"power iteration {it} (A^T)")
        basis = _orthonormalize(np.asarray(op @ w), f"power iteration {it} (A)")

    small = np.asarray(op.T @ basis).T  # basis^T A, width x n
    try:
        ub, s, vt = np.linalg.svd(small, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD of projected {small.shape} matrix failed: {exc}") from exc
    u = basis @ ub[:, :q]
    s = s[:q]
    v = vt[:q].T.copy()

    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(q)] < 0, -1.0, 1.0)
    return SvdResult(U=u * signs, S=s, V=v * signs)


def frobenius_distance(a, factors, dense_limit: int = 4_000_000) -> float:
    """``||a - P Q^T||_F`` for a low-rank pair ``(P, Q)``.

    Small problems (``rows * cols <= dense_limit``) are evaluated directly.
    Larger ones use ``||A||^2 - 2<A, PQ^T> + ||PQ^T||^2`` so the dense
    product is never formed; that path loses absolute accuracy near zero
    residual through cancellation.
    """
    p, qm = factors
    p = _check_dense(p, "P")
    qm = _check_dense(qm, "Q")
    if isinstance(a, SparseMatrix):
        csr = a.to_scipy()
    else:
        csr = sp.csr_matrix(_check_dense(a, "A"))
    m, n = csr.shape
    if p.shape[0] != m or qm.shape[0] != n or p.shape[1] != qm.shape[1]:
        raise ShapeError(f"A is {(m, n)}, P is {p.shape}, Q is {qm.shape}")

    if m * n <= dense_limit:
        return float(np.linalg.norm(csr.toarray() - p @ qm.T))

    coo = csr.tocoo()
    a_sq = float(np.dot(coo.data, coo.data))
    cross = float(np.dot(coo.data, np.einsum("ij,ij->i", p[coo.row], qm[coo.col])))
    low_sq = float(np.sum((p.T @ p) * (qm.T @ qm)))
    return float(np.sqrt(max(a_sq - 2.0 * cross + low_sq, 0.0)))
