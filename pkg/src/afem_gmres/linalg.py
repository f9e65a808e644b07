"""Sparse operators, small dense factorizations, and the Givens-updated
Hessenberg least-squares problem used by GMRES."""
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = ["SparseOperator", "spmv", "rspmv", "DenseFactor", "HessenbergLS"]


class SparseOperator:
    """Compressed sparse row operator with sorted, duplicate-free columns."""

    __slots__ = ("csr", "_csr_t")

    def __init__(self, matrix):
        csr = sp.csr_matrix(matrix, dtype=float)
        csr.sum_duplicates()
        csr.sort_indices()
        self.csr = csr
        self._csr_t = None

    @property
    def csr_t(self):
        """The transpose in CSR form, built on first use (the operator is not mutated)."""
        if self._csr_t is None:
            self._csr_t = self.csr.T.tocsr()
        return self._csr_t

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        return cls(sp.coo_matrix((vals, (rows, cols)), shape=shape))

    @classmethod
    def identity(cls, n):
        return cls(sp.identity(n, format="csr"))

    @property
    def shape(self):
        return self.csr.shape

    @property
    def nnz(self):
        return self.csr.nnz

    @property
    def indptr(self):
        return self.csr.indptr

    @property
    def indices(self):
        return self.csr.indices

    @property
    def data(self):
        return self.csr.data

    @property
    def T(self):
        return SparseOperator(self.csr_t)

    def diagonal(self):
        return self.csr.diagonal()

    def toarray(self):
        return self.csr.toarray()

    def __matmul__(self, x):
        if isinstance(x, SparseOperator):
            return SparseOperator(self.csr @ x.csr)
        return spmv(self, x)

    def __repr__(self):
        return f"SparseOperator(shape={self.shape}, nnz={self.nnz})"

    def submatrix_entries(self, rows, cols):
        """Entries ``A[rows, cols]`` elementwise (zeros outside the pattern).

        ``rows`` and ``cols`` broadcast against each other; lookup is by
        binary search in the globally sorted (row, col) keys.
        """
        n = self.shape[1]
        csr = self.csr
        row_of = np.repeat(np.arange(csr.shape[0], dtype=np.int64), np.diff(csr.indptr))
        keys = row_of * n + csr.indices
        want = np.asarray(rows, dtype=np.int64) * n + np.asarray(cols, dtype=np.int64)
        pos = np.searchsorted(keys, want)
        pos = np.minimum(pos, keys.size - 1)
        hit = keys[pos] == want
        return np.where(hit, csr.data[pos], 0.0)


def spmv(A, x):
    """y = A x."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: operator {A.shape}, vector {x.shape}")
    return A.csr @ x


def rspmv(A, y):
    """x = A^T y."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: operator {A.shape}, vector {y.shape}")
    return A.csr_t @ y


class DenseFactor:
    """Cholesky factorization of a small SPD matrix."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("square matrix required")
        self.n = matrix.shape[0]
        if self.n:
            self._cho = sla.cho_factor(matrix, lower=True)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError("dimension mismatch")
        if not self.n:
            return b.copy()
        return sla.cho_solve(self._cho, b)


class HessenbergLS:
    """Incremental solution of ``min_z || beta e1 - H z ||_2`` for upper Hessenberg H.

    Columns are appended one at a time; previous Givens rotations are
    applied to the new column and one new rotation annihilates its
    subdiagonal entry.
    """

    def __init__(self, beta, capacity=8):
        self.beta = float(beta)
        self.k = 0
        self._R = np.zeros((capacity + 1, capacity))
        self._g = np.zeros(capacity + 1)
        self._g[0] = self.beta
        self._cs = np.zeros(capacity)
        self._sn = np.zeros(capacity)
        self.residual = abs(self.beta)

    def _grow(self):
        cap = self._R.shape[1] * 2
        R = np.zeros((cap + 1, cap))
        R[: self._R.shape[0], : self._R.shape[1]] = self._R
        g = np.zeros(cap + 1)
        g[: self._g.size] = self._g
        self._R, self._g = R, g
        self._cs = np.concatenate([self._cs, np.zeros(cap - self._cs.size)])
        self._sn = np.concatenate([self._sn, np.zeros(cap - self._sn.size)])

    def append(self, column):
        """Append column ``H[:k+2, k]`` (length k + 2); return ``(y, residual)``."""
        column = np.asarray(column, dtype=float)
        k = self.k
        if column.shape != (k + 2,):
            raise ValueError(f"column must have length {k + 2}")
        if k >= self._R.shape[1]:
            self._grow()
        h = column.copy()
        for i in range(k):
            c, s = self._cs[i], self._sn[i]
            h[i], h[i + 1] = c * h[i] + s * h[i + 1], -s * h[i] + c * h[i + 1]
        a, b = h[k], h[k + 1]
        rho = np.hypot(a, b)
        if rho == 0.0:
            c, s = 1.0, 0.0
        else:
            c, s = a / rho, b / rho
        self._cs[k], self._sn[k] = c, s
        h[k], h[k + 1] = rho, 0.0
        self._R[: k + 2, k] = h
        gk = self._g[k]
        self._g[k], self._g[k + 1] = c * gk, -s * gk
        self.k = k + 1
        self.residual = abs(self._g[k + 1])
        return self.solution(), self.residual

    def solution(self):
        k = self.k
        if k == 0:
            return np.zeros(0)
        R = self._R[:k, :k]
        return sla.solve_triangular(R, self._g[:k], lower=False)
