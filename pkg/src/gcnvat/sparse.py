"""Compressed sparse row matrices for adjacency and feature storage.

The container owns the CSR invariants the rest of the package relies on;
the actual multiply kernels are delegated to scipy.sparse, which wraps the
same index/value arrays without copying.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix with explicit nonzero structure.

    Invariants (checked by :meth:`validate`):
      * ``row_offsets`` has length ``rows + 1``, is nondecreasing, starts at
        0 and ends at ``len(values)``;
      * ``col_indices`` lie in ``[0, cols)`` and are strictly increasing
        within each row;
      * matrices built through the public constructors carry no explicitly
        stored zeros.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    # -- construction ------------------------------------------------------

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, values, *, sum_duplicates=True):
        """Build from triplets, summing duplicates and pruning exact zeros."""
        coo = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (row_idx, col_idx)),
            shape=(rows, cols),
        )
        if sum_duplicates:
            coo.sum_duplicates()
        csr = coo.tocsr()
        csr.eliminate_zeros()
        csr.sort_indices()
        out = cls.from_scipy(csr)
        out.validate()
        return out

    @classmethod
    def from_dense(cls, array) -> "SparseMatrix":
        csr = sp.csr_matrix(np.asarray(array, dtype=np.float64))
        csr.eliminate_zeros()
        csr.sort_indices()
        return cls.from_scipy(csr)

    @classmethod
    def from_scipy(cls, csr: sp.csr_matrix) -> "SparseMatrix":
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def with_values(self, values: np.ndarray) -> "SparseMatrix":
        """Same sparsity structure, new values (no zero pruning)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError(f"value vector has shape {values.shape}, structure needs {self.values.shape}")
        return SparseMatrix(self.rows, self.cols, self.row_offsets, self.col_indices, values)

    # -- views -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @cached_property
    def row_index_array(self) -> np.ndarray:
        """Row index of each stored entry (COO-style companion to col_indices)."""
        return np.repeat(np.arange(self.rows), np.diff(self.row_offsets))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def transpose(self) -> "SparseMatrix":
        t = self.to_scipy().transpose().tocsr()
        t.sort_indices()
        return SparseMatrix.from_scipy(t)

    # -- kernels -----------------------------------------------------------

    def dot(self, dense: np.ndarray) -> np.ndarray:
        """self @ dense for a dense right-hand side."""
        return self.to_scipy() @ dense

    def t_dot(self, dense: np.ndarray) -> np.ndarray:
        """self.T @ dense without forming the transpose."""
        return self.to_scipy().T @ dense

    def gather(self, dense: np.ndarray) -> np.ndarray:
        """Values of a dense matrix at this matrix's nonzero positions."""
        return dense[self.row_index_array, self.col_indices]

    def scatter(self, entry_values: np.ndarray) -> np.ndarray:
        """Dense matrix holding entry_values at the nonzero positions, 0 elsewhere."""
        out = np.zeros(self.shape)
        out[self.row_index_array, self.col_indices] = entry_values
        return out

    # -- checks ------------------------------------------------------------

    def validate(self) -> "SparseMatrix":
        """Check the CSR invariants; raise ValueError on the first violation."""
        n_off = len(self.row_offsets)
        if n_off != self.rows + 1:
            raise ValueError(f"row_offsets has length {n_off}, expected rows+1={self.rows + 1}")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.nnz:
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if self.nnz:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.cols:
                raise ValueError("column index out of range")
            # strictly increasing within each row: the only allowed decreases
            # in the concatenated index stream are at row boundaries
            decreasing = np.nonzero(np.diff(self.col_indices) <= 0)[0] + 1
            boundaries = self.row_offsets[1:-1]
            if not np.all(np.isin(decreasing, boundaries)):
                raise ValueError("column indices must be strictly increasing within each row")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite stored value")
        return self

    def same_structure(self, other: "SparseMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    def allclose(self, other: "SparseMatrix", tol: float = 0.0) -> bool:
        if not self.same_structure(other):
            return False
        return np.allclose(self.values, other.values, rtol=0.0, atol=tol)
