"""Containers for observed data and factor matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation

DENSE = "all-observed-dense"
OBSERVED_ONLY = "observed-entries-only"


@dataclass(eq=False)
class ObservationMatrix:
    """Observed matrix ``V`` stored as coordinate triplets.

    In dense mode every cell is observed and the triplets are kept in
    row-major order, so ``values`` reshapes straight into the ``I x J``
    array. Otherwise only the listed cells are observed and everything else
    is missing (not zero).

    ``row_ids`` / ``col_ids`` optionally hold the raw identifiers that the
    contiguous 0-based indices were mapped from during ingestion.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    dense: bool = False
    nonnegative: bool = True
    row_ids: Optional[np.ndarray] = None
    col_ids: Optional[np.ndarray] = None
    _dense_cache: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.n_rows = int(self.n_rows)
        self.n_cols = int(self.n_cols)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.values)
        if self.rows.shape != (n,) or self.cols.shape != (n,):
            raise ContractViolation("rows, cols and values must be 1-D of equal length")
        if n:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ContractViolation("row index out of bounds")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ContractViolation("column index out of bounds")
        if self.nonnegative and n and self.values.min() < 0:
            raise ContractViolation("negative value in non-negative observation matrix")
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("non-finite observation")
        flat = self.rows * self.n_cols + self.cols
        if self.dense:
            if n != self.n_rows * self.n_cols or not np.array_equal(flat, np.arange(n)):
                raise ContractViolation("dense mode requires every cell in row-major order")
        elif n > 1 and len(np.unique(flat)) != n:
            raise ContractViolation("duplicate (row, col) coordinates")

    @classmethod
    def from_dense(cls, array, nonnegative: bool = True) -> "ObservationMatrix":
        array = np.asarray(array, dtype=float)
        if array.ndim != 2:
            raise ContractViolation("dense observations must be 2-D")
        n_rows, n_cols = array.shape
        rows, cols = np.divmod(np.arange(n_rows * n_cols), n_cols)
        out = cls(n_rows, n_cols, rows, cols, array.ravel().copy(), dense=True,
                  nonnegative=nonnegative)
        out._dense_cache = out.values.reshape(n_rows, n_cols)
        return out

    @classmethod
    def from_masked(cls, array, mask, nonnegative: bool = True) -> "ObservationMatrix":
        array = np.asarray(array, dtype=float)
        rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
        return cls(array.shape[0], array.shape[1], rows, cols, array[rows, cols],
                   nonnegative=nonnegative)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def n_observed(self) -> int:
        return len(self.values)

    @property
    def mask_mode(self) -> str:
        return DENSE if self.dense else OBSERVED_ONLY

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        if self.dense:
            if self._dense_cache is None:
                self._dense_cache = self.values.reshape(self.n_rows, self.n_cols)
            return self._dense_cache
        out = np.full(self.shape, fill, dtype=float)
        out[self.rows, self.cols] = self.values
        return out

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def subset(self, index) -> "ObservationMatrix":
        """Observed-entries-only matrix holding the selected entries."""
        index = np.asarray(index)
        return ObservationMatrix(self.n_rows, self.n_cols, self.rows[index],
                                 self.cols[index], self.values[index],
                                 nonnegative=self.nonnegative,
                                 row_ids=self.row_ids, col_ids=self.col_ids)

    def block(self, row_range: range, col_range: range) -> "ObservationMatrix":
        """Entries inside ``row_range x col_range`` with block-local indices."""
        r0, r1 = row_range.start, row_range.stop
        c0, c1 = col_range.start, col_range.stop
        if self.dense:
            return ObservationMatrix.from_dense(self.to_dense()[r0:r1, c0:c1],
                                                nonnegative=self.nonnegative)
        sel = (self.rows >= r0) & (self.rows < r1) & (self.cols >= c0) & (self.cols < c1)
        return ObservationMatrix(r1 - r0, c1 - c0, self.rows[sel] - r0,
                                 self.cols[sel] - c0, self.values[sel],
                                 nonnegative=self.nonnegative)

    def permuted(self, row_perm, col_perm) -> "ObservationMatrix":
        """Relabel so that new row ``a`` is old row ``row_perm[a]``."""
        row_perm = np.asarray(row_perm)
        col_perm = np.asarray(col_perm)
        if self.dense:
            return ObservationMatrix.from_dense(self.to_dense()[np.ix_(row_perm, col_perm)],
                                                nonnegative=self.nonnegative)
        inv_r = np.argsort(row_perm)
        inv_c = np.argsort(col_perm)
        return ObservationMatrix(self.n_rows, self.n_cols, inv_r[self.rows],
                                 inv_c[self.cols], self.values,
                                 nonnegative=self.nonnegative)

    def equals(self, other: "ObservationMatrix") -> bool:
        """Same shape and the same set of (row, col, value) triplets."""
        if self.shape != other.shape or self.n_observed != other.n_observed:
            return False
        a = np.lexsort((self.cols, self.rows))
        b = np.lexsort((other.cols, other.rows))
        return (np.array_equal(self.rows[a], other.rows[b])
                and np.array_equal(self.cols[a], other.cols[b])
                and np.array_equal(self.values[a], other.values[b]))


@dataclass(eq=False)
class FactorPair:
    """Dictionary ``w`` (I x K) and weights ``h`` (K x J)."""

    w: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        if self.w.ndim != 2 or self.h.ndim != 2 or self.w.shape[1] != self.h.shape[0]:
            raise ContractViolation(f"incompatible factor shapes {self.w.shape}, {self.h.shape}")

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "FactorPair":
        return FactorPair(self.w.copy(), self.h.copy())

    def reconstruction(self) -> np.ndarray:
        return np.abs(self.w) @ np.abs(self.h)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.h)))

    def identical(self, other: "FactorPair") -> bool:
        """Bitwise equality of both factors."""
        return (self.w.shape == other.w.shape and self.h.shape == other.h.shape
                and self.w.tobytes() == other.w.tobytes()
                and self.h.tobytes() == other.h.tobytes())
