"""Block grids, diagonal parts and part schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .data import ObservationMatrix
from .errors import ConfigurationError

CYCLIC = "cyclic"
RANDOM = "size-proportional-random"


def split_range(n: int, b: int) -> List[range]:
    """Split ``range(n)`` into ``b`` contiguous ranges whose sizes differ by
    at most one, larger ranges first."""
    base, extra = divmod(n, b)
    out, start = [], 0
    for i in range(b):
        stop = start + base + (1 if i < extra else 0)
        out.append(range(start, stop))
        start = stop
    return out


@dataclass(frozen=True)
class BlockGrid:
    n_rows: int
    n_cols: int
    row_partition: Tuple[range, ...]
    col_partition: Tuple[range, ...]

    @property
    def B(self) -> int:
        return len(self.row_partition)

    def row_block_of(self, i):
        """Row-block index for row index(es) ``i``."""
        bounds = np.array([r.stop for r in self.row_partition])
        return np.searchsorted(bounds, i, side="right")

    def col_block_of(self, j):
        bounds = np.array([c.stop for c in self.col_partition])
        return np.searchsorted(bounds, j, side="right")


def build_grid(n_rows: int, n_cols: int, B: int) -> BlockGrid:
    """Near-equal contiguous ``B x B`` grid over an ``n_rows x n_cols`` matrix."""
    if int(B) != B or not 1 <= B <= min(n_rows, n_cols):
        raise ConfigurationError(f"B must be an integer in [1, {min(n_rows, n_cols)}], got {B}")
    B = int(B)
    return BlockGrid(n_rows, n_cols, tuple(split_range(n_rows, B)), tuple(split_range(n_cols, B)))


@dataclass(frozen=True)
class Block:
    row_block: int
    col_block: int
    rows: range
    cols: range

    @property
    def area(self) -> int:
        return len(self.rows) * len(self.cols)


@dataclass(frozen=True)
class Part:
    """``B`` blocks sharing no row range and no column range.

    ``size`` is the number of observed entries covered by the part; for
    dense data this equals the cell area.
    """

    index: int
    blocks: Tuple[Block, ...]
    size: int

    @property
    def area(self) -> int:
        return sum(b.area for b in self.blocks)


def diagonal_parts(grid: BlockGrid, block_counts: Optional[np.ndarray] = None) -> List[Part]:
    """The ``B`` diagonal shifts of the grid: part ``d`` pairs row range ``b``
    with column range ``(b + d) mod B``.

    ``block_counts[r, c]`` gives observed entries per block; cell areas are
    used when omitted (dense data).
    """
    B = grid.B
    parts = []
    for d in range(B):
        blocks = tuple(Block(b, (b + d) % B, grid.row_partition[b],
                             grid.col_partition[(b + d) % B]) for b in range(B))
        if block_counts is None:
            size = sum(blk.area for blk in blocks)
        else:
            size = int(sum(block_counts[blk.row_block, blk.col_block] for blk in blocks))
        parts.append(Part(d, blocks, size))
    return parts


def block_counts(grid: BlockGrid, v: ObservationMatrix) -> np.ndarray:
    """Observed entries per block as a ``B x B`` integer array."""
    B = grid.B
    if v.dense:
        rs = np.array([len(r) for r in grid.row_partition])
        cs = np.array([len(c) for c in grid.col_partition])
        return np.outer(rs, cs).astype(np.int64)
    rb = grid.row_block_of(v.rows)
    cb = grid.col_block_of(v.cols)
    return np.bincount(rb * B + cb, minlength=B * B).reshape(B, B).astype(np.int64)


@dataclass(frozen=True)
class PartSchedule:
    """Rule for choosing the part at each iteration.

    In cyclic mode, iteration ``t`` uses ``parts[order[(t - 1) mod B]]``;
    ``order`` defaults to ``0..B-1``. In random mode parts are drawn with
    probability proportional to their size from a stream keyed by
    ``(seed, t)``.
    """

    parts: Tuple[Part, ...]
    mode: str = CYCLIC
    seed: int = 0
    order: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.mode not in (CYCLIC, RANDOM):
            raise ConfigurationError(f"unknown scheduler mode {self.mode!r}")
        if self.order is not None and sorted(self.order) != list(range(len(self.parts))):
            raise ConfigurationError("order must be a permutation of the part indices")
        if self.mode == RANDOM and self.total_size <= 0:
            raise ConfigurationError("random schedule needs at least one observed entry")

    @property
    def total_size(self) -> int:
        return sum(p.size for p in self.parts)

    @property
    def probabilities(self) -> np.ndarray:
        sizes = np.array([p.size for p in self.parts], dtype=float)
        return sizes / sizes.sum()


def make_schedule(grid: BlockGrid, v: Optional[ObservationMatrix] = None, mode: str = CYCLIC,
                  seed: int = 0, order: Optional[Sequence[int]] = None) -> PartSchedule:
    counts = None if v is None else block_counts(grid, v)
    parts = diagonal_parts(grid, counts)
    return PartSchedule(tuple(parts), mode, seed, None if order is None else tuple(order))


def next_part(schedule: PartSchedule, t: int) -> Part:
    """Part used at iteration ``t`` (1-based)."""
    if t < 1:
        raise ConfigurationError("iterations are numbered from 1")
    B = len(schedule.parts)
    if schedule.mode == CYCLIC:
        pos = (t - 1) % B
        idx = pos if schedule.order is None else schedule.order[pos]
        return schedule.parts[idx]
    g = rngmod.stream(schedule.seed, rngmod.SCHEDULE, t)
    return schedule.parts[int(g.choice(B, p=schedule.probabilities))]


def ring_order(B: int) -> Tuple[int, ...]:
    """Cyclic part order produced by passing H blocks to the next node.

    After ``s`` shifts node ``b`` holds column block ``(b - s) mod B``, which
    is diagonal part ``(-s) mod B``.
    """
    return tuple((-s) % B for s in range(B))


def random_permutations(n_rows: int, n_cols: int, seed: int):
    """Seeded row and column permutations used to balance sparse blocks."""
    g = np.random.default_rng(seed)
    return g.permutation(n_rows), g.permutation(n_cols)


class BlockedData:
    """Observed data cut into the blocks of a grid, ready for block updates.

    Dense data keeps array views; sparse data keeps block-local coordinates.
    """

    def __init__(self, v: ObservationMatrix, grid: BlockGrid):
        if v.shape != (grid.n_rows, grid.n_cols):
            raise ConfigurationError(f"grid {grid.n_rows}x{grid.n_cols} does not match data {v.shape}")
        self.v = v
        self.grid = grid
        self.dense = v.dense
        self.counts = block_counts(grid, v)
        self.n_observed = v.n_observed
        self._sparse = {}
        if not v.dense:
            B = grid.B
            rb = grid.row_block_of(v.rows)
            cb = grid.col_block_of(v.cols)
            key = rb * B + cb
            order = np.argsort(key, kind="stable")
            bounds = np.searchsorted(key[order], np.arange(B * B + 1))
            for r in range(B):
                for c in range(B):
                    idx = order[bounds[r * B + c]:bounds[r * B + c + 1]]
                    self._sparse[r, c] = (v.rows[idx] - grid.row_partition[r].start,
                                          v.cols[idx] - grid.col_partition[c].start,
                                          v.values[idx])

    def dense_block(self, r: int, c: int) -> np.ndarray:
        rr, cc = self.grid.row_partition[r], self.grid.col_partition[c]
        return self.v.to_dense()[rr.start:rr.stop, cc.start:cc.stop]

    def sparse_block(self, r: int, c: int):
        return self._sparse[r, c]

    def block_matrix(self, r: int, c: int) -> ObservationMatrix:
        rr, cc = self.grid.row_partition[r], self.grid.col_partition[c]
        if self.dense:
            return ObservationMatrix.from_dense(self.dense_block(r, c), self.v.nonnegative)
        rows, cols, vals = self._sparse[r, c]
        return ObservationMatrix(len(rr), len(cc), rows, cols, vals,
                                 nonnegative=self.v.nonnegative)

    def part_size(self, part: Part) -> int:
        return int(sum(self.counts[b.row_block, b.col_block] for b in part.blocks))
