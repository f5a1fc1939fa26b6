# Grids, blocks and parts
#
# A B x B grid cuts the data into blocks. A part is a set of B blocks that
# share no rows and no columns, so the factor blocks they touch can be
# updated at the same time. The B diagonal shifts of the grid tile the
# whole matrix.

import numpy as np

from psgld.data import ObservationMatrix
from psgld.partition import (RANDOM, build_grid, diagonal_parts, make_schedule, next_part,
                             ring_order)

grid = build_grid(9, 9, 3)
print("row ranges:", [(r.start, r.stop) for r in grid.row_partition])

picture = np.zeros((9, 9), dtype=int)
for part in diagonal_parts(grid):
    for blk in part.blocks:
        picture[blk.rows.start:blk.rows.stop, blk.cols.start:blk.cols.stop] = part.index
print("part index of every cell:")
print(picture)

print("uneven split of 7 rows into 3:", [len(r) for r in build_grid(7, 7, 3).row_partition])

# Cyclic schedule, and the order a ring of nodes produces.
sched = make_schedule(grid)
print("cyclic parts for t = 1..6:", [next_part(sched, t).index for t in range(1, 7)])
print("ring order for B = 4:", ring_order(4))

# With missing data, part sizes count observed entries, and the random
# schedule picks parts in proportion to them.
rng = np.random.default_rng(1)
mask = rng.random((9, 9)) < np.linspace(0.1, 0.9, 9)[None, :]
v = ObservationMatrix.from_masked(np.ones((9, 9)), mask)
sched = make_schedule(grid, v, mode=RANDOM, seed=0)
print("part sizes:", [p.size for p in sched.parts], "probabilities:",
      np.round(sched.probabilities, 3))
