# Ratings files and the command line
#
# Ingest a small MovieLens-style file, hold out 10% of the ratings, then run
# the same steps through the `psgld` command. Everything goes to a
# temporary directory.

import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from psgld.io import MOVIELENS, holdout_split, ingest

work = Path(tempfile.mkdtemp(prefix="psgld-demo-"))
rng = np.random.default_rng(0)
lines = set()
while len(lines) < 3000:
    user, movie = rng.integers(1, 400), rng.integers(1, 200) * 7
    lines.add((int(user), int(movie)))
ratings = work / "ratings.dat"
ratings.write_text("".join(f"{u}::{m}::{rng.integers(1, 6)}::978300760\n" for u, m in sorted(lines)))

v = ingest(ratings, MOVIELENS)
print(f"{v.n_observed} ratings -> {v.n_rows} movies x {v.n_cols} users ({v.mask_mode})")
print("raw movie ids of the first rows:", v.row_ids[:5])
train, test = holdout_split(v, 0.1, seed=0)
print("train/test sizes:", train.n_observed, test.n_observed)


def psgld(*args):
    out = subprocess.run([sys.executable, "-m", "psgld", *args], capture_output=True, text=True)
    print("$ psgld", " ".join(args))
    print(out.stdout.strip() or out.stderr.strip())


psgld("partition-info", "--input", str(ratings), "--format", MOVIELENS, "--blocks", "2")
psgld("sample", "--input", str(ratings), "--format", MOVIELENS, "--k", "5", "--blocks", "4",
      "--iterations", "300", "--burn-in", "150", "--step-a", "0.0001",
      "--holdout-fraction", "0.1", "--output", str(work / "run"))
psgld("evaluate", "--input", str(ratings), "--format", MOVIELENS,
      "--w", str(work / "run" / "posterior_mean_W.mtx"),
      "--h", str(work / "run" / "posterior_mean_H.mtx"))
print("last metrics row:", (work / "run" / "metrics.csv").read_text().splitlines()[-1])
print("outputs in", work)
