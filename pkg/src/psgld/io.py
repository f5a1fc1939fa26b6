"""Reading and writing observations, factors, metrics and manifests."""

from __future__ import annotations

import csv
import json
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import scipy.io

from .data import FactorPair, ObservationMatrix
from .errors import ConfigurationError, ContractViolation, IngestError

MM_COORDINATE = "matrixmarket-coordinate"
MM_ARRAY = "matrixmarket-array"
TSV = "tsv-triplets"
MOVIELENS = "movielens-ratings"
FORMATS = (MM_COORDINATE, MM_ARRAY, TSV, MOVIELENS)

METRICS_HEADER = ("iter", "epsilon", "logpost", "train_rmse", "test_rmse", "wall_ms")


def fmt_float(x) -> str:
    """Shortest decimal that round-trips; empty for None/NaN."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def atomic_write(path, data, mode="w"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- ingestion -----------------------------------------------------------------

def guess_format(path) -> str:
    name = str(path).lower()
    if name.endswith(".mtx") or name.endswith(".mm"):
        if not os.path.isfile(path):
            raise IngestError(f"{path}: no such file")
        try:
            info = scipy.io.mminfo(path)
        except ValueError as exc:
            raise IngestError(f"{path}: {exc}") from exc
        return MM_ARRAY if info[3] == "array" else MM_COORDINATE
    if name.endswith(".dat"):
        return MOVIELENS
    return TSV


def ingest(path, fmt: Optional[str] = None, zeros: str = "missing",
           nonnegative: bool = True) -> ObservationMatrix:
    """Read an observation matrix.

    Coordinate-style formats (MatrixMarket coordinate, TSV triplets,
    MovieLens ratings) give observed-entries-only matrices where unlisted
    cells are missing; ``zeros='observed'`` instead treats unlisted cells as
    observed zeros (dense mode). MatrixMarket arrays are always dense.

    MovieLens lines are ``user::movie::rating::timestamp`` (or the same
    fields tab-separated). Movies become rows and users columns, both
    reindexed to contiguous 0-based indices in increasing raw-id order; the
    raw ids are kept on the result as ``row_ids`` / ``col_ids``.
    """
    fmt = guess_format(path) if fmt is None else fmt
    if fmt not in FORMATS:
        raise ConfigurationError(f"unknown input format {fmt!r}; expected one of {FORMATS}")
    if zeros not in ("missing", "observed"):
        raise ConfigurationError("zeros must be 'missing' or 'observed'")
    if fmt in (MM_COORDINATE, MM_ARRAY):
        v = _read_matrixmarket(path, fmt, nonnegative)
    elif fmt == TSV:
        v = _read_triplets(path, nonnegative)
    else:
        v = _read_movielens(path, nonnegative)
    if zeros == "observed" and not v.dense:
        dense = ObservationMatrix.from_dense(v.to_dense(0.0), nonnegative=nonnegative)
        dense.row_ids, dense.col_ids = v.row_ids, v.col_ids
        return dense
    return v


def _read_matrixmarket(path, fmt, nonnegative):
    try:
        info = scipy.io.mminfo(path)
        m = scipy.io.mmread(path)
    except (ValueError, OSError) as exc:
        raise IngestError(f"{path}: {exc}") from exc
    kind = info[3]
    if (fmt == MM_ARRAY) != (kind == "array"):
        raise IngestError(f"{path}: header declares '{kind}' but format {fmt} was requested")
    if kind == "array":
        arr = np.asarray(m, dtype=float)
        _check_values(arr.ravel(), nonnegative)
        return ObservationMatrix.from_dense(arr, nonnegative=nonnegative)
    coo = m.tocoo()
    rows, cols, vals = coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.astype(float)
    flat = rows * coo.shape[1] + cols
    uniq, counts = np.unique(flat, return_counts=True)
    if np.any(counts > 1):
        bad = uniq[counts > 1][0]
        raise IngestError(f"{path}: duplicate coordinate ({bad // coo.shape[1] + 1}, "
                          f"{bad % coo.shape[1] + 1})")
    _check_values(vals, nonnegative)
    order = np.lexsort((cols, rows))
    return ObservationMatrix(coo.shape[0], coo.shape[1], rows[order], cols[order], vals[order],
                             nonnegative=nonnegative)


def _check_values(vals, nonnegative, line=None):
    if not np.all(np.isfinite(vals)):
        raise IngestError("non-finite value", line)
    if nonnegative and np.any(vals < 0):
        raise IngestError("negative value in non-negative data", line)


def _lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def _read_triplets(path, nonnegative):
    """``row<TAB>col<TAB>value`` with 0-based integer indices; the shape is
    one past the largest index."""
    rows, cols, vals = [], [], []
    seen = {}
    for lineno, s in _lines(path):
        parts = s.split()
        if len(parts) != 3:
            raise IngestError(f"expected 3 fields, got {len(parts)}", lineno)
        try:
            i, j, x = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise IngestError(str(exc), lineno) from None
        if i < 0 or j < 0:
            raise IngestError("negative index", lineno)
        if (i, j) in seen:
            raise IngestError(f"duplicate coordinate ({i}, {j}), first seen on line "
                              f"{seen[i, j]}", lineno)
        _check_values(np.array([x]), nonnegative, lineno)
        seen[i, j] = lineno
        rows.append(i)
        cols.append(j)
        vals.append(x)
    if not vals:
        raise IngestError(f"{path}: no entries")
    rows, cols, vals = np.array(rows), np.array(cols), np.array(vals)
    order = np.lexsort((cols, rows))
    return ObservationMatrix(rows.max() + 1, cols.max() + 1, rows[order], cols[order],
                             vals[order], nonnegative=nonnegative)


_ML_SPLIT = re.compile(r"::|\t")


def _read_movielens(path, nonnegative):
    users, movies, ratings, where = [], [], [], []
    for lineno, s in _lines(path):
        parts = _ML_SPLIT.split(s)
        if len(parts) not in (3, 4):
            raise IngestError(f"expected user::movie::rating[::timestamp], got {s!r}", lineno)
        try:
            u, m, r = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise IngestError(str(exc), lineno) from None
        _check_values(np.array([r]), nonnegative, lineno)
        users.append(u)
        movies.append(m)
        ratings.append(r)
        where.append(lineno)
    if not ratings:
        raise IngestError(f"{path}: no ratings")
    users, movies, ratings = np.array(users), np.array(movies), np.array(ratings)
    movie_ids, rows = np.unique(movies, return_inverse=True)
    user_ids, cols = np.unique(users, return_inverse=True)
    flat = rows * len(user_ids) + cols
    order = np.argsort(flat, kind="stable")
    dup = np.nonzero(np.diff(flat[order]) == 0)[0]
    if len(dup):
        first, second = sorted((where[order[dup[0]]], where[order[dup[0] + 1]]))
        raise IngestError(f"duplicate rating for user {users[order[dup[0]]]}, movie "
                          f"{movies[order[dup[0]]]} (first on line {first})", second)
    return ObservationMatrix(len(movie_ids), len(user_ids), rows[order], cols[order],
                             ratings[order], nonnegative=nonnegative, row_ids=movie_ids,
                             col_ids=user_ids)


# --- persistence -------------------------------------------------------------

def save_observations(path, v: ObservationMatrix, fmt: Optional[str] = None):
    """Write ``v`` in one of the ingestible formats (default: MatrixMarket
    array for dense data, coordinate otherwise)."""
    if fmt is None:
        fmt = MM_ARRAY if v.dense else MM_COORDINATE
    path = Path(path)
    if fmt == MM_ARRAY:
        save_matrix(path, v.to_dense())
    elif fmt == MM_COORDINATE:
        lines = ["%%MatrixMarket matrix coordinate real general",
                 f"{v.n_rows} {v.n_cols} {v.n_observed}"]
        lines += [f"{i + 1} {j + 1} {fmt_float(x)}" for i, j, x in zip(v.rows, v.cols, v.values)]
        atomic_write(path, "\n".join(lines) + "\n")
    elif fmt == TSV:
        atomic_write(path, "".join(f"{i}\t{j}\t{fmt_float(x)}\n"
                                   for i, j, x in zip(v.rows, v.cols, v.values)))
    elif fmt == MOVIELENS:
        if v.row_ids is None or v.col_ids is None:
            raise ContractViolation("MovieLens output needs the raw id mapping")
        atomic_write(path, "".join(f"{v.col_ids[j]}::{v.row_ids[i]}::{fmt_float(x)}::0\n"
                                   for i, j, x in zip(v.rows, v.cols, v.values)))
    else:
        raise ConfigurationError(f"unknown format {fmt!r}")


def save_id_mapping(directory, v: ObservationMatrix):
    """Write ``row_ids.csv`` and ``col_ids.csv`` (index,raw_id)."""
    directory = Path(directory)
    for name, ids in (("row_ids.csv", v.row_ids), ("col_ids.csv", v.col_ids)):
        if ids is None:
            continue
        atomic_write(directory / name,
                     "index,raw_id\n" + "".join(f"{i},{r}\n" for i, r in enumerate(ids)))


def load_id_mapping(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.empty(len(rows), dtype=np.int64)
    for r in rows:
        ids[int(r["index"])] = int(r["raw_id"])
    return ids


def save_matrix(path, array: np.ndarray):
    """MatrixMarket array file with round-trip precision."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            scipy.io.mmwrite(fh, np.asarray(array, dtype=float), precision=17)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_matrix(path) -> np.ndarray:
    return np.asarray(scipy.io.mmread(path), dtype=float)


def save_factors(directory, factors: FactorPair, prefix: str):
    directory = Path(directory)
    save_matrix(directory / f"{prefix}W.mtx", factors.w)
    save_matrix(directory / f"{prefix}H.mtx", factors.h)


def load_factors(w_path, h_path) -> FactorPair:
    return FactorPair(load_matrix(w_path), load_matrix(h_path))


# --- evaluation ------------------------------------------------------------------

def holdout_split(v: ObservationMatrix, fraction: float, seed: int
                  ) -> Tuple[ObservationMatrix, ObservationMatrix]:
    """Uniformly random split of the observed entries into (train, test);
    the test set has ``round(fraction * n_observed)`` entries."""
    if not 0 <= fraction < 1:
        raise ConfigurationError(f"holdout fraction must lie in [0, 1), got {fraction}")
    n_test = int(round(fraction * v.n_observed))
    if n_test == 0:
        return v, v.subset(np.array([], dtype=np.int64))
    perm = np.random.default_rng(seed).permutation(v.n_observed)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return v.subset(train_idx), v.subset(test_idx)


def rmse(v: ObservationMatrix, factors: FactorPair) -> float:
    """Root mean squared error between observed entries and ``|W| |H|``."""
    if v.n_observed == 0:
        raise ContractViolation("RMSE is undefined on an empty observation set")
    mu = np.einsum("nk,kn->n", np.abs(factors.w)[v.rows], np.abs(factors.h)[:, v.cols])
    return float(np.sqrt(np.mean((v.values - mu) ** 2)))


# --- metrics and manifest ------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return fmt_float(v)


class MetricsWriter:
    """Streams metric rows to CSV, flushing every row.

    Rows go to ``<path>.partial`` and the file is renamed into place on
    close, including when the run aborts, so partial results survive.
    """

    def __init__(self, path, header: Iterable[str] = METRICS_HEADER):
        self.path = Path(path)
        self._partial = self.path.with_name(self.path.name + ".partial")
        self._fh = open(self._partial, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(list(header))
        self._last = 0

    def write(self, iteration: int, *values):
        if iteration <= self._last:
            raise ContractViolation("metric rows must have increasing iteration numbers")
        self._last = iteration
        self._writer.writerow([str(iteration)] + [_cell(v) for v in values])
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()
            os.replace(self._partial, self.path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_manifest(path, payload: dict):
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
