"""Parallel SGLD over block-partitioned data."""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import rng as rngmod
from .data import FactorPair, ObservationMatrix
from .errors import ConfigurationError, NonFiniteError
from .model import (ModelSpec, coordinate_gradients, dense_gradients, full_gradients,
                    log_posterior_unnorm)
from .partition import (CYCLIC, BlockedData, BlockGrid, Part, PartSchedule, diagonal_parts,
                        next_part)


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``(a / t) ** b``, or a constant when ``constant_eps`` is set.

    ``b`` must lie in (0.5, 1] so that the steps sum to infinity while their
    squares stay summable.
    """

    a: float = 0.01
    b: float = 0.51
    constant_eps: Optional[float] = None

    def __post_init__(self):
        if self.constant_eps is not None:
            if not self.constant_eps > 0:
                raise ConfigurationError("constant step size must be positive")
            return
        if not self.a > 0:
            raise ConfigurationError(f"step scale a must be positive, got {self.a}")
        if not 0.5 < self.b <= 1:
            raise ConfigurationError(f"step exponent b must lie in (0.5, 1], got {self.b}")


def epsilon_at(schedule: StepSchedule, t: int) -> float:
    if t < 1:
        raise ConfigurationError("iterations are numbered from 1")
    if schedule.constant_eps is not None:
        return float(schedule.constant_eps)
    return (schedule.a / t) ** schedule.b


@dataclass(frozen=True)
class SamplerConfig:
    T: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    mirroring: bool = True
    schedule: StepSchedule = field(default_factory=StepSchedule)
    scheduler_mode: str = CYCLIC
    part_order: Optional[Tuple[int, ...]] = None
    workers: int = 1
    metrics_every: int = 1
    store_samples: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("T must be at least 1")
        if not 0 <= self.burn_in < self.T:
            raise ConfigurationError(f"burn_in must lie in [0, T), got {self.burn_in}")
        if self.thin < 1:
            raise ConfigurationError("thin must be at least 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if self.metrics_every < 0:
            raise ConfigurationError("metrics_every must be non-negative")

    def keeps(self, t: int) -> bool:
        return t > self.burn_in and (t - self.burn_in) % self.thin == 0


@dataclass
class ChainRecord:
    iteration: int
    epsilon: float
    log_post: float
    part: int
    sample: Optional[FactorPair] = None


class PosteriorMean:
    """Mean of kept samples, accumulated as a plain sum."""

    def __init__(self):
        self.count = 0
        self._w = None
        self._h = None

    def update(self, factors: FactorPair):
        self.count += 1
        if self._w is None:
            self._w = factors.w.copy()
            self._h = factors.h.copy()
        else:
            self._w += factors.w
            self._h += factors.h

    @property
    def mean(self) -> Optional[FactorPair]:
        if self._w is None:
            return None
        return FactorPair(self._w / self.count, self._h / self.count)


def initial_state(spec: ModelSpec, n_rows: int, n_cols: int, seed: int) -> FactorPair:
    """Prior draw used to start every chain."""
    g = rngmod.stream(seed, rngmod.INIT)
    w = g.exponential(1.0 / spec.lambda_w, size=(n_rows, spec.k))
    h = g.exponential(1.0 / spec.lambda_h, size=(spec.k, n_cols))
    return FactorPair(w, h)


def langevin_noise(g: np.random.Generator, shape, eps: float) -> np.ndarray:
    """Gaussian increments with mean 0 and variance ``2 * eps``."""
    return np.sqrt(2.0 * eps) * g.standard_normal(shape)


def update_block(w_b, h_b, data, spec: ModelSpec, eps: float, scale: float,
                 g: Optional[np.random.Generator], mirroring: bool = True):
    """One Langevin update of a (W block, H block) pair.

    ``data`` is a dense array or a ``(rows, cols, values)`` tuple of
    block-local coordinates. ``g=None`` drops the injected noise, which
    turns the step into plain stochastic gradient ascent. W noise is drawn
    before H noise.
    """
    if isinstance(data, tuple):
        gw, gh = coordinate_gradients(*data, w_b, h_b, spec, scale)
    else:
        gw, gh = dense_gradients(data, w_b, h_b, spec, scale)
    new_w = w_b + eps * gw
    new_h = h_b + eps * gh
    if g is not None:
        new_w += langevin_noise(g, w_b.shape, eps)
        new_h += langevin_noise(g, h_b.shape, eps)
    if mirroring:
        np.abs(new_w, out=new_w)
        np.abs(new_h, out=new_h)
    return new_w, new_h


def _as_blocked(v, part: Part) -> BlockedData:
    if isinstance(v, BlockedData):
        return v
    blocks = sorted(part.blocks, key=lambda b: b.row_block)
    cols = sorted(part.blocks, key=lambda b: b.col_block)
    grid = BlockGrid(v.n_rows, v.n_cols, tuple(b.rows for b in blocks),
                     tuple(b.cols for b in cols))
    return BlockedData(v, grid)


def psgld_iteration(state: FactorPair, part: Part, v, spec: ModelSpec, eps: float,
                    seed: int, t: int, *, mirroring: bool = True, noise: bool = True,
                    executor=None, order: Optional[Sequence[int]] = None,
                    inplace: bool = False) -> FactorPair:
    """Apply the ``B`` interchangeable block updates of one iteration.

    Each block draws its noise from the stream keyed by ``(seed, t, row
    block, column block)``, so the result does not depend on ``order`` or
    on how blocks are spread over ``executor`` workers.

    ``v`` is an :class:`ObservationMatrix` or a prebuilt :class:`BlockedData`.
    """
    data = _as_blocked(v, part)
    out = state if inplace else state.copy()
    size = data.part_size(part)
    scale = data.n_observed / size if size else 0.0
    blocks = part.blocks if order is None else [part.blocks[i] for i in order]

    def run(blk):
        rs = slice(blk.rows.start, blk.rows.stop)
        cs = slice(blk.cols.start, blk.cols.stop)
        if data.dense:
            local = data.dense_block(blk.row_block, blk.col_block)
        else:
            local = data.sparse_block(blk.row_block, blk.col_block)
        g = rngmod.block_stream(seed, t, blk.row_block, blk.col_block) if noise else None
        new_w, new_h = update_block(out.w[rs], out.h[:, cs], local, spec, eps, scale, g,
                                    mirroring)
        if not (np.all(np.isfinite(new_w)) and np.all(np.isfinite(new_h))):
            raise NonFiniteError(
                f"non-finite update in block ({blk.row_block}, {blk.col_block}) "
                f"at iteration {t}", iteration=t, block=(blk.row_block, blk.col_block))
        out.w[rs] = new_w
        out.h[:, cs] = new_h

    def run_all(chunk):
        for blk in chunk:
            run(blk)

    if executor is None:
        run_all(blocks)
    else:
        # one task per worker keeps scheduling overhead off the small blocks;
        # executors that do not report a worker count get one task per block
        n = min(len(blocks), getattr(executor, "workers", len(blocks)))
        chunks = [blocks[i::n] for i in range(n)]
        for fut in [executor.submit(run_all, c) for c in chunks]:
            fut.result()
    return out


class BlockPool(ThreadPoolExecutor):
    def __init__(self, workers: int):
        super().__init__(max_workers=workers)
        self.workers = workers


@contextlib.contextmanager
def block_executor(workers: int):
    """Thread pool for block updates, with BLAS pinned to one thread so that
    serial and parallel runs execute identical kernels."""
    with threadpool_limits(limits=1, user_api="blas"):
        if workers == 1:
            yield None
        else:
            with BlockPool(workers) as pool:
                yield pool


def make_part_schedule(data: BlockedData, config: SamplerConfig) -> PartSchedule:
    parts = diagonal_parts(data.grid, data.counts)
    return PartSchedule(tuple(parts), config.scheduler_mode, config.seed, config.part_order)


def run_chain(v: ObservationMatrix, spec: ModelSpec, grid: BlockGrid, config: SamplerConfig,
              *, init: Optional[FactorPair] = None,
              callback: Optional[Callable[[ChainRecord, FactorPair], None]] = None,
              sample_callback: Optional[Callable[[int, FactorPair], None]] = None,
              noise: bool = True) -> Tuple[List[ChainRecord], Optional[FactorPair]]:
    """Run ``config.T`` PSGLD iterations.

    Returns the per-iteration records and the posterior mean over kept
    (post burn-in, thinned) samples. ``callback`` sees every record together
    with the current state; ``sample_callback`` sees every kept sample.
    ``noise=False`` gives the noise-free block optimiser.
    """
    data = BlockedData(v, grid)
    schedule = make_part_schedule(data, config)
    state = (initial_state(spec, v.n_rows, v.n_cols, config.seed) if init is None
             else init.copy())
    acc = PosteriorMean()
    records = []
    with block_executor(config.workers) as pool:
        for t in range(1, config.T + 1):
            eps = epsilon_at(config.schedule, t)
            part = next_part(schedule, t)
            psgld_iteration(state, part, data, spec, eps, config.seed, t,
                            mirroring=config.mirroring, noise=noise, executor=pool,
                            inplace=True)
            if config.metrics_every and t % config.metrics_every == 0:
                lp = log_posterior_unnorm(v, state, spec)
            else:
                lp = float("nan")
            rec = ChainRecord(t, eps, lp, part.index)
            if config.keeps(t):
                acc.update(state)
                if config.store_samples:
                    rec.sample = state.copy()
                if sample_callback is not None:
                    sample_callback(t, state)
            records.append(rec)
            if callback is not None:
                callback(rec, state)
    return records, acc.mean


@dataclass
class NoiseDiagnostic:
    """Output of :func:`gradient_noise_diagnostic`.

    ``zeta_mean_norm`` is the norm of the size-weighted mean, over the
    diagonal parts, of the gradient noise (part gradient minus full
    gradient); ``relative`` divides it by the norm of the full gradient.
    ``zeta_moments`` holds the empirical 2nd-4th moments of the noise
    entries under the size-proportional part distribution.
    """

    zeta_mean_norm: float
    relative: float
    per_part_grads: List[Tuple[np.ndarray, np.ndarray]]
    full_grad: Tuple[np.ndarray, np.ndarray]
    weights: np.ndarray
    zeta_moments: dict


def part_gradient(state: FactorPair, part: Part, data: BlockedData, spec: ModelSpec):
    """Gradient of the part estimate of the log-posterior: prior plus
    ``N / |part|`` times the part's log-likelihood gradient."""
    size = data.part_size(part)
    scale = data.n_observed / size if size else 0.0
    gw = np.zeros_like(state.w)
    gh = np.zeros_like(state.h)
    for blk in part.blocks:
        rs = slice(blk.rows.start, blk.rows.stop)
        cs = slice(blk.cols.start, blk.cols.stop)
        if data.dense:
            bw, bh = dense_gradients(data.dense_block(blk.row_block, blk.col_block),
                                     state.w[rs], state.h[:, cs], spec, scale, prior=False)
        else:
            bw, bh = coordinate_gradients(*data.sparse_block(blk.row_block, blk.col_block),
                                          state.w[rs], state.h[:, cs], spec, scale,
                                          prior=False)
        gw[rs] += bw
        gh[:, cs] += bh
    pw, ph = _prior_gradient(state, spec)
    return gw + pw, gh + ph


def _prior_gradient(state: FactorPair, spec: ModelSpec):
    sw = np.where(state.w < 0, -1.0, 1.0)
    sh = np.where(state.h < 0, -1.0, 1.0)
    return -spec.lambda_w * sw, -spec.lambda_h * sh


def gradient_noise_diagnostic(state: FactorPair, grid: BlockGrid, v: ObservationMatrix,
                              spec: ModelSpec) -> NoiseDiagnostic:
    """Check that part gradients are an unbiased estimate of the full one."""
    data = BlockedData(v, grid)
    parts = diagonal_parts(grid, data.counts)
    full = full_gradients(v, state, spec)
    per_part = [part_gradient(state, p, data, spec) for p in parts]
    weights = np.array([p.size for p in parts], dtype=float) / data.n_observed
    zw = sum(wt * (pw - full[0]) for wt, (pw, _) in zip(weights, per_part))
    zh = sum(wt * (ph - full[1]) for wt, (_, ph) in zip(weights, per_part))
    norm = float(np.sqrt(np.sum(zw ** 2) + np.sum(zh ** 2)))
    full_norm = float(np.sqrt(np.sum(full[0] ** 2) + np.sum(full[1] ** 2)))
    zeta = [np.concatenate([(pw - full[0]).ravel(), (ph - full[1]).ravel()])
            for pw, ph in per_part]
    moments = {k: float(sum(wt * np.mean(z ** k) for wt, z in zip(weights, zeta)))
               for k in (2, 3, 4)}
    return NoiseDiagnostic(norm, norm / full_norm if full_norm else norm, per_part, full,
                           weights, moments)
