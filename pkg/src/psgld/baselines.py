"""Reference samplers and optimisers: full-batch Langevin dynamics, SGLD
with with-replacement subsampling, a Gibbs sampler for Poisson-NMF and the
noise-free block optimiser (DSGD)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from .data import FactorPair, ObservationMatrix
from .errors import ConfigurationError, ModelError, NonFiniteError
from .model import ModelSpec, coordinate_gradients, full_gradients, log_posterior_unnorm
from .partition import Part
from .sampler import (ChainRecord, PosteriorMean, SamplerConfig, epsilon_at, initial_state,
                      langevin_noise, psgld_iteration, run_chain)


def _langevin_step(state, gw, gh, eps, rng, mirroring):
    w = state.w + eps * gw
    h = state.h + eps * gh
    if rng is not None:
        w += langevin_noise(rng, w.shape, eps)
        h += langevin_noise(rng, h.shape, eps)
    if mirroring:
        np.abs(w, out=w)
        np.abs(h, out=h)
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(h))):
        raise NonFiniteError("non-finite update")
    return FactorPair(w, h)


def ld_iteration(state: FactorPair, v: ObservationMatrix, spec: ModelSpec, eps: float,
                 rng: np.random.Generator, mirroring: bool = True) -> FactorPair:
    """Langevin step using the gradient over every observed entry."""
    gw, gh = full_gradients(v, state, spec)
    return _langevin_step(state, gw, gh, eps, rng, mirroring)


@dataclass
class SgldSubsample:
    """Indices into the observed entries, drawn with replacement."""

    omega: np.ndarray

    def __post_init__(self):
        if len(self.omega) == 0:
            raise ConfigurationError("subsample must be non-empty")

    @property
    def size(self) -> int:
        return len(self.omega)


def draw_subsample(v: ObservationMatrix, size: int, rng: np.random.Generator) -> SgldSubsample:
    if size < 1:
        raise ConfigurationError("subsample size must be at least 1")
    return SgldSubsample(rng.integers(0, v.n_observed, size=size))


def subsample_gradients(v: ObservationMatrix, state: FactorPair, spec: ModelSpec,
                        sub: SgldSubsample):
    """``N / |omega|`` times the summed log-likelihood gradient over the
    subsample, plus the prior gradient."""
    idx = sub.omega
    scale = v.n_observed / sub.size
    return coordinate_gradients(v.rows[idx], v.cols[idx], v.values[idx], state.w, state.h,
                                spec, scale)


def sgld_iteration(state: FactorPair, v: ObservationMatrix, spec: ModelSpec, eps: float,
                   subsample_size: int, rng: np.random.Generator, mirroring: bool = True,
                   subsample: Optional[SgldSubsample] = None) -> FactorPair:
    """SGLD step on a with-replacement subsample of the observed entries.

    The subsample is drawn from ``rng`` unless given explicitly; the noise
    is drawn afterwards from the same generator.
    """
    if subsample is None:
        subsample = draw_subsample(v, subsample_size, rng)
    gw, gh = subsample_gradients(v, state, spec, subsample)
    return _langevin_step(state, gw, gh, eps, rng, mirroring)


def default_subsample_size(v: ObservationMatrix) -> int:
    """A thirty-second of the matrix area, at least one entry."""
    return max(1, (v.n_rows * v.n_cols) // 32)


def dsgd_iteration(state: FactorPair, part: Part, v, spec: ModelSpec, step: float,
                   seed: int = 0, t: int = 1, mirroring: bool = True, executor=None) -> FactorPair:
    """Noise-free block update: PSGLD without the Gaussian term."""
    return psgld_iteration(state, part, v, spec, step, seed, t, mirroring=mirroring,
                           noise=False, executor=executor)


# --- Gibbs sampler for Poisson-NMF -----------------------------------------

@dataclass
class AuxiliaryTensor:
    """Latent counts ``s[n, k]`` for each observed entry ``n``; the
    counts of an entry sum to its observed value."""

    s: np.ndarray

    def check(self, v: ObservationMatrix) -> bool:
        return bool(np.all(self.s >= 0) and np.array_equal(self.s.sum(axis=1),
                                                           v.values.astype(np.int64)))


def _check_poisson(v: ObservationMatrix, spec: ModelSpec):
    if not spec.is_poisson:
        raise ModelError("the Gibbs sampler needs beta = 1 and phi = 1")
    if not np.array_equal(v.values, np.round(v.values)):
        raise ModelError("the Gibbs sampler needs integer-valued observations")


def sample_auxiliary(state: FactorPair, v: ObservationMatrix,
                     rng: np.random.Generator) -> AuxiliaryTensor:
    """Split every count over the K components, p_k proportional to
    w_ik * h_kj."""
    k = state.k
    counts = v.values.astype(np.int64)
    s = np.zeros((len(counts), k), dtype=np.int64)
    nz = np.nonzero(counts)[0]
    if len(nz):
        p = state.w[v.rows[nz]] * state.h[:, v.cols[nz]].T
        tot = p.sum(axis=1, keepdims=True)
        p = np.where(tot > 0, p / np.where(tot > 0, tot, 1.0), 1.0 / k)
        s[nz] = rng.multinomial(counts[nz], p)
    return AuxiliaryTensor(s)


def gibbs_conditionals(factor_other: np.ndarray, aux: AuxiliaryTensor, v: ObservationMatrix,
                       spec: ModelSpec, which: str):
    """Gamma (shape, rate) of the full conditional of W (``which='w'``,
    ``factor_other`` = H) or of H (``which='h'``, ``factor_other`` = W).

    w_ik | . ~ Gamma(1 + sum_j s_ijk, lambda_w + sum_j h_kj) with the sums
    running over observed entries of row i; symmetric for H.
    """
    k = aux.s.shape[1]
    if which == "w":
        h = factor_other
        shape = np.empty((v.n_rows, k))
        rate = np.empty((v.n_rows, k))
        for kk in range(k):
            shape[:, kk] = 1.0 + np.bincount(v.rows, weights=aux.s[:, kk], minlength=v.n_rows)
            if v.dense:
                rate[:, kk] = spec.lambda_w + h[kk].sum()
            else:
                rate[:, kk] = spec.lambda_w + np.bincount(v.rows, weights=h[kk, v.cols],
                                                          minlength=v.n_rows)
        return shape, rate
    if which == "h":
        w = factor_other
        shape = np.empty((k, v.n_cols))
        rate = np.empty((k, v.n_cols))
        for kk in range(k):
            shape[kk] = 1.0 + np.bincount(v.cols, weights=aux.s[:, kk], minlength=v.n_cols)
            if v.dense:
                rate[kk] = spec.lambda_h + w[:, kk].sum()
            else:
                rate[kk] = spec.lambda_h + np.bincount(v.cols, weights=w[v.rows, kk],
                                                       minlength=v.n_cols)
        return shape, rate
    raise ValueError(f"which must be 'w' or 'h', got {which!r}")


def gibbs_iteration(state: FactorPair, aux: Optional[AuxiliaryTensor], v: ObservationMatrix,
                    spec: ModelSpec, rng: np.random.Generator):
    """One full sweep: S | W,H then W | S,H then H | S,W.

    ``aux`` from the previous sweep is not needed to draw the next one and
    may be None on the first call.
    """
    _check_poisson(v, spec)
    aux = sample_auxiliary(state, v, rng)
    shape, rate = gibbs_conditionals(state.h, aux, v, spec, "w")
    w = rng.gamma(shape, 1.0 / rate)
    shape, rate = gibbs_conditionals(w, aux, v, spec, "h")
    h = rng.gamma(shape, 1.0 / rate)
    return FactorPair(w, h), aux


# --- chain drivers ------------------------------------------------------------

def _drive(step: Callable[[FactorPair, int, float], FactorPair], v, spec, config, init,
           callback, eps_fn=None):
    state = initial_state(spec, v.n_rows, v.n_cols, config.seed) if init is None else init.copy()
    acc = PosteriorMean()
    records: List[ChainRecord] = []
    for t in range(1, config.T + 1):
        eps = epsilon_at(config.schedule, t) if eps_fn is None else eps_fn(t)
        state = step(state, t, eps)
        if config.metrics_every and t % config.metrics_every == 0:
            lp = log_posterior_unnorm(v, state, spec)
        else:
            lp = float("nan")
        rec = ChainRecord(t, eps, lp, -1)
        if config.keeps(t):
            acc.update(state)
            if config.store_samples:
                rec.sample = state.copy()
        records.append(rec)
        if callback is not None:
            callback(rec, state)
    return records, acc.mean


def run_ld(v: ObservationMatrix, spec: ModelSpec, config: SamplerConfig, *, init=None,
           callback=None) -> Tuple[List[ChainRecord], Optional[FactorPair]]:
    def step(state, t, eps):
        return ld_iteration(state, v, spec, eps, rngmod.stream(config.seed, rngmod.LD, t),
                            config.mirroring)
    return _drive(step, v, spec, config, init, callback)


def run_sgld(v: ObservationMatrix, spec: ModelSpec, config: SamplerConfig,
             subsample_size: Optional[int] = None, *, init=None, callback=None):
    size = default_subsample_size(v) if subsample_size is None else subsample_size

    def step(state, t, eps):
        return sgld_iteration(state, v, spec, eps, size,
                              rngmod.stream(config.seed, rngmod.SUBSAMPLE, t), config.mirroring)
    return _drive(step, v, spec, config, init, callback)


def run_gibbs(v: ObservationMatrix, spec: ModelSpec, config: SamplerConfig, *, init=None,
              callback=None):
    _check_poisson(v, spec)

    def step(state, t, eps):
        new, _ = gibbs_iteration(state, None, v, spec, rngmod.stream(config.seed, rngmod.GIBBS, t))
        return new
    return _drive(step, v, spec, config, init, callback, eps_fn=lambda t: 0.0)


def run_dsgd(v: ObservationMatrix, spec: ModelSpec, grid, config: SamplerConfig, **kwargs):
    """Block optimiser with the same part schedule as PSGLD and no noise."""
    return run_chain(v, spec, grid, config, noise=False, **kwargs)
