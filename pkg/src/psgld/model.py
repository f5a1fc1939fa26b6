"""Tweedie / beta-divergence NMF model: divergences, gradients, log-posterior
and synthetic data generators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import ContractViolation, DomainError, UnsupportedModelError
from .data import FactorPair, ObservationMatrix

MU_FLOOR = 1e-8


@dataclass(frozen=True)
class ModelSpec:
    """Prior and likelihood parameters of the Tweedie-NMF model.

    ``beta`` is the power parameter of the beta-divergence, ``phi`` the
    dispersion, ``lambda_w`` / ``lambda_h`` the rates of the exponential
    priors on the factors and ``k`` the rank.
    """

    beta: float = 1.0
    phi: float = 1.0
    lambda_w: float = 1.0
    lambda_h: float = 1.0
    k: int = 10

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ContractViolation("beta must be finite")
        if not self.phi > 0:
            raise ContractViolation(f"phi must be positive, got {self.phi}")
        if not self.lambda_w > 0 or not self.lambda_h > 0:
            raise ContractViolation("prior rates must be positive")
        if int(self.k) != self.k or self.k < 1:
            raise ContractViolation(f"rank k must be a positive integer, got {self.k}")

    @property
    def is_poisson(self) -> bool:
        return self.beta == 1 and self.phi == 1


def _general_divergence(v, mu, beta):
    """General-beta divergence written as mu**beta * f(v/mu) with expm1, which
    stays accurate as beta approaches 0 or 1 (the plain three-term
    expression cancels catastrophically there)."""
    r = v / mu
    with np.errstate(divide="ignore", invalid="ignore"):
        log_r = np.log(r)
        if abs(beta - 1) < 0.5:
            a = beta - 1
            f = (r * (np.expm1(a * log_r) / a) - (r - 1)) / beta
        else:
            f = (np.expm1(beta * log_r) / beta - (r - 1)) / (beta - 1)
    # v = 0 leaves only the mu**beta / beta term (beta > 0 here)
    f = np.where(r == 0, 1.0 / beta, f)
    return mu ** beta * f


def beta_divergence(v, mu, beta: float):
    """Elementwise beta-divergence d_beta(v || mu).

    Uses the closed forms at beta=0 (Itakura-Saito), beta=1
    (Kullback-Leibler) and beta=2 (half squared error) and the general
    expression elsewhere. Works on
    scalars and arrays; scalars in, float out.
    """
    v_arr = np.asarray(v, dtype=float)
    mu_arr = np.asarray(mu, dtype=float)
    if np.isnan(v_arr).any() or np.isnan(mu_arr).any():
        raise DomainError("NaN input to beta_divergence")
    if np.any(mu_arr <= 0):
        raise DomainError("beta_divergence requires mu > 0")
    if np.any(v_arr < 0):
        raise DomainError("beta_divergence requires v >= 0")
    if beta == 0:
        if np.any(v_arr == 0):
            raise DomainError("Itakura-Saito divergence is undefined at v = 0")
        ratio = v_arr / mu_arr
        out = ratio - np.log(ratio) - 1.0
    elif beta == 1:
        # xlogy gives 0*log(0) = 0, so v = 0 yields mu
        out = xlogy(v_arr, v_arr / mu_arr) - v_arr + mu_arr
    elif beta == 2:
        out = 0.5 * (v_arr - mu_arr) ** 2
    else:
        if beta < 0 and np.any(v_arr == 0):
            raise DomainError("beta < 0 requires v > 0")
        out = _general_divergence(v_arr, mu_arr, beta)
    if out.ndim == 0:
        return float(out)
    return out


def dloglik_dmu(v, mu, spec: ModelSpec):
    """Derivative of the Tweedie log-density with respect to its mean,
    -(1/phi) * mu**(beta-2) * (mu - v). ``mu`` is clamped at ``MU_FLOOR``."""
    v_arr = np.asarray(v, dtype=float)
    mu_arr = np.asarray(mu, dtype=float)
    if np.isnan(v_arr).any() or np.isnan(mu_arr).any():
        raise DomainError("NaN input to dloglik_dmu")
    out = _dloglik(v_arr, np.maximum(mu_arr, MU_FLOOR), spec.beta, spec.phi)
    if out.ndim == 0:
        return float(out)
    return out


def _dloglik(v, mu, beta, phi):
    # mu already floored; fast paths keep the common models cheap
    if beta == 2:
        g = v - mu
    elif beta == 1:
        g = v / mu - 1.0
    elif beta == 0:
        g = (v - mu) / (mu * mu)
    else:
        g = mu ** (beta - 2) * (v - mu)
    if phi != 1:
        g = g / phi
    return g


def _sign(x):
    # derivative of |x|; taken as +1 at 0 so the prior pulls towards 0 from above
    return np.where(x < 0, -1.0, 1.0)


def dense_gradients(v_block, w_b, h_b, spec: ModelSpec, scale: float, mask=None,
                    prior: bool = True):
    """Gradients of ``scale * loglik(block) + logprior(w_b, h_b)`` for a dense
    data block. ``mask`` optionally selects observed cells; ``prior=False``
    drops the prior term."""
    aw, ah = np.abs(w_b), np.abs(h_b)
    mu = np.maximum(aw @ ah, MU_FLOOR)
    g = _dloglik(v_block, mu, spec.beta, spec.phi)
    if mask is not None:
        g = g * mask
    grad_w = scale * (g @ ah.T)
    grad_h = scale * (aw.T @ g)
    return _finish(grad_w, grad_h, w_b, h_b, spec, prior)


def _finish(grad_w, grad_h, w_b, h_b, spec, prior):
    # chain rule through |.|, then the exponential prior once, unscaled
    sw, sh = _sign(w_b), _sign(h_b)
    grad_w = grad_w * sw
    grad_h = grad_h * sh
    if prior:
        grad_w -= spec.lambda_w * sw
        grad_h -= spec.lambda_h * sh
    return grad_w, grad_h


def coordinate_gradients(rows, cols, values, w_b, h_b, spec: ModelSpec, scale: float,
                         prior: bool = True):
    """Same as :func:`dense_gradients` but for a list of (row, col, value)
    entries local to the block. Repeated coordinates count once per
    occurrence, which is what with-replacement subsampling needs."""
    aw, ah = np.abs(w_b), np.abs(h_b)
    k = aw.shape[1]
    grad_w = np.zeros_like(aw)
    grad_h = np.zeros_like(ah)
    if len(values):
        wr = aw[rows]                      # n x K
        hc = ah[:, cols].T                 # n x K
        mu = np.maximum(np.einsum("nk,nk->n", wr, hc), MU_FLOOR)
        g = _dloglik(values, mu, spec.beta, spec.phi)
        gw = g[:, None] * hc
        gh = g[:, None] * wr
        for kk in range(k):
            grad_w[:, kk] = np.bincount(rows, weights=gw[:, kk], minlength=aw.shape[0])
            grad_h[kk, :] = np.bincount(cols, weights=gh[:, kk], minlength=ah.shape[1])
        grad_w *= scale
        grad_h *= scale
    return _finish(grad_w, grad_h, w_b, h_b, spec, prior)


def block_gradients(v_block, w_b, h_b, spec: ModelSpec, scale: float, prior: bool = True):
    """Gradient of the scaled block log-likelihood plus the (unscaled) log
    prior with respect to ``w_b`` and ``h_b``.

    ``v_block`` is either a dense 2-D array covering the block, or an
    :class:`ObservationMatrix` whose coordinates are local to the block.
    """
    w_b = np.asarray(w_b, dtype=float)
    h_b = np.asarray(h_b, dtype=float)
    if w_b.ndim != 2 or h_b.ndim != 2 or w_b.shape[1] != h_b.shape[0]:
        raise ContractViolation(f"incompatible factor shapes {w_b.shape} and {h_b.shape}")
    if isinstance(v_block, ObservationMatrix):
        if v_block.shape != (w_b.shape[0], h_b.shape[1]):
            raise ContractViolation(
                f"block shape {v_block.shape} does not match factors "
                f"{(w_b.shape[0], h_b.shape[1])}")
        if v_block.dense:
            return dense_gradients(v_block.to_dense(), w_b, h_b, spec, scale, prior=prior)
        return coordinate_gradients(v_block.rows, v_block.cols, v_block.values,
                                    w_b, h_b, spec, scale, prior=prior)
    v_block = np.asarray(v_block, dtype=float)
    if v_block.shape != (w_b.shape[0], h_b.shape[1]):
        raise ContractViolation(
            f"block shape {v_block.shape} does not match factors "
            f"{(w_b.shape[0], h_b.shape[1])}")
    return dense_gradients(v_block, w_b, h_b, spec, scale, prior=prior)


def _mu_at(v: ObservationMatrix, factors: FactorPair):
    aw, ah = np.abs(factors.w), np.abs(factors.h)
    if v.dense:
        return (aw @ ah).ravel()
    return np.einsum("nk,kn->n", aw[v.rows], ah[:, v.cols])


def poisson_constant(values) -> float:
    """Sum of the log normalising terms that turn ``-d_1(v||mu)`` into an exact
    Poisson log-pmf: v*log(v) - v - log(v!)."""
    values = np.asarray(values, dtype=float)
    return float(np.sum(xlogy(values, values) - values - gammaln(values + 1.0)))


def log_likelihood(v: ObservationMatrix, factors: FactorPair, spec: ModelSpec) -> float:
    """-(1/phi) * sum of divergences over observed entries. For the Poisson
    model (beta=1, phi=1) the exact normaliser is included, so the value is
    the true Poisson log-likelihood."""
    mu = np.maximum(_mu_at(v, factors), MU_FLOOR)
    out = -float(np.sum(beta_divergence(v.values, mu, spec.beta))) / spec.phi
    if spec.is_poisson:
        out += poisson_constant(v.values)
    return out


def log_prior_unnorm(factors: FactorPair, spec: ModelSpec) -> float:
    return -(spec.lambda_w * float(np.abs(factors.w).sum())
             + spec.lambda_h * float(np.abs(factors.h).sum()))


def log_posterior_unnorm(v: ObservationMatrix, factors: FactorPair, spec: ModelSpec) -> float:
    """Unnormalised log-posterior over the observed entries of ``v``."""
    if not (np.all(np.isfinite(factors.w)) and np.all(np.isfinite(factors.h))):
        raise DomainError("non-finite factors")
    return log_likelihood(v, factors, spec) + log_prior_unnorm(factors, spec)


def full_gradients(v: ObservationMatrix, factors: FactorPair, spec: ModelSpec,
                   scale: float = 1.0, prior: bool = True):
    """Gradient of the log-posterior over all observed entries."""
    return block_gradients(v, factors.w, factors.h, spec, scale, prior=prior)


# --- synthetic data -------------------------------------------------------

def supports_generation(beta: float) -> bool:
    return beta in (0, 1, 2) or 0 < beta < 1


def sample_tweedie(mu, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw from the Tweedie member with mean ``mu`` (elementwise) and
    variance ``phi * mu**(2-beta)``."""
    beta, phi = spec.beta, spec.phi
    mu = np.asarray(mu, dtype=float)
    if beta == 0:
        return rng.gamma(1.0 / phi, phi * mu)
    if beta == 1:
        if phi == 1:
            return rng.poisson(mu).astype(float)
        return phi * rng.poisson(mu / phi).astype(float)
    if beta == 2:
        return np.maximum(rng.normal(mu, np.sqrt(phi)), 0.0)
    if 0 < beta < 1:
        # compound Poisson: Poisson number of i.i.d. gamma jumps
        rate = mu ** beta / (phi * beta)
        shape = beta / (1.0 - beta)
        scale = phi * (1.0 - beta) * mu ** (1.0 - beta)
        n = rng.poisson(rate)
        out = np.zeros_like(mu, dtype=float)
        hit = n > 0
        out[hit] = rng.gamma(n[hit] * shape, np.broadcast_to(scale, mu.shape)[hit])
        return out
    raise UnsupportedModelError(f"no data generator for beta={beta}")


def generate_synthetic(spec: ModelSpec, n_rows: int, n_cols: int, seed: int,
                       density: float = 1.0):
    """Draw factors from the priors and data from the Tweedie likelihood.

    With ``density < 1`` a uniformly random subset of that fraction of the
    cells is observed and the result is in observed-entries-only mode.
    Returns ``(ObservationMatrix, FactorPair)``.
    """
    if not supports_generation(spec.beta):
        raise UnsupportedModelError(f"no data generator for beta={spec.beta}")
    if not 0 < density <= 1:
        raise ContractViolation("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    w = rng.exponential(1.0 / spec.lambda_w, size=(n_rows, spec.k))
    h = rng.exponential(1.0 / spec.lambda_h, size=(spec.k, n_cols))
    factors = FactorPair(w, h)
    if density == 1.0:
        mu = w @ h
        v = sample_tweedie(mu, spec, rng)
        return ObservationMatrix.from_dense(v), factors
    n_obs = int(round(density * n_rows * n_cols))
    flat = np.sort(rng.choice(n_rows * n_cols, size=n_obs, replace=False))
    rows, cols = np.divmod(flat, n_cols)
    mu = np.einsum("nk,kn->n", w[rows], h[:, cols])
    vals = sample_tweedie(mu, spec, rng)
    return ObservationMatrix(n_rows, n_cols, rows, cols, vals), factors


def tweedie_zero_probability(mu: float, spec: ModelSpec) -> Optional[float]:
    """P(v = 0) for the compound Poisson member, None for other models."""
    if 0 < spec.beta < 1:
        return float(np.exp(-mu ** spec.beta / (spec.phi * spec.beta)))
    return None
