# Beta-divergences and the Tweedie data generator
#
# The likelihood of every model in the package is exp(-d_beta(v || mu) / phi).
# beta = 0, 1, 2 are Itakura-Saito, Kullback-Leibler and half squared
# Euclidean; anything in between is a compound Poisson model.

import numpy as np

from psgld.model import (ModelSpec, beta_divergence, dloglik_dmu, sample_tweedie,
                         tweedie_zero_probability)

v, mu = 2.0, 1.0
for beta in (0, 0.5, 1, 1.5, 2):
    print(f"d_{beta}(2 || 1) = {beta_divergence(v, mu, beta):.6f}")

# The closed forms are limits of the general formula.
print("beta -> 1:", beta_divergence(v, mu, 1 - 1e-9), beta_divergence(v, mu, 1))

# The gradient with respect to mu vanishes at v = mu and has the sign of v - mu.
spec = ModelSpec(beta=0.5, phi=1.0)
print("d loglik / d mu at mu = 1, 2, 3:",
      [round(float(dloglik_dmu(2.0, m, spec)), 4) for m in (1.0, 2.0, 3.0)])

# Compound Poisson draws: a point mass at zero plus a continuous part.
rng = np.random.default_rng(0)
x = sample_tweedie(np.full(200_000, 2.0), spec, rng)
print(f"mean {x.mean():.3f} (2), variance {x.var():.3f} ({2 ** 1.5:.3f}), "
      f"P(0) {np.mean(x == 0):.4f} ({tweedie_zero_probability(2.0, spec):.4f})")
