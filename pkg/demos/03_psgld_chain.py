# Running a PSGLD chain
#
# Draw a Poisson NMF data set, run the sampler with the default step schedule
# eps_t = (0.01 / t) ** 0.51, and look at the log-posterior trace and the
# posterior mean.

import numpy as np

from psgld.io import rmse
from psgld.model import ModelSpec, generate_synthetic
from psgld.partition import build_grid
from psgld.sampler import SamplerConfig, gradient_noise_diagnostic, initial_state, run_chain

spec = ModelSpec(beta=1, phi=1, lambda_w=1.0, lambda_h=1.0, k=4)
v, truth = generate_synthetic(spec, 40, 40, seed=0)
grid = build_grid(40, 40, 4)

# The part gradients, weighted by part size, average to the full gradient.
diag = gradient_noise_diagnostic(initial_state(spec, 40, 40, 0), grid, v, spec)
print(f"relative size of the mean gradient noise: {diag.relative:.1e}")

config = SamplerConfig(T=2000, burn_in=1000, thin=5, seed=0)
records, mean = run_chain(v, spec, grid, config)
lp = np.array([r.log_post for r in records])
for t in (1, 10, 100, 1000, 2000):
    print(f"t={t:5d}  eps={records[t - 1].epsilon:.4f}  log posterior={lp[t - 1]:.1f}")

print(f"RMSE of the posterior mean {rmse(v, mean):.3f}, of the true factors {rmse(v, truth):.3f}")

# Threads change nothing: every block draws noise from its own stream.
_, mean4 = run_chain(v, spec, grid, SamplerConfig(T=50, seed=3, workers=4))
_, mean1 = run_chain(v, spec, grid, SamplerConfig(T=50, seed=3, workers=1))
print("4 workers == 1 worker:", mean4.identical(mean1))
