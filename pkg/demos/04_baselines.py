# PSGLD next to the reference methods
#
# Gibbs sampling with auxiliary counts is exact for Poisson NMF and serves
# as the yardstick. SGLD subsamples entries uniformly, and LD uses all of
# them at every step. DSGD is PSGLD without noise.

import numpy as np

from psgld.baselines import run_dsgd, run_gibbs, run_ld, run_sgld
from psgld.errors import NonFiniteError
from psgld.model import ModelSpec, generate_synthetic, log_likelihood
from psgld.partition import build_grid
from psgld.sampler import SamplerConfig, StepSchedule, run_chain

spec = ModelSpec(beta=1, phi=1, k=4)
v, _ = generate_synthetic(spec, 32, 32, seed=0)
grid = build_grid(32, 32, 4)


def mean_loglik(run, *args, schedule=StepSchedule()):
    kept = []
    cfg = SamplerConfig(T=1500, burn_in=750, seed=1, metrics_every=0, schedule=schedule)

    def keep(rec, state):
        if cfg.keeps(rec.iteration):
            kept.append(log_likelihood(v, state, spec))

    try:
        run(*args, cfg, callback=keep)
    except NonFiniteError as exc:
        return f"diverged ({exc})"
    return f"{np.mean(kept):.1f}"


print("Gibbs         ", mean_loglik(run_gibbs, v, spec))
print("PSGLD         ", mean_loglik(run_chain, v, spec, grid))
print("DSGD          ", mean_loglik(run_dsgd, v, spec, grid))
for a in (0.1, 0.01, 0.001):
    print(f"SGLD a={a:<6}", mean_loglik(run_sgld, v, spec, schedule=StepSchedule(a, 0.51)))
for eps in (0.2, 0.001):
    print(f"LD eps={eps:<5}", mean_loglik(run_ld, v, spec,
                                          schedule=StepSchedule(constant_eps=eps)))
