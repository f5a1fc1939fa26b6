"""Parallel stochastic gradient Langevin dynamics for Tweedie matrix
factorisation, with reference samplers and a ring-protocol simulator."""

__version__ = "0.1.0"

from .data import FactorPair, ObservationMatrix
from .errors import (ConfigurationError, ContractViolation, DomainError, IngestError,
                     ModelError, NonFiniteError, ProtocolError, TransportError,
                     UnsupportedModelError)
from .model import (ModelSpec, beta_divergence, block_gradients, dloglik_dmu,
                    generate_synthetic, log_likelihood, log_posterior_unnorm)
from .partition import (BlockGrid, Part, PartSchedule, build_grid, diagonal_parts,
                        make_schedule, next_part)
from .sampler import (ChainRecord, SamplerConfig, StepSchedule, epsilon_at,
                      gradient_noise_diagnostic, psgld_iteration, run_chain)
from .baselines import (dsgd_iteration, gibbs_iteration, ld_iteration, run_dsgd, run_gibbs,
                        run_ld, run_sgld, sgld_iteration)
from .distributed import InProcessTransport, ring_step, run_distributed
from .io import holdout_split, ingest, rmse

__all__ = [
    "FactorPair", "ObservationMatrix",
    "ConfigurationError", "ContractViolation", "DomainError", "IngestError", "ModelError",
    "NonFiniteError", "ProtocolError", "TransportError", "UnsupportedModelError",
    "ModelSpec", "beta_divergence", "block_gradients", "dloglik_dmu", "generate_synthetic",
    "log_likelihood", "log_posterior_unnorm",
    "BlockGrid", "Part", "PartSchedule", "build_grid", "diagonal_parts", "make_schedule",
    "next_part",
    "ChainRecord", "SamplerConfig", "StepSchedule", "epsilon_at", "gradient_noise_diagnostic",
    "psgld_iteration", "run_chain",
    "dsgd_iteration", "gibbs_iteration", "ld_iteration", "run_dsgd", "run_gibbs", "run_ld",
    "run_sgld", "sgld_iteration",
    "InProcessTransport", "ring_step", "run_distributed",
    "holdout_split", "ingest", "rmse",
]
