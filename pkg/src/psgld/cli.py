"""Command line interface: ``generate``, ``sample``, ``evaluate`` and
``partition-info``.

Settings for ``sample`` come from an optional ``key = value`` file
(``--config``) and are overridden by command-line flags. The output
directory defaults to ``$PSGLD_OUTPUT_DIR`` or ``./psgld-out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy

from . import __version__
from .baselines import run_dsgd, run_gibbs, run_ld, run_sgld
from .data import FactorPair
from .distributed import run_distributed
from .errors import ConfigurationError, PsgldError
from .io import (FORMATS, MM_ARRAY, MM_COORDINATE, MetricsWriter, fmt_float, holdout_split,
                 ingest, load_factors, rmse, save_factors, save_id_mapping, save_observations,
                 write_manifest)
from .model import ModelSpec, generate_synthetic, log_likelihood, log_posterior_unnorm
from .partition import CYCLIC, RANDOM, BlockedData, build_grid, random_permutations
from .sampler import SamplerConfig, StepSchedule, run_chain

OUTPUT_ENV = "PSGLD_OUTPUT_DIR"
ALGORITHMS = ("psgld", "ld", "sgld", "gibbs", "dsgd")

# per-algorithm step defaults: (a, b, constant)
STEP_DEFAULTS = {
    "psgld": (0.01, 0.51, None),
    "dsgd": (0.01, 0.51, None),
    "sgld": (1.0, 0.51, None),
    "ld": (None, None, 0.2),
    "gibbs": (None, None, None),
}


def _opt(help, **kw):
    return field(metadata={"help": help}, **kw)


@dataclass
class RunConfig:
    algorithm: str = _opt("sampler: psgld, ld, sgld, gibbs or dsgd", default="psgld")
    beta: float = _opt("beta-divergence power parameter", default=1.0)
    phi: float = _opt("Tweedie dispersion", default=1.0)
    lambda_w: float = _opt("exponential prior rate on W", default=1.0)
    lambda_h: float = _opt("exponential prior rate on H", default=1.0)
    k: int = _opt("rank", default=10)
    blocks: int = _opt("grid size B (B x B blocks)", default=1)
    permute_seed: Optional[int] = _opt("seed for row/column shuffling before gridding",
                                       default=None)
    iterations: int = _opt("total iterations T", default=10000)
    burn_in: int = _opt("iterations discarded before averaging", default=5000)
    thin: int = _opt("keep every thin-th post burn-in sample", default=1)
    seed: int = _opt("master seed", default=0)
    step_a: Optional[float] = _opt("step scale a in (a/t)^b", default=None)
    step_b: Optional[float] = _opt("step exponent b in (0.5, 1]", default=None)
    const_eps: Optional[float] = _opt("constant step size (LD)", default=None)
    mirroring: bool = _opt("replace negative factor entries by absolute values", default=True)
    scheduler_mode: str = _opt("part schedule: cyclic or size-proportional-random",
                               default=CYCLIC)
    sgld_subsample: Optional[int] = _opt("SGLD subsample size (default I*J/32)", default=None)
    workers: int = _opt("threads for block updates", default=1)
    metrics_every: int = _opt("compute metrics every n iterations (0 = never)", default=1)
    distributed: Optional[int] = _opt("run the ring protocol with this many nodes",
                                      default=None)
    input: Optional[str] = _opt("input data file", default=None)
    format: Optional[str] = _opt(f"input format: {', '.join(FORMATS)}", default=None)
    zeros: str = _opt("unlisted cells in sparse input: missing or observed", default="missing")
    holdout_fraction: float = _opt("fraction of observed entries held out for test RMSE",
                                   default=0.0)
    holdout_seed: int = _opt("seed for the holdout split", default=0)
    output: Optional[str] = _opt("output directory", default=None)
    save_samples: str = _opt("'all' writes every kept sample, 'mean-only' only the mean",
                             default="mean-only")
    timing: str = _opt("'wall' records wall_ms, 'off' writes 0 for reproducible output",
                       default="wall")

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.scheduler_mode not in (CYCLIC, RANDOM):
            raise ConfigurationError(f"unknown scheduler mode {self.scheduler_mode!r}")
        if self.save_samples not in ("all", "mean-only"):
            raise ConfigurationError("save_samples must be 'all' or 'mean-only'")
        if self.timing not in ("wall", "off"):
            raise ConfigurationError("timing must be 'wall' or 'off'")
        if self.input is None:
            raise ConfigurationError("no input file given")
        if self.distributed is not None and self.algorithm != "psgld":
            raise ConfigurationError("the ring protocol only runs psgld")
        self.model_spec()
        self.sampler_config()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.beta, self.phi, self.lambda_w, self.lambda_h, self.k)

    def step_schedule(self) -> StepSchedule:
        if self.algorithm == "gibbs":
            return StepSchedule(constant_eps=1.0)  # not used by the Gibbs sampler
        if self.const_eps is not None:
            return StepSchedule(constant_eps=self.const_eps)
        a, b, const = STEP_DEFAULTS[self.algorithm]
        if self.step_a is None and self.step_b is None and const is not None:
            return StepSchedule(constant_eps=const)
        a = self.step_a if self.step_a is not None else (a or 0.01)
        b = self.step_b if self.step_b is not None else (b or 0.51)
        return StepSchedule(a, b)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(T=self.iterations, burn_in=self.burn_in, thin=self.thin,
                             seed=self.seed, mirroring=self.mirroring,
                             schedule=self.step_schedule(),
                             scheduler_mode=self.scheduler_mode, workers=self.workers,
                             metrics_every=self.metrics_every)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    if raw.lower() in ("none", "") and "Optional" in str(typ):
        return None
    if "bool" in str(typ):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if "int" in str(typ):
            return int(raw)
        if "float" in str(typ):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_distributed(raw: str) -> int:
    """Accepts ``3`` or ``B=3``."""
    s = raw.strip()
    if s.upper().startswith("B="):
        s = s[2:]
    try:
        n = int(s)
    except ValueError:
        raise ConfigurationError(f"--distributed expects B=<n>, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("--distributed needs at least one node")
    return n


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are
    rejected."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = parse_distributed(raw) if key == "distributed" else _convert(key, raw)
    return out


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _output_dir(raw: Optional[str]) -> Path:
    out = Path(raw or os.environ.get(OUTPUT_ENV) or "psgld-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _versions() -> dict:
    return {"psgld": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# --- orchestration -------------------------------------------------------------

def run_experiment(config: RunConfig) -> int:
    """ingest -> split -> grid -> algorithm -> metrics CSV, factors and a
    reproducibility manifest in ``config.output``."""
    config.validate()
    out = _output_dir(config.output)
    spec = config.model_spec()
    scfg = config.sampler_config()
    v = ingest(config.input, config.format, config.zeros)
    train, test = holdout_split(v, config.holdout_fraction, config.holdout_seed)
    if v.row_ids is not None:
        save_id_mapping(out, v)

    row_perm = col_perm = None
    if config.permute_seed is not None:
        row_perm, col_perm = random_permutations(v.n_rows, v.n_cols, config.permute_seed)
        train = train.permuted(row_perm, col_perm)
        test = test.permuted(row_perm, col_perm) if test.n_observed else test

    B = config.distributed if config.distributed is not None else config.blocks
    grid = build_grid(train.n_rows, train.n_cols, B)
    samples_dir = out / "samples"
    if config.save_samples == "all":
        samples_dir.mkdir(exist_ok=True)

    def unpermute(f: FactorPair) -> FactorPair:
        if row_perm is None:
            return f
        w = np.empty_like(f.w)
        h = np.empty_like(f.h)
        w[row_perm] = f.w
        h[:, col_perm] = f.h
        return FactorPair(w, h)

    start = time.perf_counter()
    timing = config.timing == "wall"
    metrics = MetricsWriter(out / "metrics.csv")

    last = {}

    def callback(rec, state):
        last["state"] = state
        train_rmse = rmse(train, state) if config.metrics_every and not np.isnan(rec.log_post) \
            else None
        test_rmse = rmse(test, state) if test.n_observed and train_rmse is not None else None
        wall = int((time.perf_counter() - start) * 1000) if timing else 0
        metrics.write(rec.iteration, rec.epsilon, rec.log_post, train_rmse, test_rmse, wall)
        if config.save_samples == "all" and scfg.keeps(rec.iteration):
            save_factors(samples_dir, unpermute(state), f"{rec.iteration:08d}_")

    try:
        if config.distributed is not None:
            result = run_distributed(train, spec, grid, scfg)
            for rec in result.records:
                wall = int((time.perf_counter() - start) * 1000) if timing else 0
                metrics.write(rec.iteration, rec.epsilon, rec.log_post, None, None, wall)
            for node, rows in enumerate(result.node_metrics, 1):
                with MetricsWriter(out / f"node_{node}_metrics.csv",
                                   ("iter", "block_loglik", "block_logprior")) as nm:
                    for t, lik, prior in rows:
                        nm.write(t, lik, prior)
            final, mean = result.final, result.posterior_mean
        else:
            if config.algorithm == "psgld":
                _, mean = run_chain(train, spec, grid, scfg, callback=callback)
            elif config.algorithm == "dsgd":
                _, mean = run_dsgd(train, spec, grid, scfg, callback=callback)
            elif config.algorithm == "ld":
                _, mean = run_ld(train, spec, scfg, callback=callback)
            elif config.algorithm == "sgld":
                _, mean = run_sgld(train, spec, scfg, config.sgld_subsample,
                                   callback=callback)
            else:
                _, mean = run_gibbs(train, spec, scfg, callback=callback)
            final = last["state"]
    finally:
        metrics.close()

    save_factors(out, unpermute(final), "final_")
    summary = {"train_rmse": rmse(train, final)}
    if mean is not None:
        save_factors(out, unpermute(mean), "posterior_mean_")
        summary["train_rmse_posterior_mean"] = rmse(train, mean)
        if test.n_observed:
            summary["test_rmse_posterior_mean"] = rmse(test, mean)
    write_manifest(out / "manifest.json", {
        "command": "sample",
        "config": config.to_dict(),
        "seeds": {"master": config.seed, "holdout": config.holdout_seed,
                  "permute": config.permute_seed},
        "versions": _versions(),
        "data": {"rows": v.n_rows, "cols": v.n_cols, "observed": v.n_observed,
                 "mask_mode": v.mask_mode, "train": train.n_observed, "test": test.n_observed},
        "logpost_kind": "exact Poisson log-likelihood + log prior" if spec.is_poisson
        else "unnormalised log-posterior",
        "summary": summary,
    })
    return 0


# --- argument parsing ----------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser):
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": None, "help": f.metadata["help"]}
        if f.name == "distributed":
            p.add_argument(flag, type=parse_distributed, metavar="B=<n>", **kw)
        elif f.name == "mirroring":
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "algorithm":
            p.add_argument(flag, choices=ALGORITHMS, **kw)
        elif f.name == "format":
            p.add_argument(flag, choices=FORMATS, **kw)
        elif f.name == "zeros":
            p.add_argument(flag, choices=("missing", "observed"), **kw)
        else:
            p.add_argument(flag, type=lambda s, _n=f.name: _convert(_n, s), **kw)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psgld", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw synthetic data from the Tweedie-NMF model")
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--phi", type=float, default=1.0)
    g.add_argument("--lambda-w", type=float, default=1.0)
    g.add_argument("--lambda-h", type=float, default=1.0)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--density", type=float, default=1.0,
                   help="fraction of observed cells (below 1 gives sparse output)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", default=None)

    s = sub.add_parser("sample", help="run a sampler or optimiser on a data file")
    s.add_argument("--config", default=None, help="key = value configuration file")
    _add_config_flags(s)

    e = sub.add_parser("evaluate", help="RMSE and log-posterior of factors on data")
    e.add_argument("--input", required=True)
    e.add_argument("--format", choices=FORMATS, default=None)
    e.add_argument("--zeros", choices=("missing", "observed"), default="missing")
    e.add_argument("--w", required=True, help="W factor (MatrixMarket array)")
    e.add_argument("--h", required=True, help="H factor (MatrixMarket array)")
    e.add_argument("--beta", type=float, default=1.0)
    e.add_argument("--phi", type=float, default=1.0)
    e.add_argument("--lambda-w", type=float, default=1.0)
    e.add_argument("--lambda-h", type=float, default=1.0)

    pi = sub.add_parser("partition-info", help="block boundaries and observed counts as CSV")
    pi.add_argument("--input", required=True)
    pi.add_argument("--format", choices=FORMATS, default=None)
    pi.add_argument("--zeros", choices=("missing", "observed"), default="missing")
    pi.add_argument("--blocks", type=int, required=True)
    pi.add_argument("--permute-seed", type=int, default=None)
    return p


def cmd_generate(args) -> int:
    spec = ModelSpec(args.beta, args.phi, args.lambda_w, args.lambda_h, args.k)
    v, factors = generate_synthetic(spec, args.rows, args.cols, args.seed, args.density)
    out = _output_dir(args.output)
    save_observations(out / "V.mtx", v, MM_ARRAY if v.dense else MM_COORDINATE)
    save_factors(out, factors, "true_")
    write_manifest(out / "manifest.json", {"command": "generate", "config": vars(args),
                                           "versions": _versions()})
    print(out / "V.mtx")
    return 0


def cmd_evaluate(args) -> int:
    v = ingest(args.input, args.format, args.zeros)
    factors = load_factors(args.w, args.h)
    spec = ModelSpec(args.beta, args.phi, args.lambda_w, args.lambda_h, factors.k)
    rows = [("rmse", rmse(v, factors)),
            ("loglik", log_likelihood(v, factors, spec)),
            ("logpost", log_posterior_unnorm(v, factors, spec))]
    print("metric,value")
    for name, val in rows:
        print(f"{name},{fmt_float(val)}")
    return 0


def cmd_partition_info(args, stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    v = ingest(args.input, args.format, args.zeros)
    if args.permute_seed is not None:
        v = v.permuted(*random_permutations(v.n_rows, v.n_cols, args.permute_seed))
    grid = build_grid(v.n_rows, v.n_cols, args.blocks)
    counts = BlockedData(v, grid).counts
    stream.write("row_block,col_block,row_start,row_stop,col_start,col_stop,n_observed\n")
    for r, rr in enumerate(grid.row_partition):
        for c, cc in enumerate(grid.col_partition):
            stream.write(f"{r},{c},{rr.start},{rr.stop},{cc.start},{cc.stop},{counts[r, c]}\n")
    return 0


def cmd_sample(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return run_experiment(build_config(file_values, overrides))


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    handlers = {"generate": cmd_generate, "sample": cmd_sample, "evaluate": cmd_evaluate,
                "partition-info": cmd_partition_info}
    try:
        return handlers[args.command](args)
    except (PsgldError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
