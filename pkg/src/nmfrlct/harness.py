"""Replicated learning-coefficient experiment and the VB log n slope experiment."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import coefficients
from .estimators import ReplicateEstimates, replicate_estimates, replicates_to_csv
from .gibbs import GibbsConfig, run_chain
from .model import (CountDataset, DomainError, FactorPair, Hyperparameters, ModelDims,
                    NumericalError, as_generator, empirical_entropy, generate_dataset)
from .variational import VBConfig, fit

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.2


def default_truth(dims: ModelDims, seed=0, low=0.5, high=1.5) -> FactorPair:
    """True factors of inner size H0 with entries uniform on [low, high]."""
    if dims.H0 < 1:
        raise DomainError("a strictly positive truth needs H0 >= 1")
    rng = as_generator(seed)
    U0 = rng.uniform(low, high, size=(dims.M, dims.H0))
    V0 = rng.uniform(low, high, size=(dims.H0, dims.N))
    return FactorPair(U0, V0)


@dataclass(frozen=True)
class ExperimentConfig:
    dims: ModelDims
    hyper: Hyperparameters
    truth: FactorPair
    n: int = 500
    n_T: int | None = None
    D: int = 20
    gibbs: GibbsConfig = GibbsConfig()
    master_seed: int = 0

    def __post_init__(self):
        if self.D < 1 or self.n < 1 or self.test_size < 1:
            raise DomainError("need D >= 1, n >= 1 and n_T >= 1")
        self.truth.check_dims(self.dims, inner=self.dims.H0)
        if not (self.truth.rate > 0).all():
            raise DomainError("true rate matrix must be strictly positive")

    @property
    def test_size(self) -> int:
        return 100 * self.n if self.n_T is None else self.n_T

    def echo(self) -> dict:
        g = self.gibbs
        return {
            "dims": vars(self.dims),
            "hyper": self.hyper.as_dict(),
            "n": self.n,
            "n_T": self.test_size,
            "D": self.D,
            "gibbs": {"burn_in": g.burn_in, "thin": g.thin, "K": g.K},
            "master_seed": self.master_seed,
            "truth": {"U": self.truth.U.tolist(), "V": self.truth.V.tolist()},
        }


def replicate_streams(master_seed: int, index: int):
    """Independent (train, chain, test) seed sequences for one replicate."""
    return np.random.SeedSequence(master_seed, spawn_key=(index,)).spawn(3)


def run_replicate(cfg: ExperimentConfig, index: int) -> ReplicateEstimates:
    """Generate data, sample the posterior, and evaluate all estimators."""
    s_train, s_chain, s_test = replicate_streams(cfg.master_seed, index)
    train = generate_dataset(cfg.truth, cfg.n, s_train)
    g = cfg.gibbs
    draws = run_chain(train, cfg.hyper, cfg.dims, GibbsConfig(g.burn_in, g.thin, g.K, s_chain))
    test = generate_dataset(cfg.truth, cfg.test_size, s_test)
    return replicate_estimates(train, test, draws, cfg.truth)


def _timed_replicate(args):
    cfg, index = args
    t0 = time.perf_counter()
    try:
        est = run_replicate(cfg, index)
        err = None
    except NumericalError as exc:
        est, err = None, str(exc)
    return index, est, err, time.perf_counter() - t0


def aggregate(points) -> tuple[float, float]:
    """Mean and standard error (sample sd / sqrt D) of replicate estimates."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.size == 0:
        raise NumericalError("no replicate estimates to aggregate")
    mean = float(pts.mean())
    stderr = float(pts.std(ddof=1) / math.sqrt(pts.size)) if pts.size > 1 else math.nan
    return mean, stderr


@dataclass
class ExperimentResult:
    lambda_hat: float
    stderr: float
    replicates: list
    config: dict
    wall_clock: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)
    lambda_vb: str = ""
    lambda_upper: str = ""

    @classmethod
    def from_replicates(cls, reps: dict, cfg_echo: dict, dims: ModelDims, hyper: Hyperparameters,
                        wall_clock=(), failed=None) -> "ExperimentResult":
        order = sorted(reps)
        replicates = [reps[d] for d in order]
        lam, se = aggregate(r.lambda_point for r in replicates)
        return cls(lam, se, replicates, cfg_echo, list(wall_clock), dict(failed or {}),
                   str(coefficients.lambda_vb(dims, hyper)),
                   str(coefficients.lambda_upper(dims, hyper)))

    @property
    def indices(self) -> list:
        D = self.config.get("D", len(self.replicates) + len(self.failed))
        return [d for d in range(D) if d not in self.failed and str(d) not in self.failed]

    def to_json(self) -> str:
        """Deterministic document; wall-clock times are kept out of it."""
        doc = {
            "lambda_hat": self.lambda_hat,
            "stderr": None if math.isnan(self.stderr) else self.stderr,
            "lambda_vb": self.lambda_vb,
            "lambda_upper": self.lambda_upper,
            "config": self.config,
            "failed": {str(k): v for k, v in self.failed.items()},
            "replicates": [
                dict(index=d, **json.loads(r.to_json())) for d, r in zip(self.indices, self.replicates)
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentResult":
        doc = json.loads(text)
        reps = [ReplicateEstimates.from_dict(r) for r in doc["replicates"]]
        lam, se = aggregate(r.lambda_point for r in reps)
        return cls(lam, se, reps, doc["config"], [], doc.get("failed", {}),
                   doc.get("lambda_vb", ""), doc.get("lambda_upper", ""))

    def replicates_csv(self) -> str:
        return replicates_to_csv(self.replicates, self.indices)

    def summary(self) -> str:
        """Header plus one comparison row, 3 significant digits."""
        upper = float(coefficients.exact(self.lambda_upper))
        se = "nan" if math.isnan(self.stderr) else f"{self.stderr:.3g}"
        h = self.config.get("hyper", {})
        n = self.config.get("n")
        lines = [
            "phi_U phi_V theta_U theta_V n lambda_vb lambda_upper lambda_hat stderr upper_minus_hat",
            f"{h.get('phi_u')} {h.get('phi_v')} {h.get('theta_u')} {h.get('theta_v')} {n} "
            f"{self.lambda_vb} {self.lambda_upper} {self.lambda_hat:.3g} {se} "
            f"{upper - self.lambda_hat:.3g}",
        ]
        return "\n".join(lines) + "\n"


def default_jobs() -> int:
    env = os.environ.get("NMFRLCT_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, jobs: int | None = None, order=None) -> ExperimentResult:
    """Run D replicates (in parallel when jobs > 1) and aggregate them by index.

    ``order`` permutes execution order only; aggregation is always by
    replicate index.  Failed replicates are dropped with a warning; more
    than 20% failures aborts.
    """
    jobs = default_jobs() if jobs is None else max(1, jobs)
    todo = list(range(cfg.D)) if order is None else list(order)
    if sorted(todo) != list(range(cfg.D)):
        raise DomainError("order must be a permutation of the replicate indices")
    args = [(cfg, d) for d in todo]
    if jobs == 1 or cfg.D == 1:
        outcomes = [_timed_replicate(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.D)) as pool:
            outcomes = list(pool.map(_timed_replicate, args))
    reps, failed, clock = {}, {}, [0.0] * cfg.D
    for d, est, err, secs in outcomes:
        clock[d] = secs
        if est is None:
            log.warning("replicate %d failed: %s", d, err)
            failed[d] = err
        else:
            reps[d] = est
    if len(failed) > MAX_FAILURE_FRACTION * cfg.D:
        raise NumericalError(f"{len(failed)} of {cfg.D} replicates failed; first: "
                             f"replicate {min(failed)}: {failed[min(failed)]}")
    return ExperimentResult.from_replicates(reps, cfg.echo(), cfg.dims, cfg.hyper, clock, failed)


def write_experiment(result: ExperimentResult, outdir):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "result.json"), "w") as fh:
        fh.write(result.to_json() + "\n")
    with open(os.path.join(outdir, "replicates.csv"), "w") as fh:
        fh.write(result.replicates_csv())
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write(result.summary())


# variational slope ---------------------------------------------------------

def fit_log_slope(n_grid, values) -> tuple[float, float]:
    """Least-squares a, b in values = a log n + b."""
    n_grid = np.asarray(n_grid, dtype=np.float64)
    A = np.column_stack([np.log(n_grid), np.ones_like(n_grid)])
    (a, b), *_ = np.linalg.lstsq(A, np.asarray(values, dtype=np.float64), rcond=None)
    return float(a), float(b)


def vb_slope_experiment(dims: ModelDims, hyper: Hyperparameters, truth: FactorPair, n_grid,
                        seeds, vb: VBConfig = VBConfig()) -> tuple[float, float]:
    """Empirical log n coefficient of F_vb - n S_n.

    For every seed one dataset of the largest size is drawn and each grid
    point uses its first n observations, so the grid shares randomness.  The
    per-n averages over seeds are regressed on log n.  Grid points where
    every fit fails are dropped; fewer than 3 survivors aborts.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if len(n_grid) < 3:
        raise DomainError("the slope fit needs at least 3 sample sizes")
    seeds = list(seeds)
    gaps = {n: [] for n in n_grid}
    for s in seeds:
        full = generate_dataset(truth, n_grid[-1], np.random.SeedSequence(s))
        for n in n_grid:
            data = CountDataset(full.observations[:n])
            cfg = VBConfig(vb.max_iters, vb.tol, np.random.SeedSequence(s, spawn_key=(n,)),
                           vb.restarts, vb.relative)
            try:
                res = fit(data, hyper, dims, cfg)
            except NumericalError as exc:
                log.warning("VB failed at n=%d, seed %s: %s", n, s, exc)
                continue
            gaps[n].append(res.free_energy - n * empirical_entropy(data, truth))
    kept = [n for n in n_grid if gaps[n]]
    if len(kept) < 3:
        raise NumericalError(f"only {len(kept)} grid points survived the VB fits")
    return fit_log_slope(kept, [np.mean(gaps[n]) for n in kept])
