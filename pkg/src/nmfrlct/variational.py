"""Mean-field variational Bayes for Poisson-gamma NMF.

The variational family is entrywise gamma for U and V together with
multinomial responsibilities for the latent sources.  Since all
observations share one set of responsibilities, only the summed counts and
n enter the updates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, logsumexp

from . import _fallback, kernels
from .model import (CountDataset, DomainError, Hyperparameters, ModelDims,
                    NumericalError, as_generator)

log = logging.getLogger(__name__)


@dataclass
class VariationalPosterior:
    u_shape: np.ndarray
    u_rate: np.ndarray
    v_shape: np.ndarray
    v_rate: np.ndarray

    def __post_init__(self):
        for name in ("u_shape", "u_rate", "v_shape", "v_rate"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not (a > 0).all():
                raise DomainError(f"{name} must be strictly positive")
            setattr(self, name, a)

    def mean_u(self):
        return self.u_shape / self.u_rate

    def mean_v(self):
        return self.v_shape / self.v_rate

    def mean_log_u(self):
        return digamma(self.u_shape) - np.log(self.u_rate)

    def mean_log_v(self):
        return digamma(self.v_shape) - np.log(self.v_rate)

    def as_dict(self):
        return {k: getattr(self, k).tolist() for k in ("u_shape", "u_rate", "v_shape", "v_rate")}

    @classmethod
    def prior(cls, dims: ModelDims, hyper: Hyperparameters, H: int | None = None):
        H = dims.H if H is None else H
        pu, tu, pv, tv = hyper.floats()
        return cls(np.full((dims.M, H), pu), np.full((dims.M, H), tu),
                   np.full((H, dims.N), pv), np.full((H, dims.N), tv))


@dataclass(frozen=True)
class VBConfig:
    """Stopping rule: stop once the decrease of the free energy falls below
    ``tol * (1 + |F|)`` (or below ``tol`` when ``relative`` is false)."""

    max_iters: int = 10_000
    tol: float = 1e-8
    seed: object = 0
    restarts: int = 5
    relative: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1 or self.restarts < 1:
            raise DomainError("VBConfig needs tol > 0, max_iters >= 1, restarts >= 1")


@dataclass
class VBFit:
    posterior: VariationalPosterior
    free_energy: float
    trajectory: list = field(default_factory=list)
    converged: bool = False

    def to_json(self) -> str:
        doc = {"free_energy": self.free_energy, "converged": self.converged,
               "posterior": self.posterior.as_dict(), "trajectory": list(self.trajectory)}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VBFit":
        doc = json.loads(text)
        return cls(VariationalPosterior(**doc["posterior"]), doc["free_energy"],
                   doc["trajectory"], doc.get("converged", False))


def _suff(data: CountDataset):
    return np.ascontiguousarray(data.total(), dtype=np.float64), data.n


def _log_weights(post: VariationalPosterior):
    """E[log u_ik] + E[log v_kj] arranged as (M, N, H)."""
    return post.mean_log_u()[:, None, :] + post.mean_log_v().T[None, :, :]


def responsibilities(post: VariationalPosterior) -> np.ndarray:
    lw = _log_weights(post)
    return np.exp(lw - logsumexp(lw, axis=2, keepdims=True))


def vb_update_step(post: VariationalPosterior, data: CountDataset,
                   hyper: Hyperparameters) -> VariationalPosterior:
    """One coordinate pass: responsibilities, q(U), responsibilities, q(V)."""
    Xs, n = _suff(data)
    return VariationalPosterior(*_fallback.vb_step(
        Xs, n, post.u_shape, post.u_rate, post.v_shape, post.v_rate, *hyper.floats()))


def variational_free_energy(post: VariationalPosterior, data: CountDataset,
                            hyper: Hyperparameters) -> float:
    """Free-energy functional at ``post``, responsibilities set to their optimum.

    KL(q(U) || prior) + KL(q(V) || prior) plus the expected negative
    log-likelihood, bounded through the source allocation.
    """
    Xs, n = _suff(data)
    lfact = float(np.sum(data.log_factorials())) if n else 0.0
    return _fallback.vb_free_energy(Xs, n, lfact, post.u_shape, post.u_rate,
                                    post.v_shape, post.v_rate, *hyper.floats())


def initial_posterior(dims: ModelDims, hyper: Hyperparameters, n: int, rng,
                      H: int | None = None) -> VariationalPosterior:
    H = dims.H if H is None else H
    pu, tu, pv, tv = hyper.floats()
    M, N = dims.M, dims.N
    return VariationalPosterior(
        pu + rng.random((M, H)), np.full((M, H), tu + n * N * pv / tv),
        pv + rng.random((H, N)), np.full((H, N), tv + n * M * pu / tu))


def _run(post: VariationalPosterior, data: CountDataset, hyper, cfg: VBConfig) -> VBFit:
    Xs, n = _suff(data)
    lfact = float(np.sum(data.log_factorials())) if n else 0.0
    state = [np.ascontiguousarray(a, dtype=np.float64).copy()
             for a in (post.u_shape, post.u_rate, post.v_shape, post.v_rate)]
    traj, converged = kernels.vb_iterate(Xs, float(n), lfact, *state, *hyper.floats(),
                                         cfg.max_iters, cfg.tol, cfg.relative)
    traj = [float(x) for x in traj]
    if not all(math.isfinite(x) for x in traj):
        return VBFit(post, math.inf, traj, False)
    return VBFit(VariationalPosterior(*state), traj[-1], traj, converged)


def fit(data: CountDataset, hyper: Hyperparameters, dims: ModelDims,
        cfg: VBConfig = VBConfig()) -> VBFit:
    """Minimise the free-energy functional from ``cfg.restarts`` random starts.

    Returns the restart with the lowest final free energy.  A start whose
    free energy turns non-finite is redrawn, at most three times.
    """
    if data.shape != (dims.M, dims.N):
        raise DomainError(f"data shape {data.shape} does not match M={dims.M}, N={dims.N}")
    rng = as_generator(cfg.seed)
    best = None
    for _ in range(cfg.restarts):
        for attempt in range(4):
            res = _run(initial_posterior(dims, hyper, data.n, rng), data, hyper, cfg)
            if math.isfinite(res.free_energy):
                break
            log.warning("non-finite variational free energy, redrawing start (%d)", attempt + 1)
        else:
            raise NumericalError("variational free energy stayed non-finite after 3 retries")
        if best is None or res.free_energy < best.free_energy:
            best = res
    return best
