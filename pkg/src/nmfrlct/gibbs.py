"""Gibbs sampling for Poisson-gamma NMF by latent-source augmentation.

Each count x_ij is split into per-component sources s_ijk with
s_ij. ~ Multinomial(x_ij, p_k ~ u_ik v_kj); given the sources, every entry of
U and V has a gamma full conditional.  Because all n observations share the
same allocation probabilities, the sources of the summed counts carry the
same sufficient statistics, so a sweep costs O(MNH) whatever n is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _fallback, kernels
from .model import (CountDataset, DomainError, FactorPair, Hyperparameters,
                    ModelDims, as_generator, observation_loglik)


@dataclass(frozen=True)
class GibbsConfig:
    burn_in: int = 20000
    thin: int = 20
    K: int = 1000
    seed: object = 0

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1 or self.K < 1:
            raise DomainError(f"invalid Gibbs schedule burn_in={self.burn_in}, "
                              f"thin={self.thin}, K={self.K}")

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.thin * self.K


@dataclass
class PosteriorDraws:
    """K retained posterior draws stored as (K, M, H) and (K, H, N) arrays."""

    U: np.ndarray
    V: np.ndarray
    dims: ModelDims | None = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 3 or self.V.ndim != 3 or self.U.shape[0] != self.V.shape[0]:
            raise DomainError("draw arrays must be (K, M, H) and (K, H, N)")

    @property
    def K(self) -> int:
        return self.U.shape[0]

    def __len__(self):
        return self.K

    def __getitem__(self, k) -> FactorPair:
        return FactorPair(self.U[k], self.V[k])

    @property
    def draws(self) -> list[FactorPair]:
        return [self[k] for k in range(self.K)]

    @classmethod
    def from_pairs(cls, pairs, dims=None) -> "PosteriorDraws":
        pairs = list(pairs)
        return cls(np.stack([p.U for p in pairs]), np.stack([p.V for p in pairs]), dims)

    def rates(self) -> np.ndarray:
        """(K, M, N) Poisson rate matrices of every draw."""
        return np.einsum("kmh,khn->kmn", self.U, self.V)

    def loglik(self, data: CountDataset) -> np.ndarray:
        """(n, K) matrix of log p(X_i | w_k)."""
        return np.stack([observation_loglik(data, self[k]) for k in range(self.K)], axis=1)


@dataclass
class LatentSources:
    """Allocations s[..., i, j, k] of counts to components; leading axis per observation."""

    s: np.ndarray
    counts: np.ndarray = field(repr=False)

    @property
    def su(self) -> np.ndarray:
        """sum over observations and columns, shape (M, H)."""
        return self.s.reshape(-1, *self.s.shape[-3:]).sum(axis=(0, 2))

    @property
    def sv(self) -> np.ndarray:
        """sum over observations and rows, shape (H, N)."""
        return self.s.reshape(-1, *self.s.shape[-3:]).sum(axis=(0, 1)).T

    def conserved(self) -> bool:
        return bool(np.array_equal(self.s.sum(axis=-1), self.counts))


def sample_latent_sources(X, params: FactorPair, rng) -> LatentSources:
    """Allocate the counts of one matrix, or of each matrix in an (n, M, N) stack."""
    X = np.asarray(X, dtype=np.int64)
    rng = as_generator(rng)
    if X.ndim == 2:
        s = _fallback.allocate(rng, X, params.U, params.V)
    else:
        s = np.stack([_fallback.allocate(rng, x, params.U, params.V) for x in X])
    return LatentSources(s, X)


def update_factors(sources: LatentSources, params: FactorPair, hyper: Hyperparameters,
                   rng, n: int) -> FactorPair:
    """Draw U | V, sources and then V | new U, sources from their gamma conditionals."""
    phi_u, theta_u, phi_v, theta_v = hyper.floats()
    rng = as_generator(rng)
    U = _fallback.update_u(rng, sources.su, params.V, n, phi_u, theta_u)
    V = _fallback.update_v(rng, sources.sv, U, n, phi_v, theta_v)
    return FactorPair(U, V)


def sample_prior(dims: ModelDims, hyper: Hyperparameters, rng, H: int | None = None) -> FactorPair:
    H = dims.H if H is None else H
    phi_u, theta_u, phi_v, theta_v = hyper.floats()
    U = _fallback.gamma_boosted(rng, np.full((dims.M, H), phi_u)) / theta_u
    V = _fallback.gamma_boosted(rng, np.full((H, dims.N), phi_v)) / theta_v
    return FactorPair(U, V)


def run_chain(data: CountDataset, hyper: Hyperparameters, dims: ModelDims,
              cfg: GibbsConfig, init: FactorPair | None = None) -> PosteriorDraws:
    """Run burn_in + thin*K sweeps and keep the (burn_in + thin*k)-th states.

    The chain starts from a prior draw unless ``init`` is given.
    """
    if data.shape != (dims.M, dims.N):
        raise DomainError(f"data shape {data.shape} does not match M={dims.M}, N={dims.N}")
    rng = as_generator(cfg.seed)
    start = sample_prior(dims, hyper, rng) if init is None else init
    start.check_dims(dims)
    U = np.ascontiguousarray(start.U, dtype=np.float64).copy()
    V = np.ascontiguousarray(start.V, dtype=np.float64).copy()
    xsum = np.ascontiguousarray(data.total(), dtype=np.int64)
    Ud, Vd = kernels.gibbs_sweeps(rng, xsum, data.n, U, V, *hyper.floats(),
                                  cfg.burn_in, cfg.thin, cfg.K)
    return PosteriorDraws(Ud, Vd, dims)


def write_draws_jsonl(path, draws: PosteriorDraws):
    with open(path, "w") as fh:
        for k in range(draws.K):
            rec = {"U": draws.U[k].tolist(), "V": draws.V[k].tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_draws_jsonl(path, dims=None) -> PosteriorDraws:
    Us, Vs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                Us.append(rec["U"])
                Vs.append(rec["V"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DomainError(f"{path}:{lineno}: bad draw record ({exc})") from None
    return PosteriorDraws(np.array(Us), np.array(Vs), dims)
