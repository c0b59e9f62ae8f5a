"""Poisson-gamma NMF model: densities, simulated data, empirical entropy, file I/O.

Observation matrices X (M x N counts) are modelled as independent Poisson
entries with mean (UV)_ij; U (M x H) and V (H x N) carry entrywise
shape-rate gamma priors.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import gammaln

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """An argument lies outside the support of a density or model."""


class NumericalError(ArithmeticError):
    """A computation produced a degenerate or non-finite value."""


@dataclass(frozen=True)
class ModelDims:
    M: int
    N: int
    H: int
    H0: int

    def __post_init__(self):
        for name in ("M", "N", "H"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.H0 <= self.H:
            raise DomainError(f"need 0 <= H0 <= H, got H0={self.H0}, H={self.H}")

    @property
    def n_params(self) -> int:
        return self.H * (self.M + self.N)


def _to_float(v) -> float:
    return float(Fraction(v.strip())) if isinstance(v, str) else float(v)


@dataclass(frozen=True)
class Hyperparameters:
    """Shape/rate constants of the gamma priors on U and V.

    Values may be floats, ints, strings such as ``"1/4"`` or
    :class:`fractions.Fraction`; they are kept as given so the closed-form
    coefficients can be evaluated exactly.
    """

    phi_u: object = 1.0
    theta_u: object = 1.0
    phi_v: object = 1.0
    theta_v: object = 1.0

    def __post_init__(self):
        for name in ("phi_u", "theta_u", "phi_v", "theta_v"):
            try:
                value = _to_float(getattr(self, name))
            except (TypeError, ValueError, ZeroDivisionError):
                raise DomainError(f"{name}: not a number: {getattr(self, name)!r}") from None
            if not value > 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")

    def floats(self) -> tuple[float, float, float, float]:
        return (_to_float(self.phi_u), _to_float(self.theta_u),
                _to_float(self.phi_v), _to_float(self.theta_v))

    def as_dict(self) -> dict:
        return {k: str(v) if not isinstance(v, (int, float)) else v
                for k, v in vars(self).items()}


@dataclass
class FactorPair:
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[0]:
            raise DomainError(f"incompatible factor shapes {self.U.shape} and {self.V.shape}")
        if (self.U < 0).any() or (self.V < 0).any():
            raise DomainError("factor entries must be non-negative")

    @property
    def rate(self) -> np.ndarray:
        return self.U @ self.V

    @property
    def shape(self) -> tuple[int, int, int]:
        """(M, N, inner dimension)."""
        return self.U.shape[0], self.V.shape[1], self.U.shape[1]

    def check_dims(self, dims: ModelDims, inner: int | None = None):
        inner = dims.H if inner is None else inner
        if self.shape != (dims.M, dims.N, inner):
            raise DomainError(f"factor shape {self.shape} does not match "
                              f"M={dims.M}, N={dims.N}, H={inner}")


@dataclass
class CountDataset:
    """n observed count matrices, stored as an (n, M, N) int64 array."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations)
        if obs.ndim == 2:
            obs = obs[None]
        if obs.ndim != 3:
            raise DomainError(f"expected (n, M, N) counts, got shape {obs.shape}")
        if obs.size and (np.any(obs < 0) or np.any(obs != np.round(obs))):
            raise DomainError("counts must be non-negative integers")
        self.observations = obs.astype(np.int64)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.observations.shape[1], self.observations.shape[2]

    def total(self) -> np.ndarray:
        """Entrywise sum over observations, the sufficient statistic of the model."""
        return self.observations.sum(axis=0)

    def log_factorials(self) -> np.ndarray:
        """sum_ij log(x_ij!) per observation."""
        return gammaln(self.observations + 1.0).reshape(self.n, -1).sum(axis=1)


def poisson_log_pmf(x, rate):
    """log of rate**x exp(-rate) / x!, elementwise."""
    x = np.asarray(x)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(x < 0) or np.any(x != np.floor(x)):
        raise DomainError("Poisson count must be a non-negative integer")
    if np.any(rate <= 0):
        raise DomainError("Poisson rate must be positive")
    out = x * np.log(rate) - rate - gammaln(x + 1.0)
    return float(out) if out.ndim == 0 else out


def _loglik_entries(X: np.ndarray, rate: np.ndarray) -> np.ndarray:
    # 0 log 0 := 0; positive count at zero rate gives -inf
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogr = np.where(X > 0, X * np.log(rate), 0.0)
    return xlogr - rate - gammaln(X + 1.0)


def log_likelihood(X, params: FactorPair) -> float:
    """Poisson log-likelihood of one count matrix (or a stack of them).

    Returns ``-inf`` (with a warning) when some entry has a positive count
    under a zero rate.
    """
    X = np.asarray(X)
    rate = params.rate
    if X.shape[-2:] != rate.shape:
        raise DomainError(f"count shape {X.shape} does not match rate shape {rate.shape}")
    total = float(_loglik_entries(X, np.broadcast_to(rate, X.shape)).sum())
    if total == -np.inf:
        log.warning("positive count at a zero Poisson rate; log-likelihood is -inf")
    return total


def log_prior(params: FactorPair, hyper: Hyperparameters) -> float:
    phi_u, theta_u, phi_v, theta_v = hyper.floats()
    if (params.U <= 0).any() or (params.V <= 0).any():
        raise DomainError("gamma prior density is evaluated on strictly positive entries only")

    def gamma_logpdf(x, shape, rate):
        return np.sum(shape * math.log(rate) - gammaln(shape)
                      + (shape - 1.0) * np.log(x) - rate * x)

    return float(gamma_logpdf(params.U, phi_u, theta_u) + gamma_logpdf(params.V, phi_v, theta_v))


def as_generator(seed) -> np.random.Generator:
    """Generator from an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


def generate_dataset(truth: FactorPair, n: int, seed) -> CountDataset:
    """Draw n i.i.d. count matrices with entry (i, j) ~ Poisson((U0 V0)_ij)."""
    if n < 1:
        raise DomainError(f"sample size must be >= 1, got {n}")
    rate = truth.rate
    if not (rate > 0).all():
        raise DomainError("true rate matrix U0 V0 must be strictly positive")
    rng = as_generator(seed)
    return CountDataset(rng.poisson(rate, size=(n, *rate.shape)))


def observation_loglik(data: CountDataset, params: FactorPair) -> np.ndarray:
    """Per-observation log-likelihoods, shape (n,)."""
    rate = params.rate
    return _loglik_entries(data.observations, rate).reshape(data.n, -1).sum(axis=1)


def empirical_entropy(data: CountDataset, truth: FactorPair) -> float:
    """S_n = -(1/n) sum_i log q(X_i) under the true factors."""
    if not (truth.rate > 0).all():
        raise DomainError("true rates must be positive")
    return -float(observation_loglik(data, truth).mean())


# file formats -------------------------------------------------------------

def write_matrix_csv(path, A, integer: bool = False):
    A = np.atleast_2d(np.asarray(A))
    fmt = "%d" if integer else "%.17g"
    np.savetxt(path, A, fmt=fmt, delimiter=",")


def read_matrix_csv(path) -> np.ndarray:
    A = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return A


def write_dataset_jsonl(path, data: CountDataset):
    with open(path, "w") as fh:
        for X in data.observations:
            fh.write(json.dumps(X.tolist(), separators=(",", ":")) + "\n")


def read_dataset_jsonl(path) -> CountDataset:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                X = np.array(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            except ValueError:
                X = np.empty(0)
            if X.ndim != 2 or (rows and X.shape != rows[0].shape):
                want = "a rectangular matrix" if not rows else f"shape {rows[0].shape}"
                raise DomainError(f"{path}:{lineno}: expected {want}, got {X.shape}")
            if X.dtype.kind not in "iu" or (X < 0).any():
                raise DomainError(f"{path}:{lineno}: counts must be non-negative integers")
            rows.append(X)
    if not rows:
        raise DomainError(f"{path}: no observations")
    return CountDataset(np.array(rows))


def read_factor_pair(u_path, v_path) -> FactorPair:
    return FactorPair(read_matrix_csv(Path(u_path)), read_matrix_csv(Path(v_path)))
