"""WAIC, generalization error and the per-replicate learning-coefficient estimate."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .gibbs import PosteriorDraws
from .model import CountDataset, FactorPair, NumericalError, empirical_entropy


@dataclass(frozen=True)
class ReplicateEstimates:
    T_n: float
    V_n: float
    W_n: float
    G_n: float
    S_n: float
    lambda_point: float

    FIELDS = ("T_n", "V_n", "W_n", "G_n", "S_n", "lambda_point")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> list[str]:
        return [f"{getattr(self, f):.17g}" for f in self.FIELDS]

    @classmethod
    def from_dict(cls, d) -> "ReplicateEstimates":
        return cls(**{f: float(d[f]) for f in cls.FIELDS})


def predictive_stats(data: CountDataset, draws: PosteriorDraws):
    """Log predictive density, and mean/variance of log p(X_i | w) over draws.

    Returns three arrays of length n.
    """
    rates = draws.rates().reshape(draws.K, -1)
    if not (rates > 0).all():
        raise NumericalError("posterior draw with a zero Poisson rate")
    X = np.ascontiguousarray(data.observations.reshape(data.n, -1))
    lme, mean, var = kernels.predictive_stats(
        X, np.ascontiguousarray(data.log_factorials()),
        np.ascontiguousarray(np.log(rates)), np.ascontiguousarray(rates.sum(axis=1)))
    if not np.isfinite(lme).all():
        raise NumericalError("predictive density is zero or non-finite for some observation")
    return lme, mean, var


def empirical_loss(data: CountDataset, draws: PosteriorDraws) -> float:
    """T_n = -(1/n) sum_i log( (1/K) sum_k p(X_i | w_k) )."""
    lme, _, _ = predictive_stats(data, draws)
    return -float(np.mean(lme))


def functional_variance(data: CountDataset, draws: PosteriorDraws) -> float:
    """V_n = sum_i Var_w[log p(X_i | w)], population (1/K) normalisation."""
    _, _, var = predictive_stats(data, draws)
    return float(np.sum(var))


def waic(data: CountDataset, draws: PosteriorDraws) -> float:
    T, V = waic_terms(data, draws)
    return T + V / data.n


def waic_terms(data: CountDataset, draws: PosteriorDraws) -> tuple[float, float]:
    lme, _, var = predictive_stats(data, draws)
    return -float(np.mean(lme)), float(np.sum(var))


def generalization_error(test: CountDataset, draws: PosteriorDraws, truth: FactorPair) -> float:
    """Monte Carlo KL(q || predictive) over a test sample from the truth."""
    lme, _, _ = predictive_stats(test, draws)
    lq = -empirical_entropy(test, truth)
    return lq - float(np.mean(lme))


def rlct_point(G_n: float, W_n: float, S_n: float, n: int) -> float:
    return n * (G_n + W_n - S_n) / 2


def replicate_estimates(train: CountDataset, test: CountDataset, draws: PosteriorDraws,
                        truth: FactorPair) -> ReplicateEstimates:
    T, V = waic_terms(train, draws)
    W = T + V / train.n
    G = generalization_error(test, draws, truth)
    S = empirical_entropy(train, truth)
    lam = rlct_point(G, W, S, train.n)
    if not math.isfinite(lam):
        raise NumericalError("non-finite learning-coefficient estimate")
    return ReplicateEstimates(T, V, W, G, S, lam)


def replicates_to_csv(reps, index=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", *ReplicateEstimates.FIELDS])
    index = range(len(reps)) if index is None else index
    for d, r in zip(index, reps):
        w.writerow([d, *r.csv_row()])
    return buf.getvalue()
