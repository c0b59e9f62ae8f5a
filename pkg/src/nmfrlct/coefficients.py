"""Closed-form learning coefficients of Poisson-gamma NMF, in exact arithmetic.

All functions take :class:`ModelDims` and :class:`Hyperparameters` and return
:class:`fractions.Fraction`.  Hyperparameters are converted through their
decimal string form, so ``0.1`` means exactly 1/10.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

from .model import DomainError, Hyperparameters, ModelDims


def exact(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(str(x).strip())


def _terms(dims: ModelDims, hyper: Hyperparameters):
    if dims.H0 > dims.H:
        raise DomainError("H0 must not exceed H")
    a = dims.M * exact(hyper.phi_u)
    b = dims.N * exact(hyper.phi_v)
    return a, b, Fraction(dims.M + dims.N)


def below_transition(dims: ModelDims, hyper: Hyperparameters) -> bool:
    """True when M phi_U + N phi_V < (M + N) / 2."""
    a, b, mn = _terms(dims, hyper)
    return a + b < mn / 2


def lambda_vb(dims: ModelDims, hyper: Hyperparameters) -> Fraction:
    """log n coefficient of the variational free energy."""
    a, b, mn = _terms(dims, hyper)
    H, H0 = dims.H, dims.H0
    if a + b < mn / 2:
        return (H - H0) * (a + b) + H0 * mn / 2
    return H * mn / 2


def lambda_upper(dims: ModelDims, hyper: Hyperparameters) -> Fraction:
    """Upper bound on the real log canonical threshold of the Bayesian model."""
    a, b, mn = _terms(dims, hyper)
    return ((dims.H - dims.H0) * min(a, b) + dims.H0 * (mn - 1)) / 2


def lambda_exact_special(dims: ModelDims, hyper: Hyperparameters) -> Fraction | None:
    """Exact RLCT where it is known: no true components, or H = H0 = 1."""
    a, b, mn = _terms(dims, hyper)
    if dims.H0 == 0:
        return dims.H * min(a, b) / 2
    if dims.H == dims.H0 == 1:
        return (mn - 1) / 2
    return None


def lambda_gap_lower(dims: ModelDims, hyper: Hyperparameters, allow_zero_rank: bool = False) -> Fraction:
    """Lower bound on the log n coefficient of (variational - Bayes) free energy.

    Defined for H0 > 0.  ``allow_zero_rank`` evaluates the same formula at
    H0 = 0, which is how rank selection scores the empty model.
    """
    if dims.H0 == 0 and not allow_zero_rank:
        raise DomainError("the free-energy gap bound needs a positive true rank H0")
    a, b, mn = _terms(dims, hyper)
    d = dims.H - dims.H0
    if a + b < mn / 2:
        return (d * (a + b + max(a, b)) + dims.H0) / 2
    return (d * (mn - min(a, b)) + dims.H0) / 2


def bayes_bounds(dims: ModelDims, hyper: Hyperparameters, n, S_n) -> tuple[float, float]:
    """Leading-order upper bounds (n S_n + lam log n, lam / n) on F_n and E[G_n].

    The O_p(1) and o(1/n) remainders, and the multiplicity term, are not
    included.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    lam = float(lambda_upper(dims, hyper))
    return n * S_n + lam * math.log(n), lam / n


@dataclass(frozen=True)
class CoefficientReport:
    lambda_vb: Fraction
    lambda_upper: Fraction
    lambda_gap_lower: Fraction | None
    regular_half_d: Fraction
    vb_branch: str
    lambda_exact: Fraction | None
    dims: ModelDims
    hyper: Hyperparameters

    def rows(self):
        rows = [("lambda_vb", self.lambda_vb), ("lambda_upper", self.lambda_upper),
                ("lambda_gap_lower", self.lambda_gap_lower),
                ("regular_half_d", self.regular_half_d),
                ("lambda_exact", self.lambda_exact)]
        return [(k, "-" if v is None else str(v)) for k, v in rows]

    def table(self) -> str:
        d = self.dims
        head = (f"M={d.M} N={d.N} H={d.H} H0={d.H0}  "
                f"phi_U={self.hyper.phi_u} theta_U={self.hyper.theta_u} "
                f"phi_V={self.hyper.phi_v} theta_V={self.hyper.theta_v}  "
                f"branch={self.vb_branch}")
        width = max(len(k) for k, _ in self.rows())
        lines = [head] + [f"  {k:<{width}}  {v}" for k, v in self.rows()]
        return "\n".join(lines)

    def to_json(self) -> str:
        def enc(v):
            return None if v is None else {"exact": str(v), "float": float(v)}

        doc = {
            "dims": vars(self.dims),
            "hyper": self.hyper.as_dict(),
            "vb_branch": self.vb_branch,
            "lambda_vb": enc(self.lambda_vb),
            "lambda_upper": enc(self.lambda_upper),
            "lambda_gap_lower": enc(self.lambda_gap_lower),
            "regular_half_d": enc(self.regular_half_d),
            "lambda_exact": enc(self.lambda_exact),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def report(dims: ModelDims, hyper: Hyperparameters) -> CoefficientReport:
    return CoefficientReport(
        lambda_vb=lambda_vb(dims, hyper),
        lambda_upper=lambda_upper(dims, hyper),
        lambda_gap_lower=lambda_gap_lower(dims, hyper) if dims.H0 > 0 else None,
        regular_half_d=Fraction(dims.H * (dims.M + dims.N), 2),
        vb_branch="below" if below_transition(dims, hyper) else "at-or-above",
        lambda_exact=lambda_exact_special(dims, hyper),
        dims=dims,
        hyper=hyper,
    )


def select_rank(free_energies: dict, dims: ModelDims, hyper: Hyperparameters, n) -> int:
    """Choose H0 minimising F_vb(H0) - gap_lower(H0) * log n.

    ``free_energies`` maps candidate ranks 0..H to variational free
    energies.  The gap bound is evaluated with the model size ``dims.H`` and
    the candidate as true rank; at H0 = 0 the same formula is extended.
    Ties go to the smaller rank.
    """
    if not free_energies:
        raise DomainError("no candidate ranks to select from")
    logn = math.log(n)
    best, best_score = None, math.inf
    for h0 in sorted(free_energies):
        cand = ModelDims(dims.M, dims.N, dims.H, h0)
        score = free_energies[h0] - float(lambda_gap_lower(cand, hyper, allow_zero_rank=True)) * logn
        if best is None or score < best_score:
            best, best_score = h0, score
    return best
