"""Population-size estimators and Monte Carlo quality measures."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, EmptyInputError, UndefinedEstimateError
from .patterns import LinkageParams, pattern_probs


class EstimatorKind(enum.Enum):
    DSE = "DSE"
    DSE_FLOOR = "DSE_FLOOR"
    DSE_EPS = "DSE_EPS"
    LFDSE = "LFDSE"


@dataclass(frozen=True)
class DualCounts:
    """List sizes ``n1p`` and ``np1`` and the number of elements on both."""

    n1p: int
    np1: int
    n11: int

    def __post_init__(self):
        if min(self.n1p, self.np1, self.n11) < 0:
            raise ValueError("counts must be nonnegative")
        if self.n11 > min(self.n1p, self.np1):
            raise ValueError(f"n11={self.n11} exceeds a list size ({self.n1p}, {self.np1})")

    @property
    def omega(self) -> int:
        """Number of cross-list record pairs."""
        return self.n1p * self.np1


@dataclass(frozen=True)
class PopulationEstimate:
    value: float
    estimator_kind: EstimatorKind

    def __float__(self):
        return self.value


def _estimate(value, kind):
    if not (value > 0 and math.isfinite(value)):
        raise UndefinedEstimateError(f"{kind.value} estimate is not positive and finite: {value}")
    return PopulationEstimate(float(value), kind)


def dse(counts: DualCounts) -> PopulationEstimate:
    """Dual system estimate ``n1p * np1 / n11``."""
    if counts.n11 < 1:
        raise UndefinedEstimateError("no elements observed on both lists (n11 = 0)")
    return _estimate(counts.n1p * counts.np1 / counts.n11, EstimatorKind.DSE)


def dse_floor(counts: DualCounts) -> PopulationEstimate:
    """Integer-valued maximum-likelihood form of the DSE."""
    if counts.n11 < 1:
        raise UndefinedEstimateError("no elements observed on both lists (n11 = 0)")
    return _estimate((counts.n1p * counts.np1) // counts.n11, EstimatorKind.DSE_FLOOR)


def dse_with_error(counts: DualCounts, eps: float, direction: int = 1) -> PopulationEstimate:
    """DSE whose match count is shifted by a net linkage error.

    ``direction`` is +1 for a net excess of false links and -1 for a net
    excess of missed matches.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    denom = counts.n11 + direction * eps
    if denom <= 0:
        raise UndefinedEstimateError(f"adjusted match count {denom} is not positive")
    return _estimate(counts.n1p * counts.np1 / denom, EstimatorKind.DSE_EPS)


def lfdse(p_hat: float) -> PopulationEstimate:
    """Linkage-free estimate: the reciprocal of the fitted match proportion."""
    if not p_hat > 0:
        raise UndefinedEstimateError(f"match proportion must be positive, got {p_hat}")
    if p_hat >= 1:
        raise ValueError(f"match proportion must be below 1, got {p_hat}")
    return _estimate(1.0 / p_hat, EstimatorKind.LFDSE)


def estimated_matches(p_hat: float, omega: int) -> float:
    """Expected number of matched pairs, ``p_hat * omega``."""
    if omega < 1:
        raise ValueError("omega must be at least 1")
    return p_hat * omega


def estimated_matches_by_pattern(params: LinkageParams, omega: int) -> np.ndarray:
    """Expected matched pairs per pattern (lexicographic order).

    Sums to :func:`estimated_matches` because the joint m-probabilities sum
    to one.
    """
    if omega < 1:
        raise ValueError("omega must be at least 1")
    return params.p * pattern_probs(params.m, clamp=0.0) * omega


def net_error_epsilon(rrmse_lfdse: float, var_dse: float, N: int, p1: float, p2: float) -> tuple[float, float]:
    """Net linkage error that would make the DSE as inaccurate as the LFDSE.

    Treats the error-perturbed DSE as having the same variance as the
    perfect-linkage DSE, so its bias must make up the excess mean square
    error of the LFDSE.  List inclusion is independent, so the expected
    product of list sizes is ``N**2 p1 p2`` and the expected match count
    ``N p1 p2``.

    Parameters
    ----------
    rrmse_lfdse : float
        Relative RMSE of the LFDSE as a fraction (not a percentage).
    var_dse : float
        Variance of the perfect-linkage DSE.

    Returns
    -------
    eps : float
        Net number of erroneous matches.
    eps_pct : float
        ``eps`` as a percentage of the expected match count.

    Raises
    ------
    DomainError
        When the LFDSE's mean square error is below the DSE variance.
    """
    bracket = (rrmse_lfdse * N) ** 2 - var_dse
    if bracket < 0:
        raise DomainError(
            "LFDSE mean square error is below the DSE variance; no net error matches it"
        )
    expected_matches = N * p1 * p2
    expected_product = N * N * p1 * p2
    eps = abs(expected_product / (N + math.sqrt(bracket)) - expected_matches)
    return eps, eps / expected_matches * 100.0


def metrics(estimates: Sequence[float], N: int) -> tuple[float, float, float]:
    """Relative bias, relative standard error and relative RMSE (fractions).

    The variance is the population variance over the replicates.
    """
    x = np.asarray(estimates, dtype=float)
    if x.size == 0:
        raise EmptyInputError("no estimates to summarise")
    if not np.all(np.isfinite(x)):
        raise ValueError("estimates must be finite")
    mean = x.mean()
    var = x.var()
    bias = mean - N
    rb = bias / N
    rse = math.sqrt(var) / N
    rrmse = math.sqrt(var + bias * bias) / N
    return float(rb), float(rse), float(rrmse)
