"""Comparison patterns, joint pattern probabilities and the Fellegi-Sunter rule.

A comparison pattern is a tuple of 0/1 agreement outcomes, one per linkage
variable.  Patterns are always enumerated in lexicographic order, which is
also the order of their integer codes when the first variable is the most
significant bit.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import AdmissibilityError, BoundsError, ParseError, ShapeError

Pattern = tuple[int, ...]

MAX_K = 20
PROB_CLAMP = 1e-9
# absolute slack for cumulative-probability comparisons against mu / lambda
_CUM_TOL = 1e-12
# relative tolerance for treating two weights as tied
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class LinkageParams:
    """Two-component mixture parameters.

    Attributes
    ----------
    m : tuple of float
        Per-variable agreement probabilities among matches.
    u : tuple of float
        Per-variable agreement probabilities among non-matches.
    p : float
        Proportion of matched pairs among all pairs.
    """

    m: tuple[float, ...]
    u: tuple[float, ...]
    p: float

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(float(x) for x in self.m))
        object.__setattr__(self, "u", tuple(float(x) for x in self.u))
        object.__setattr__(self, "p", float(self.p))
        if len(self.m) != len(self.u):
            raise ShapeError(f"m has length {len(self.m)} but u has length {len(self.u)}")
        if len(self.m) == 0:
            raise ShapeError("at least one comparison variable is required")
        for x in (*self.m, *self.u, self.p):
            if not 0.0 <= x <= 1.0 or math.isnan(x):
                raise ValueError(f"probability out of [0, 1]: {x}")

    @property
    def k(self) -> int:
        return len(self.m)

    def clamped(self, eps: float = PROB_CLAMP) -> "LinkageParams":
        """Return a copy with every probability clipped to [eps, 1 - eps]."""
        lo, hi = eps, 1.0 - eps
        return LinkageParams(
            tuple(min(max(x, lo), hi) for x in self.m),
            tuple(min(max(x, lo), hi) for x in self.u),
            min(max(self.p, lo), hi),
        )

    def permuted(self, order: Sequence[int]) -> "LinkageParams":
        return LinkageParams(
            tuple(self.m[i] for i in order), tuple(self.u[i] for i in order), self.p
        )


class LinkDecision(enum.Enum):
    LINK = "link"
    POSSIBLE_LINK = "possible_link"
    NON_LINK = "non_link"


@dataclass(frozen=True)
class DecisionThresholds:
    """Thresholds of the three-way linkage rule.

    ``t_mu`` is ``inf`` when no pattern can be linked within the FP bound and
    ``t_lambda`` is ``0`` when no pattern can be rejected within the FN bound.
    ``ordering`` lists every pattern by descending match weight.
    """

    t_mu: float
    t_lambda: float
    ordering: tuple[Pattern, ...]

    def __post_init__(self):
        if self.t_lambda > self.t_mu:
            raise AdmissibilityError(
                f"t_lambda={self.t_lambda} exceeds t_mu={self.t_mu}"
            )


def enumerate_patterns(k: int) -> list[Pattern]:
    """All ``2**k`` binary patterns in lexicographic order."""
    _check_k(k)
    return list(itertools.product((0, 1), repeat=k))


@lru_cache(maxsize=None)
def _pattern_matrix(k: int) -> np.ndarray:
    codes = np.arange(2**k, dtype=np.int64)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)
    mat = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
    mat.setflags(write=False)
    return mat


def pattern_matrix(k: int) -> np.ndarray:
    """Read-only ``(2**k, k)`` int8 array of all patterns, lexicographic rows."""
    _check_k(k)
    return _pattern_matrix(k)


def pattern_index(pattern: Sequence[int]) -> int:
    """Row of ``pattern`` in :func:`pattern_matrix` (its binary code)."""
    code = 0
    for bit in pattern:
        code = (code << 1) | int(bit)
    return code


def _check_k(k):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_K:
        raise BoundsError(f"k must be an integer in [1, {MAX_K}], got {k!r}")


def _check_pattern(pattern, k=None):
    pattern = tuple(int(b) for b in pattern)
    if any(b not in (0, 1) for b in pattern):
        raise ValueError(f"pattern components must be 0 or 1: {pattern}")
    if k is not None and len(pattern) != k:
        raise ShapeError(f"pattern has {len(pattern)} components, expected {k}")
    return pattern


def _clip(probs, clamp):
    probs = np.asarray(probs, dtype=float)
    if clamp > 0:
        probs = np.clip(probs, clamp, 1.0 - clamp)
    return probs


def log_joint_prob(probs: Sequence[float], pattern: Sequence[int], clamp: float = PROB_CLAMP) -> float:
    probs = _clip(probs, clamp)
    pattern = _check_pattern(pattern, len(probs))
    total = 0.0
    for q, bit in zip(probs, pattern):
        total += math.log(q) if bit else math.log1p(-q)
    return total


def joint_prob(probs: Sequence[float], pattern: Sequence[int], clamp: float = PROB_CLAMP) -> float:
    """Probability of ``pattern`` under independent per-variable agreement.

    Computes ``prod_v probs[v]**g_v * (1 - probs[v])**(1 - g_v)`` in log space.
    Inputs are clipped to ``[clamp, 1 - clamp]`` first.
    """
    return math.exp(log_joint_prob(probs, pattern, clamp))


def log_pattern_probs(probs: Sequence[float], clamp: float = PROB_CLAMP) -> np.ndarray:
    """Log joint probability of every pattern, lexicographic order."""
    probs = _clip(probs, clamp)
    mat = pattern_matrix(len(probs))
    with np.errstate(divide="ignore"):
        log_q = np.log(probs)
        log_1q = np.log1p(-probs)
    terms = np.where(mat == 1, log_q, log_1q)
    return terms.sum(axis=1)


def pattern_probs(probs: Sequence[float], clamp: float = PROB_CLAMP) -> np.ndarray:
    """Joint probability of every pattern (sums to one), lexicographic order.

    With ``clamp=0`` degenerate probabilities of exactly 0 or 1 are honoured.
    """
    probs = _clip(probs, clamp)
    mat = pattern_matrix(len(probs))
    return np.where(mat == 1, probs, 1.0 - probs).prod(axis=1)


def log_match_weight(params: LinkageParams, pattern: Sequence[int]) -> float:
    return log_joint_prob(params.m, pattern) - log_joint_prob(params.u, pattern)


def match_weight(params: LinkageParams, pattern: Sequence[int]) -> float:
    """Likelihood ratio ``m(pattern) / u(pattern)``."""
    return math.exp(log_match_weight(params, pattern))


def log_match_weights(params: LinkageParams) -> np.ndarray:
    return log_pattern_probs(params.m) - log_pattern_probs(params.u)


def _tie_groups(sorted_logw):
    """Start/stop index pairs of runs of (numerically) equal weights."""
    groups = []
    start = 0
    for i in range(1, len(sorted_logw) + 1):
        if i == len(sorted_logw) or not _tied(sorted_logw[i - 1], sorted_logw[i]):
            groups.append((start, i))
            start = i
    return groups


def _tied(a, b):
    return math.isclose(math.exp(a - b), 1.0, rel_tol=_TIE_RTOL, abs_tol=0.0)


def derive_thresholds(params: LinkageParams, mu: float, lam: float) -> DecisionThresholds:
    """Thresholds of the optimal rule at FP level ``mu`` and FN level ``lam``.

    Patterns are ranked by descending weight (ties keep lexicographic order).
    The rule is admissible when the first index whose cumulative u-probability
    reaches ``mu`` lies strictly before the last index whose tail cumulative
    m-probability reaches ``lam``.

    Boundary patterns are handled conservatively: the link set is the longest
    run of whole tie groups from the top whose total u-probability stays at or
    below ``mu``; the non-link set is the analogous run from the bottom under
    ``lam``. Everything else is a possible link.

    Raises
    ------
    AdmissibilityError
        If the two index conditions cross.
    """
    for name, level in (("mu", mu), ("lambda", lam)):
        if not 0.0 < level < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {level}")
    params = params.clamped()
    k = params.k
    logw = log_match_weights(params)
    order = np.argsort(-logw, kind="stable")
    logw_sorted = logw[order]
    u_sorted = pattern_probs(params.u)[order]
    m_sorted = pattern_probs(params.m)[order]
    n_total = len(order)

    cum_u = np.cumsum(u_sorted)
    # first 1-based n with cum_u[n] >= mu
    n = int(np.argmax(cum_u >= mu - _CUM_TOL)) + 1
    tail_m = np.cumsum(m_sorted[::-1])[::-1]
    # last 1-based n' with tail_m[n'] >= lam
    reaching = np.nonzero(tail_m >= lam - _CUM_TOL)[0]
    n_prime = int(reaching[-1]) + 1
    if n >= n_prime:
        raise AdmissibilityError(
            f"error levels mu={mu}, lambda={lam} are not admissible: "
            f"link index {n} does not precede non-link index {n_prime}"
        )

    groups = _tie_groups(logw_sorted)

    link_stop = 0
    acc = 0.0
    for start, stop in groups:
        acc_next = acc + float(u_sorted[start:stop].sum())
        if acc_next > mu + _CUM_TOL:
            break
        acc, link_stop = acc_next, stop
    nonlink_start = n_total
    acc = 0.0
    for start, stop in reversed(groups):
        acc_next = acc + float(m_sorted[start:stop].sum())
        if acc_next > lam + _CUM_TOL or start < link_stop:
            break
        acc, nonlink_start = acc_next, start

    mat = pattern_matrix(k)
    ordering = tuple(tuple(int(b) for b in mat[i]) for i in order)
    # thresholds come from match_weight itself so classify(match_weight(g))
    # reproduces the sets above bit for bit
    t_mu = math.inf
    if link_stop > 0:
        start = next(s for s, e in groups if e == link_stop)
        t_mu = min(match_weight(params, ordering[i]) for i in range(start, link_stop))
    t_lambda = 0.0
    if nonlink_start < n_total:
        stop = next(e for s, e in groups if s == nonlink_start)
        t_lambda = max(match_weight(params, ordering[i]) for i in range(nonlink_start, stop))
    return DecisionThresholds(t_mu=t_mu, t_lambda=t_lambda, ordering=ordering)


def classify(weight: float, thresholds: DecisionThresholds) -> LinkDecision:
    """Three-way decision for a pair with match weight ``weight``.

    Both boundaries are inclusive: ``weight == t_mu`` links and
    ``weight == t_lambda`` is a non-link.
    """
    if weight >= thresholds.t_mu:
        return LinkDecision.LINK
    if weight <= thresholds.t_lambda:
        return LinkDecision.NON_LINK
    return LinkDecision.POSSIBLE_LINK


def parse_pattern(text: str, k: int | None = None) -> Pattern:
    """Parse the comma-separated text form, e.g. ``"1,0,1,1"``."""
    fields = [f.strip() for f in text.strip().split(",")]
    if not fields or any(f not in ("0", "1") for f in fields):
        raise ParseError(f"not a binary pattern: {text.strip()!r}")
    pattern = tuple(int(f) for f in fields)
    if k is not None and len(pattern) != k:
        raise ShapeError(f"pattern {text.strip()!r} has {len(pattern)} components, expected {k}")
    return pattern


def format_pattern(pattern: Sequence[int]) -> str:
    return ",".join(str(int(b)) for b in pattern)
