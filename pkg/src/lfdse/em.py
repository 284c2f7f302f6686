"""EM estimation of the two-component comparison-pattern mixture.

All fitting runs on aggregated pattern counts: the multiset of comparison
vectors is a sufficient statistic, so each iteration costs O(#patterns * k)
whatever the number of record pairs.  The batched core ``fit_em_batch`` fits
many independent count tables at once; ``fit_em`` is the single-table
front-end with the full diagnostic record.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateComponentError,
    EmptyInputError,
    ParseError,
    ShapeError,
)
from .patterns import LinkageParams, Pattern, format_pattern, pattern_matrix

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 1000
DEFAULT_CLAMP = 1e-6


@dataclass(frozen=True, eq=False)
class PatternCounts:
    """Distinct comparison patterns with their occurrence counts.

    ``patterns`` is an ``(n, k)`` int8 array of distinct patterns sorted
    lexicographically, ``counts`` the matching positive integer counts.
    An empty table has ``k == 0``.
    """

    k: int
    patterns: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        pats = np.asarray(self.patterns, dtype=np.int8).reshape(-1, self.k) if self.k else np.zeros((0, 0), np.int8)
        cnts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if len(pats) != len(cnts):
            raise ShapeError("patterns and counts differ in length")
        if np.any(cnts < 0):
            raise ValueError("counts must be nonnegative")
        pats.setflags(write=False)
        cnts.setflags(write=False)
        object.__setattr__(self, "patterns", pats)
        object.__setattr__(self, "counts", cnts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __len__(self):
        return len(self.counts)

    def __eq__(self, other):
        if not isinstance(other, PatternCounts):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def as_dict(self) -> dict[Pattern, int]:
        return {
            tuple(int(b) for b in row): int(c) for row, c in zip(self.patterns, self.counts)
        }

    def dense(self) -> np.ndarray:
        """Counts over all ``2**k`` patterns in lexicographic order."""
        out = np.zeros(2**self.k, dtype=np.int64)
        weights = 1 << np.arange(self.k - 1, -1, -1, dtype=np.int64)
        out[self.patterns.astype(np.int64) @ weights] = self.counts
        return out

    @classmethod
    def from_dense(cls, k: int, dense: Sequence[int]) -> "PatternCounts":
        dense = np.asarray(dense, dtype=np.int64)
        if dense.shape != (2**k,):
            raise ShapeError(f"dense counts must have length {2**k}")
        keep = np.nonzero(dense)[0]
        return cls(k, pattern_matrix(k)[keep], dense[keep])

    @classmethod
    def from_mapping(cls, mapping: Mapping[Sequence[int], int]) -> "PatternCounts":
        merged: dict[Pattern, int] = {}
        k = None
        for pat, c in mapping.items():
            pat = tuple(int(b) for b in pat)
            if k is None:
                k = len(pat)
            elif len(pat) != k:
                raise ShapeError("all patterns must share one length")
            if any(b not in (0, 1) for b in pat):
                raise ValueError(f"pattern components must be 0 or 1: {pat}")
            if c:
                merged[pat] = merged.get(pat, 0) + int(c)
        if not k:
            return cls(0, np.zeros((0, 0), np.int8), np.zeros(0, np.int64))
        keys = sorted(merged)
        return cls(k, np.array(keys, dtype=np.int8).reshape(-1, k), np.array([merged[p] for p in keys]))

    def permuted(self, order: Sequence[int]) -> "PatternCounts":
        """Reorder the comparison variables."""
        return PatternCounts.from_mapping(
            {tuple(p[i] for i in order): c for p, c in self.as_dict().items()}
        )


def aggregate_pairs(patterns: Iterable[Sequence[int]]) -> PatternCounts:
    """Collapse per-pair comparison vectors into :class:`PatternCounts`."""
    tally: dict[Pattern, int] = {}
    k = None
    for pat in patterns:
        pat = tuple(int(b) for b in pat)
        if k is None:
            k = len(pat)
        elif len(pat) != k:
            raise ShapeError(f"mixed pattern lengths {k} and {len(pat)}")
        tally[pat] = tally.get(pat, 0) + 1
    return PatternCounts.from_mapping(tally)


@dataclass(frozen=True)
class EmConfig:
    init: LinkageParams | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class EmFit:
    """Result of :func:`fit_em`.

    ``posterior`` holds, per observed pattern, the match probability used in
    the final M-step (so ``sum(c * g) == p_hat * total`` up to clamping).
    ``swapped`` records whether the component labels were exchanged.
    """

    params: LinkageParams
    iterations: int
    converged: bool
    loglik_trace: tuple[float, ...]
    posterior: dict[Pattern, float] = field(repr=False)
    swapped: bool = False

    @property
    def p_hat(self) -> float:
        return self.params.p

    @property
    def final_loglik(self) -> float:
        return self.loglik_trace[-1]


def default_init(k: int, total: int) -> LinkageParams:
    p0 = min(1.0 / math.sqrt(total), 0.5) if total > 0 else 0.5
    return LinkageParams((0.9,) * k, (0.1,) * k, p0)


# -- array kernels shared by the single and batched paths -------------------

def _log_components(bits, m, u, p):
    """Log of p*m_g and (1-p)*u_g for each row of params and each pattern."""
    lm, l1m = np.log(m), np.log1p(-m)
    lu, l1u = np.log(u), np.log1p(-u)
    b = bits[None, :, :]
    log_m_g = (b * (lm - l1m)[:, None, :]).sum(axis=2) + l1m.sum(axis=1)[:, None]
    log_u_g = (b * (lu - l1u)[:, None, :]).sum(axis=2) + l1u.sum(axis=1)[:, None]
    a = np.log(p)[:, None] + log_m_g
    c = np.log1p(-p)[:, None] + log_u_g
    return a, c


def _posterior_and_loglik(bits, counts, m, u, p):
    a, c = _log_components(bits, m, u, p)
    g = expit(a - c)
    ll = (counts * np.logaddexp(a, c)).sum(axis=1)
    return g, ll


def _maximize(bits, counts, g, clamp):
    w = counts * g
    v = counts - w
    sw = w.sum(axis=1)
    sv = v.sum(axis=1)
    total = counts.sum(axis=1)
    degenerate = ~((sw > 0) & (sv > 0))
    sw_safe = np.where(degenerate, 1.0, sw)
    sv_safe = np.where(degenerate, 1.0, sv)
    b = bits[None, :, :]
    m = (w[:, :, None] * b).sum(axis=1) / sw_safe[:, None]
    u = (v[:, :, None] * b).sum(axis=1) / sv_safe[:, None]
    p = sw / total
    lo, hi = clamp, 1.0 - clamp
    return np.clip(m, lo, hi), np.clip(u, lo, hi), np.clip(p, lo, hi), degenerate


@dataclass
class BatchFit:
    """Arrays describing many independent fits (one row each)."""

    m: np.ndarray
    u: np.ndarray
    p: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    loglik: np.ndarray
    swapped: np.ndarray


def fit_em_batch(bits, counts, m0, u0, p0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 clamp=DEFAULT_CLAMP, trace=None, posterior_out=None) -> BatchFit:
    """Fit one mixture per row of ``counts``.

    Parameters
    ----------
    bits : ndarray, shape (P, k)
        Pattern matrix shared by all rows.
    counts : ndarray, shape (B, P)
        Pattern counts per row.  Zero counts are allowed.
    m0, u0 : ndarray, shape (B, k)
    p0 : ndarray, shape (B,)
        Starting values.
    trace : list, optional
        If given, receives the observed-data log-likelihood of every row
        before each iteration, plus the final value.
    posterior_out : dict, optional
        If given, ``posterior_out["g"]`` receives the posterior used in each
        row's last M-step.

    Rows iterate independently: a converged or degenerate row is frozen while
    the rest continue, so a row's result never depends on its batch mates.
    """
    bits = np.asarray(bits, dtype=float)
    counts = np.asarray(counts, dtype=float)
    n_rows = counts.shape[0]
    lo, hi = clamp, 1.0 - clamp
    m = np.clip(np.array(m0, dtype=float, copy=True).reshape(n_rows, -1), lo, hi)
    u = np.clip(np.array(u0, dtype=float, copy=True).reshape(n_rows, -1), lo, hi)
    p = np.clip(np.array(p0, dtype=float, copy=True).reshape(n_rows), lo, hi)
    iterations = np.zeros(n_rows, dtype=np.int64)
    converged = np.zeros(n_rows, dtype=bool)
    degenerate = np.zeros(n_rows, dtype=bool)
    last_g = np.zeros_like(counts) if posterior_out is not None else None
    active = np.arange(n_rows)

    for _ in range(max_iter):
        if active.size == 0:
            break
        c = counts[active]
        g, ll = _posterior_and_loglik(bits, c, m[active], u[active], p[active])
        if trace is not None:
            row = np.full(n_rows, np.nan)
            row[active] = ll
            trace.append(row)
        m_new, u_new, p_new, bad = _maximize(bits, c, g, clamp)
        delta = np.maximum(
            np.abs(m_new - m[active]).max(axis=1),
            np.maximum(np.abs(u_new - u[active]).max(axis=1), np.abs(p_new - p[active])),
        )
        good = ~bad
        upd = active[good]
        m[upd], u[upd], p[upd] = m_new[good], u_new[good], p_new[good]
        if last_g is not None:
            last_g[upd] = g[good]
        iterations[active] += 1
        degenerate[active[bad]] = True
        done = bad | (good & (delta < tol))
        converged[active[good & (delta < tol)]] = True
        active = active[~done]

    _, loglik = _posterior_and_loglik(bits, counts, m, u, p)
    if trace is not None:
        trace.append(loglik.copy())

    # the match component is the one with higher overall agreement
    swapped = m.sum(axis=1) < u.sum(axis=1)
    if swapped.any():
        m[swapped], u[swapped] = u[swapped].copy(), m[swapped].copy()
        p[swapped] = 1.0 - p[swapped]
        if last_g is not None:
            last_g[swapped] = 1.0 - last_g[swapped]
    if posterior_out is not None:
        posterior_out["g"] = last_g
    return BatchFit(m, u, p, iterations, converged, degenerate, loglik, swapped)


# -- single-table operations ------------------------------------------------

def _check_k(counts: PatternCounts, params: LinkageParams):
    if counts.k and counts.k != params.k:
        raise ShapeError(f"counts have k={counts.k} but params have k={params.k}")


def _row(params: LinkageParams):
    return (np.array([params.m]), np.array([params.u]), np.array([params.p]))


def e_step(counts: PatternCounts, params: LinkageParams) -> dict[Pattern, float]:
    """Posterior match probability of every observed pattern."""
    _check_k(counts, params)
    if len(counts) == 0:
        return {}
    params = params.clamped()
    g, _ = _posterior_and_loglik(counts.patterns.astype(float), counts.counts[None, :].astype(float), *_row(params))
    return {pat: float(x) for pat, x in zip(counts.as_dict(), g[0])}


def m_step(counts: PatternCounts, posterior: Mapping[Pattern, float],
           clamp: float = DEFAULT_CLAMP) -> LinkageParams:
    """Closed-form maximisation given posterior match probabilities.

    If one component would receive zero posterior mass (e.g. ``g == 1``
    everywhere), the posterior is first clipped to ``[clamp, 1 - clamp]`` so
    both components stay estimable; otherwise it is used as given.

    Raises
    ------
    DegenerateComponentError
        If a component still has no mass after clipping.
    """
    if counts.total == 0:
        raise EmptyInputError("no pattern counts")
    pats = list(counts.as_dict())
    missing = [p for p in pats if p not in posterior]
    if missing:
        raise ShapeError(f"posterior missing for patterns {missing[:3]}")
    g = np.array([[posterior[p] for p in pats]], dtype=float)
    if np.any((g < 0) | (g > 1)):
        raise ValueError("posterior values must lie in [0, 1]")
    c = counts.counts.astype(float)
    if (c * g).sum() <= 0 or (c * (1 - g)).sum() <= 0:
        g = np.clip(g, clamp, 1.0 - clamp)
    m, u, p, bad = _maximize(counts.patterns.astype(float), counts.counts[None, :].astype(float), g, clamp)
    if bad[0]:
        raise DegenerateComponentError("a mixture component has zero posterior mass")
    return LinkageParams(tuple(m[0]), tuple(u[0]), float(p[0]))


def log_likelihood(counts: PatternCounts, params: LinkageParams) -> float:
    """Observed-data log-likelihood ``sum_g c_g log(p m_g + (1-p) u_g)``."""
    _check_k(counts, params)
    if len(counts) == 0:
        return 0.0
    params = params.clamped()
    _, ll = _posterior_and_loglik(counts.patterns.astype(float), counts.counts[None, :].astype(float), *_row(params))
    return float(ll[0])


def fit_em(counts: PatternCounts, config: EmConfig | None = None) -> EmFit:
    """Maximum-likelihood mixture parameters by EM.

    Iterates until the largest absolute change over the ``2k + 1``
    parameters drops below ``config.tol`` or ``config.max_iter`` iterations
    have run, then orients the components so the match class is the
    high-agreement one.

    Raises
    ------
    EmptyInputError
        If ``counts`` holds no pairs.
    DegenerateComponentError
        If a component collapses to zero posterior mass.
    """
    config = config or EmConfig()
    if counts.total == 0:
        raise EmptyInputError("cannot fit EM to an empty pattern table")
    init = config.init or default_init(counts.k, counts.total)
    _check_k(counts, init)
    trace: list[np.ndarray] = []
    post: dict = {}
    res = fit_em_batch(
        counts.patterns, counts.counts[None, :], *_row(init),
        tol=config.tol, max_iter=config.max_iter, clamp=config.clamp,
        trace=trace, posterior_out=post,
    )
    if res.degenerate[0]:
        raise DegenerateComponentError(
            f"a mixture component collapsed after {int(res.iterations[0])} iterations"
        )
    params = LinkageParams(tuple(res.m[0]), tuple(res.u[0]), float(res.p[0]))
    posterior = {pat: float(x) for pat, x in zip(counts.as_dict(), post["g"][0])}
    return EmFit(
        params=params,
        iterations=int(res.iterations[0]),
        converged=bool(res.converged[0]),
        loglik_trace=tuple(float(r[0]) for r in trace),
        posterior=posterior,
        swapped=bool(res.swapped[0]),
    )


# -- text formats -----------------------------------------------------------

def parse_pattern_counts(text: str, path: str | None = None) -> PatternCounts:
    """Parse ``b1,...,bk,count`` lines; ``#`` comments and blanks are skipped."""
    tally: dict[Pattern, int] = {}
    k = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 2:
            raise ParseError("expected at least one bit and a count", path, lineno)
        *bits, count = fields
        if any(b not in ("0", "1") for b in bits):
            raise ParseError(f"pattern components must be 0 or 1: {line!r}", path, lineno)
        try:
            n = int(count)
        except ValueError:
            raise ParseError(f"count is not an integer: {count!r}", path, lineno) from None
        if n < 0:
            raise ParseError("count must be nonnegative", path, lineno)
        if k is None:
            k = len(bits)
        elif len(bits) != k:
            raise ParseError(f"pattern has {len(bits)} components, expected {k}", path, lineno)
        pat = tuple(int(b) for b in bits)
        tally[pat] = tally.get(pat, 0) + n
    return PatternCounts.from_mapping(tally)


def read_pattern_counts(path: str | os.PathLike) -> PatternCounts:
    with open(path) as fh:
        return parse_pattern_counts(fh.read(), path=str(path))


def format_pattern_counts(counts: PatternCounts) -> str:
    buf = io.StringIO()
    for pat, c in counts.as_dict().items():
        buf.write(f"{format_pattern(pat)},{c}\n")
    return buf.getvalue()


def format_report(fields: Mapping[str, object]) -> str:
    """Render ``key=value`` lines; floats use ``repr`` so they round-trip."""
    lines = []
    for key, val in fields.items():
        if isinstance(val, bool):
            val = str(val).lower()
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def fit_report_fields(fit: EmFit) -> dict[str, object]:
    out: dict[str, object] = {"p_hat": fit.params.p}
    for i, x in enumerate(fit.params.m, start=1):
        out[f"m_{i}"] = x
    for i, x in enumerate(fit.params.u, start=1):
        out[f"u_{i}"] = x
    out["iterations"] = fit.iterations
    out["converged"] = fit.converged
    out["final_loglik"] = fit.final_loglik
    return out


def parse_report(text: str, path: str | None = None) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", path, lineno)
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def params_from_report(report: Mapping[str, str]) -> LinkageParams:
    """Rebuild :class:`LinkageParams` from a parsed fit report."""
    try:
        k = sum(1 for key in report if key.startswith("m_"))
        m = tuple(float(report[f"m_{i}"]) for i in range(1, k + 1))
        u = tuple(float(report[f"u_{i}"]) for i in range(1, k + 1))
        p = float(report["p_hat"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"incomplete parameter report: {exc}") from None
    return LinkageParams(m, u, p)
