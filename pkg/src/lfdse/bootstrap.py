"""Parametric bootstrap for the variance of the linkage-free estimator.

Given a fitted mixture and the two list sizes, each bootstrap replicate
re-draws the 2x2 inclusion table from the fitted population, re-draws
comparison patterns for the implied matched and unmatched pairs from the
fitted m/u probabilities, and re-fits EM.  The spread of the refitted
``1 / p*`` values estimates the sampling variability of ``1 / p_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Callable

import numpy as np

from .em import DEFAULT_CLAMP, DEFAULT_MAX_ITER, DEFAULT_TOL, EmConfig, EmFit, PatternCounts, default_init, fit_em, fit_em_batch
from .estimators import DualCounts
from .errors import (
    BootstrapFailureError,
    DegenerateComponentError,
    InconsistentInputError,
)
from .patterns import pattern_matrix, pattern_probs
from .simulation import Scenario, cell_probabilities, draw_pattern_counts, generate_capture, generate_patterns, keyed_rng

# stream tags keep bootstrap and coverage draws apart from simulation streams
_BOOT_STREAM = 0xB0
_OUTER_STREAM = 0xC0

CI_METHODS = ("percentile", "basic", "normal")


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    ``ci_method`` selects the interval built from the replicate estimates:
    ``"percentile"`` uses their quantiles directly, ``"basic"`` reflects
    them about the point estimate and ``"normal"`` is estimate +- z * se.
    ``warm_start`` starts each re-fit at the original estimates.
    """

    replicates: int = 1000
    ci_level: float = 0.95
    seed: int = 0
    warm_start: bool = True
    ci_method: str = "percentile"

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("at least 2 bootstrap replicates are required")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.ci_method not in CI_METHODS:
            raise ValueError(f"ci_method must be one of {CI_METHODS}, got {self.ci_method!r}")


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap summary.

    ``se`` is the sample standard deviation of ``replicate_values``; ``rse``
    expresses it as a percentage of the point estimate.  The interval type
    follows :attr:`BootstrapConfig.ci_method`.
    """

    estimate: float
    se: float
    rse: float
    ci_low: float
    ci_high: float
    replicate_values: np.ndarray
    degenerate_count: int

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


def _interval(values, estimate, se, config):
    alpha = 1.0 - config.ci_level
    if config.ci_method == "normal":
        z = NormalDist().inv_cdf(1 - alpha / 2)
        return estimate - z * se, estimate + z * se
    q_lo, q_hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    if config.ci_method == "basic":
        return 2 * estimate - q_hi, 2 * estimate - q_lo
    return q_lo, q_hi


def draw_bootstrap_sample(population: int, cells: np.ndarray, m_probs: np.ndarray,
                          u_probs: np.ndarray, rng: np.random.Generator) -> tuple[DualCounts, np.ndarray]:
    """One replicate dataset: a 2x2 inclusion table and its pattern counts.

    ``cells`` holds the (11, 10, 01, 00) cell probabilities.  The returned
    dense pattern counts sum to ``n1p * np1`` of the drawn table.
    """
    c11, c10, c01, _ = rng.multinomial(population, cells)
    dual = DualCounts(int(c11 + c10), int(c11 + c01), int(c11))
    return dual, draw_pattern_counts(dual.n11, dual.omega - dual.n11, m_probs, u_probs, rng)


def bootstrap_variance(counts: PatternCounts, n1p: int, np1: int, fit: EmFit,
                       config: BootstrapConfig | None = None) -> BootstrapResult:
    """Parametric bootstrap of ``N_L = 1 / p_hat``.

    Parameters
    ----------
    counts : PatternCounts
        Observed patterns for all ``n1p * np1`` cross-list pairs.
    n1p, np1 : int
        Observed list sizes.
    fit : EmFit
        EM fit to ``counts``; its parameters drive every replicate and also
        warm-start each re-fit.
    config : BootstrapConfig, optional

    Raises
    ------
    InconsistentInputError
        If the list sizes do not match the pattern total, or a list is
        larger than the estimated population.
    BootstrapFailureError
        If every replicate is degenerate.
    """
    config = config or BootstrapConfig()
    if n1p * np1 != counts.total:
        raise InconsistentInputError(
            f"list sizes give {n1p * np1} pairs but the pattern table holds {counts.total}"
        )
    params = fit.params
    n_hat = 1.0 / params.p
    p1, p2 = n1p / n_hat, np1 / n_hat
    if not (0.0 < p1 <= 1.0 and 0.0 < p2 <= 1.0):
        raise InconsistentInputError(
            f"implied coverage probabilities ({p1:.4g}, {p2:.4g}) are outside (0, 1]"
        )
    cells = cell_probabilities(p1, p2)
    population = int(round(n_hat))
    m_probs = pattern_probs(params.m, clamp=0.0)
    u_probs = pattern_probs(params.u, clamp=0.0)
    k = params.k

    B = config.replicates
    dense = np.zeros((B, 2**k), dtype=np.int64)
    n11_star = np.zeros(B, dtype=np.int64)
    for b in range(B):
        rng = keyed_rng(config.seed, _BOOT_STREAM, b)
        dual, dense[b] = draw_bootstrap_sample(population, cells, m_probs, u_probs, rng)
        n11_star[b] = dual.n11

    usable = np.nonzero(n11_star > 0)[0]
    values = np.full(B, np.nan)
    if usable.size:
        if config.warm_start:
            m0 = np.tile(params.m, (usable.size, 1))
            u0 = np.tile(params.u, (usable.size, 1))
            p0 = np.full(usable.size, params.p)
        else:
            init = default_init(k, 1)
            m0 = np.tile(init.m, (usable.size, 1))
            u0 = np.tile(init.u, (usable.size, 1))
            p0 = np.minimum(1.0 / np.sqrt(dense[usable].sum(axis=1)), 0.5)
        res = fit_em_batch(
            pattern_matrix(k), dense[usable], m0, u0, p0,
            tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, clamp=DEFAULT_CLAMP,
        )
        ok = res.converged & ~res.degenerate
        values[usable[ok]] = 1.0 / res.p[ok]
    good = values[~np.isnan(values)]
    degenerate = B - good.size
    if good.size < 2:
        raise BootstrapFailureError(f"{degenerate} of {B} bootstrap replicates were degenerate")
    se = float(good.std(ddof=1))
    lo, hi = _interval(good, n_hat, se, config)
    return BootstrapResult(
        estimate=n_hat, se=se, rse=100.0 * se / n_hat,
        ci_low=float(lo), ci_high=float(hi),
        replicate_values=good, degenerate_count=degenerate,
    )


@dataclass(frozen=True)
class CoverageResult:
    """Outcome of a repeated-sampling check of the bootstrap.

    ``rse_sim`` is the spread of the point estimates across outer datasets
    and ``rse_boot`` the average bootstrap RSE, both as percentages of
    ``N``; ``coverage`` is the percentage of intervals containing ``N``.
    """

    rse_sim: float
    rse_boot: float
    coverage: float
    used: int
    excluded: int


def _outer_one(scenario, i, config, bootstrap_fn):
    rng = keyed_rng(scenario.seed, _OUTER_STREAM, scenario.id, i)
    draw = generate_capture(scenario.N, scenario.p1, scenario.p2, rng)
    if draw.counts.n11 == 0 or draw.omega == 0:
        return None
    counts = generate_patterns(draw, scenario.m, scenario.u, rng)
    try:
        fit = fit_em(counts, EmConfig())
    except DegenerateComponentError:
        return None
    boot_cfg = replace(
        config, seed=int(np.random.SeedSequence([config.seed, scenario.id, i]).generate_state(1, np.uint64)[0])
    )
    try:
        boot = bootstrap_fn(counts, draw.counts.n1p, draw.counts.np1, fit, boot_cfg)
    except (BootstrapFailureError, InconsistentInputError):
        return None
    return 1.0 / fit.p_hat, boot.se / boot.estimate, boot.contains(scenario.N)


def coverage_experiment(scenario: Scenario, outer: int, config: BootstrapConfig | None = None,
                        bootstrap_fn: Callable[..., BootstrapResult] = bootstrap_variance,
                        workers: int = 1) -> CoverageResult:
    """Repeat data generation ``outer`` times and bootstrap each dataset.

    Datasets whose fit or bootstrap fails are excluded and counted.
    ``bootstrap_fn`` can be replaced to exercise the harness itself.
    """
    config = config or BootstrapConfig()
    if outer < 1:
        raise ValueError("outer must be at least 1")
    jobs = [(scenario, i, config, bootstrap_fn) for i in range(outer)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_outer_star, jobs))
    else:
        results = [_outer_one(*j) for j in jobs]
    kept = [r for r in results if r is not None]
    if not kept:
        raise BootstrapFailureError("no outer dataset produced a bootstrap interval")
    est = np.array([r[0] for r in kept])
    rse_boot = np.array([r[1] for r in kept])
    covered = np.array([r[2] for r in kept])
    return CoverageResult(
        rse_sim=100.0 * float(est.std()) / scenario.N,
        rse_boot=100.0 * float(rse_boot.mean()),
        coverage=100.0 * float(covered.mean()),
        used=len(kept),
        excluded=outer - len(kept),
    )


def _outer_star(args):
    return _outer_one(*args)


def coverage_csv_row(scenario: Scenario, res: CoverageResult) -> str:
    """One ``N,p1,p2,m,u,rse_sim,rse_boot,coverage`` CSV line (no header)."""
    vec = lambda xs: ";".join(repr(float(x)) for x in xs)  # noqa: E731
    return (
        f"{scenario.N},{float(scenario.p1)!r},{float(scenario.p2)!r},{vec(scenario.m)},{vec(scenario.u)},"
        f"{res.rse_sim:.2f},{res.rse_boot:.2f},{res.coverage:.1f}"
    )


COVERAGE_CSV_HEADER = "N,p1,p2,m,u,rse_sim,rse_boot,coverage"
