"""Monte Carlo study comparing the perfect-linkage DSE with the LFDSE.

Every random draw is keyed by ``(seed, scenario id, replicate index)``
through a counter-based Philox generator, so results do not depend on how
replicates are split across workers.  Replicates are processed in fixed-size
chunks; each chunk fits all of its EM problems in one vectorised batch.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .em import DEFAULT_CLAMP, DEFAULT_MAX_ITER, DEFAULT_TOL, PatternCounts, fit_em_batch
from .errors import DomainError, ParseError, ScenarioFailureError, ShapeError
from .estimators import DualCounts, metrics, net_error_epsilon
from .patterns import pattern_matrix, pattern_probs

DEFAULT_REPS = 10_000
CHUNK_SIZE = 500

# probability vectors of the reference study, keyed by their usual labels
M6_1 = (0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
U6_1 = (0.001, 0.01, 0.05, 0.1, 0.15, 0.2)
U6_2 = (0.05, 0.1, 0.15, 0.2, 0.2, 0.25)
M6_2 = (0.9,) * 6
U6_4 = (0.005,) * 6
M4_1 = (0.7, 0.8, 0.9, 0.95)
U4_1 = (0.001, 0.01, 0.1, 0.2)
U4_2 = (0.01, 0.05, 0.1, 0.2)
U4_3 = (0.005, 0.01, 0.01, 0.03)
M4_2 = (0.9,) * 4
U4_4 = (0.005,) * 4

VECTORS = {
    "m6,1": M6_1, "u6,1": U6_1, "u6,1,r": U6_1[::-1],
    "u6,2": U6_2, "u6,2,r": U6_2[::-1],
    "m6,2": M6_2, "u6,4": U6_4,
    "m4,1": M4_1, "u4,1": U4_1, "u4,1,r": U4_1[::-1],
    "u4,2": U4_2, "u4,2,r": U4_2[::-1],
    "u4,3": U4_3, "u4,3,r": U4_3[::-1],
    "m4,2": M4_2, "u4,4": U4_4,
}


@dataclass(frozen=True)
class Scenario:
    id: int
    N: int
    p1: float
    p2: float
    m: tuple[float, ...]
    u: tuple[float, ...]
    reps: int = DEFAULT_REPS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(float(x) for x in self.m))
        object.__setattr__(self, "u", tuple(float(x) for x in self.u))
        if len(self.m) != len(self.u):
            raise ShapeError("m and u must have the same length")
        if not self.m:
            raise ShapeError("at least one linkage variable is required")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        for q in (self.p1, self.p2):
            if not 0.0 < q <= 1.0:
                raise ValueError(f"coverage probability must lie in (0, 1], got {q}")
        for q in (*self.m, *self.u):
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"agreement probability out of [0, 1]: {q}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def k(self) -> int:
        return len(self.m)

    def with_(self, **changes) -> "Scenario":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return Scenario(**fields)


def paper_scenarios(reps: int = DEFAULT_REPS, seed: int = 0) -> list[Scenario]:
    """The 60-scenario grid, numbered 1-60 in the published order."""
    specs = []
    coverages6 = [(0.5, 0.5), (0.5, 0.7), (0.5, 0.9), (0.7, 0.7), (0.7, 0.9), (0.9, 0.9)]
    for N in (1000, 150):
        for p1, p2 in coverages6:
            for u in ("u6,1", "u6,1,r"):
                specs.append((N, p1, p2, "m6,1", u))
    for N in (1000, 150):
        for q in (0.5, 0.7, 0.9):
            for u in ("u4,1", "u4,1,r", "u4,2", "u4,2,r"):
                specs.append((N, q, q, "m4,1", u))
    for m, us in (("m6,1", ("u6,2", "u6,2,r")), ("m4,1", ("u4,3", "u4,3,r"))):
        for N in (1000, 150):
            for u in us:
                specs.append((N, 0.7, 0.7, m, u))
    for m, u in (("m6,2", "u6,4"), ("m4,2", "u4,4")):
        for N in (1000, 150):
            specs.append((N, 0.7, 0.7, m, u))
    return [
        Scenario(i, N, p1, p2, VECTORS[m], VECTORS[u], reps=reps, seed=seed)
        for i, (N, p1, p2, m, u) in enumerate(specs, start=1)
    ]


# -- random streams ---------------------------------------------------------

def keyed_rng(*key: int) -> np.random.Generator:
    """Independent Philox stream for an integer key tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(x) for x in key])))


def replicate_rng(scenario: Scenario, index: int) -> np.random.Generator:
    return keyed_rng(scenario.seed, scenario.id, index)


# -- data generation --------------------------------------------------------

@dataclass(frozen=True)
class CaptureDraw:
    counts: DualCounts

    @property
    def omega(self) -> int:
        return self.counts.omega


def generate_capture(N: int, p1: float, p2: float, rng: np.random.Generator) -> CaptureDraw:
    """Place each of ``N`` elements on each list independently.

    Drawn as one multinomial over the four inclusion cells, which has the
    same distribution as ``N`` pairs of independent Bernoulli trials.
    """
    cells = cell_probabilities(p1, p2)
    c11, c10, c01, _ = rng.multinomial(N, cells)
    return CaptureDraw(DualCounts(int(c11 + c10), int(c11 + c01), int(c11)))


def cell_probabilities(p1: float, p2: float) -> np.ndarray:
    """Inclusion-cell probabilities ``(11, 10, 01, 00)`` under independence."""
    return np.array([p1 * p2, p1 * (1 - p2), (1 - p1) * p2, (1 - p1) * (1 - p2)])


def draw_pattern_counts(n_match: int, n_nonmatch: int, m_probs: np.ndarray,
                        u_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Dense pattern counts for ``n_match`` matches and ``n_nonmatch`` non-matches.

    ``m_probs`` and ``u_probs`` are joint pattern distributions.  Equivalent
    to drawing each pair's comparison vector independently.
    """
    return rng.multinomial(n_match, m_probs) + rng.multinomial(n_nonmatch, u_probs)


def generate_patterns(draw: CaptureDraw, m: Sequence[float], u: Sequence[float],
                      rng: np.random.Generator) -> PatternCounts:
    """Comparison patterns for every cross-list pair of a capture draw."""
    if len(m) != len(u):
        raise ShapeError("m and u must have the same length")
    n11 = draw.counts.n11
    dense = draw_pattern_counts(
        n11, draw.omega - n11, pattern_probs(m, clamp=0.0), pattern_probs(u, clamp=0.0), rng
    )
    return PatternCounts.from_dense(len(m), dense)


# -- replicates -------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateResult:
    """One replicate's two estimates; ``None`` marks a failed arm."""

    dse: float | None
    lfdse: float | None
    converged: bool = True


@dataclass
class _ChunkResult:
    dse: np.ndarray
    lfdse: np.ndarray
    converged: np.ndarray


def _simulate_rows(scenario: Scenario, rngs: Sequence[np.random.Generator]) -> _ChunkResult:
    k = scenario.k
    m_probs = pattern_probs(scenario.m, clamp=0.0)
    u_probs = pattern_probs(scenario.u, clamp=0.0)
    n = len(rngs)
    counts = np.zeros((n, 2**k), dtype=np.int64)
    dse_vals = np.full(n, np.nan)
    omegas = np.zeros(n, dtype=np.int64)
    for i, rng in enumerate(rngs):
        c = generate_capture(scenario.N, scenario.p1, scenario.p2, rng).counts
        omegas[i] = c.omega
        if c.n11 > 0:
            dse_vals[i] = c.omega / c.n11
        if c.omega > 0:
            counts[i] = draw_pattern_counts(c.n11, c.omega - c.n11, m_probs, u_probs, rng)

    lf_vals = np.full(n, np.nan)
    converged = np.ones(n, dtype=bool)
    ok = np.nonzero(omegas > 0)[0]
    if ok.size:
        p0 = np.minimum(1.0 / np.sqrt(omegas[ok].astype(float)), 0.5)
        fit = fit_em_batch(
            pattern_matrix(k), counts[ok],
            np.full((ok.size, k), 0.9), np.full((ok.size, k), 0.1), p0,
            tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, clamp=DEFAULT_CLAMP,
        )
        good = ~fit.degenerate
        lf_vals[ok[good]] = 1.0 / fit.p[good]
        converged[ok] = fit.converged | fit.degenerate
    return _ChunkResult(dse_vals, lf_vals, converged)


def run_replicate(scenario: Scenario, rng: np.random.Generator) -> ReplicateResult:
    """Simulate one pair of lists and compute both estimators.

    The DSE uses the true overlap (perfect linkage).  The LFDSE is the
    reciprocal of the EM match proportion.  An arm fails when its estimate
    is undefined: no overlap for the DSE; an empty list or a collapsed
    mixture component for the LFDSE.
    """
    res = _simulate_rows(scenario, [rng])
    d, l = res.dse[0], res.lfdse[0]
    return ReplicateResult(
        None if np.isnan(d) else float(d),
        None if np.isnan(l) else float(l),
        bool(res.converged[0]),
    )


def _run_chunk(args) -> _ChunkResult:
    scenario, start, stop = args
    return _simulate_rows(scenario, [replicate_rng(scenario, i) for i in range(start, stop)])


# -- scenario aggregation ---------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    """Per-scenario summary; rb/rse/rrmse are percentages.

    ``failures`` counts replicates excluded because either arm failed,
    ``nonconverged`` counts LFDSE fits that hit the iteration cap.
    """

    id: int
    N: int
    p1: float
    p2: float
    m: tuple[float, ...]
    u: tuple[float, ...]
    rb_dse: float
    rb_lfdse: float
    rse_dse: float
    rse_lfdse: float
    rrmse_dse: float
    rrmse_lfdse: float
    se_ratio: float
    eps: float
    eps_pct: float
    reps_used: int
    failures: int
    nonconverged: int = 0
    error: str | None = field(default=None, compare=False)


def summarize(scenario: Scenario, dse_vals: np.ndarray, lf_vals: np.ndarray,
              converged: np.ndarray) -> MetricsRow:
    """Reduce replicate estimates to a :class:`MetricsRow`.

    Raises
    ------
    ScenarioFailureError
        If no replicate produced both estimates.
    """
    both = ~np.isnan(dse_vals) & ~np.isnan(lf_vals)
    used = int(both.sum())
    if used == 0:
        raise ScenarioFailureError(f"scenario {scenario.id}: all {len(dse_vals)} replicates failed")
    N = scenario.N
    rb_d, rse_d, rrmse_d = metrics(dse_vals[both], N)
    rb_l, rse_l, rrmse_l = metrics(lf_vals[both], N)
    ratio = rse_l / rse_d if rse_d > 0 else math.nan
    try:
        eps, eps_pct = net_error_epsilon(rrmse_l, (rse_d * N) ** 2, N, scenario.p1, scenario.p2)
    except DomainError:
        eps = eps_pct = math.nan
    return MetricsRow(
        id=scenario.id, N=N, p1=scenario.p1, p2=scenario.p2, m=scenario.m, u=scenario.u,
        rb_dse=100 * rb_d, rb_lfdse=100 * rb_l,
        rse_dse=100 * rse_d, rse_lfdse=100 * rse_l,
        rrmse_dse=100 * rrmse_d, rrmse_lfdse=100 * rrmse_l,
        se_ratio=ratio, eps=eps, eps_pct=eps_pct,
        reps_used=used, failures=len(dse_vals) - used,
        nonconverged=int((~converged[both]).sum()),
    )


def _failed_row(scenario: Scenario, message: str) -> MetricsRow:
    nan = math.nan
    return MetricsRow(
        scenario.id, scenario.N, scenario.p1, scenario.p2, scenario.m, scenario.u,
        nan, nan, nan, nan, nan, nan, nan, nan, nan,
        reps_used=0, failures=scenario.reps, error=message,
    )


def _chunks(scenario: Scenario):
    return [(scenario, s, min(s + CHUNK_SIZE, scenario.reps)) for s in range(0, scenario.reps, CHUNK_SIZE)]


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def simulate_scenario(scenario: Scenario, workers: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw replicate arrays ``(dse, lfdse, converged)``; failed arms are NaN."""
    parts = _map(_run_chunk, _chunks(scenario), workers)
    return (
        np.concatenate([r.dse for r in parts]),
        np.concatenate([r.lfdse for r in parts]),
        np.concatenate([r.converged for r in parts]),
    )


def run_scenario(scenario: Scenario, workers: int = 1) -> MetricsRow:
    """Run all replicates of one scenario and summarise them."""
    return summarize(scenario, *simulate_scenario(scenario, workers))


def run_suite(scenarios: Sequence[Scenario], workers: int | None = None) -> list[MetricsRow]:
    """Run several scenarios, returning rows in input order.

    A scenario whose replicates all fail yields a row with NaN metrics and
    ``error`` set; the remaining scenarios still run.
    """
    if not scenarios:
        raise ValueError("no scenarios to run")
    workers = workers or os.cpu_count() or 1
    units = [u for sc in scenarios for u in _chunks(sc)]
    parts = _map(_run_chunk, units, workers)
    rows = []
    pos = 0
    for sc in scenarios:
        n_units = len(_chunks(sc))
        mine = parts[pos:pos + n_units]
        pos += n_units
        try:
            rows.append(summarize(
                sc,
                np.concatenate([r.dse for r in mine]),
                np.concatenate([r.lfdse for r in mine]),
                np.concatenate([r.converged for r in mine]),
            ))
        except ScenarioFailureError as exc:
            rows.append(_failed_row(sc, str(exc)))
    return rows


# -- I/O --------------------------------------------------------------------

CSV_HEADER = [
    "id", "N", "p1", "p2", "m", "u",
    "rb_dse", "rb_lfdse", "rse_dse", "rse_lfdse", "rrmse_dse", "rrmse_lfdse",
    "ratio", "eps", "eps_pct", "failures",
]


def _vec(values):
    return ";".join(repr(float(x)) for x in values)


def _f2(x):
    return "nan" if math.isnan(x) else f"{x:.2f}"


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([
            r.id, r.N, repr(float(r.p1)), repr(float(r.p2)), _vec(r.m), _vec(r.u),
            _f2(r.rb_dse), _f2(r.rb_lfdse), _f2(r.rse_dse), _f2(r.rse_lfdse),
            _f2(r.rrmse_dse), _f2(r.rrmse_lfdse), _f2(r.se_ratio),
            _f2(r.eps), _f2(r.eps_pct), r.failures,
        ])
    return buf.getvalue()


_SCENARIO_KEYS = {"id", "N", "p1", "p2", "m", "u", "reps", "seed"}


def parse_scenarios(text: str, path: str | None = None) -> list[Scenario]:
    """Parse a TOML scenario file made of ``[[scenario]]`` tables."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc), path, getattr(exc, "lineno", None)) from None
    tables = doc.get("scenario")
    if not isinstance(tables, list) or not tables:
        raise ParseError("no [[scenario]] tables found", path)
    header_lines = [i for i, line in enumerate(text.splitlines(), start=1)
                    if line.strip().replace(" ", "") == "[[scenario]]"]
    out = []
    for idx, tab in enumerate(tables):
        line = header_lines[idx] if idx < len(header_lines) else None
        unknown = set(tab) - _SCENARIO_KEYS
        if unknown:
            raise ParseError(f"unknown scenario keys {sorted(unknown)}", path, line)
        try:
            out.append(Scenario(
                id=int(tab["id"]), N=int(tab["N"]),
                p1=float(tab["p1"]), p2=float(tab["p2"]),
                m=tuple(tab["m"]), u=tuple(tab["u"]),
                reps=int(tab.get("reps", DEFAULT_REPS)), seed=int(tab.get("seed", 0)),
            ))
        except KeyError as exc:
            raise ParseError(f"scenario is missing key {exc}", path, line) from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"invalid scenario: {exc}", path, line) from None
    return out


def read_scenarios(path: str | os.PathLike) -> list[Scenario]:
    with open(path) as fh:
        return parse_scenarios(fh.read(), path=str(path))


def format_scenarios(scenarios: Iterable[Scenario]) -> str:
    blocks = []
    for s in scenarios:
        blocks.append(
            "[[scenario]]\n"
            f"id = {s.id}\n"
            f"N = {s.N}\n"
            f"p1 = {float(s.p1)!r}\n"
            f"p2 = {float(s.p2)!r}\n"
            f"m = [{', '.join(repr(float(x)) for x in s.m)}]\n"
            f"u = [{', '.join(repr(float(x)) for x in s.u)}]\n"
            f"reps = {s.reps}\n"
            f"seed = {s.seed}\n"
        )
    return "\n".join(blocks)
