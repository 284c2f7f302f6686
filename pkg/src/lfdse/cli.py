"""Command-line entry point.

Subcommands
-----------
simulate   run scenarios and write the per-scenario metrics CSV
estimate   fit the linkage model to a pattern-count file and report N_L
bootstrap  parametric bootstrap standard error and interval for N_L
classify   apply the three-way linkage rule to patterns read from stdin
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Sequence, TextIO

from .bootstrap import CI_METHODS, BootstrapConfig, bootstrap_variance
from .em import (
    EmFit,
    PatternCounts,
    fit_em,
    fit_report_fields,
    format_report,
    params_from_report,
    parse_report,
    read_pattern_counts,
)
from .errors import EmptyInputError, InconsistentInputError, LfdseError
from .estimators import estimated_matches, lfdse
from .patterns import classify, derive_thresholds, format_pattern, match_weight, parse_pattern
from .simulation import paper_scenarios, read_scenarios, rows_to_csv, run_suite

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

PRESETS = {"paper60": paper_scenarios}


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def _unit_interval(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfdse", description="Linkage-free dual system estimation."
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    src = sim.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="TOML scenario file")
    sim.add_argument("--seed", type=_seed, default=None,
                     help="master seed (overrides seeds in the config file)")
    sim.add_argument("--reps", type=_positive_int, default=None, help="replicates per scenario")
    sim.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    sim.add_argument("--out", help="CSV output path (default: stdout)")

    def counts_args(p):
        p.add_argument("counts", help='pattern-count file with lines "b1,...,bk,count"')
        p.add_argument("--n1", type=_positive_int, required=True, help="size of the first list")
        p.add_argument("--n2", type=_positive_int, required=True, help="size of the second list")
        p.add_argument("--out", help="report output path (default: stdout)")

    est = sub.add_parser("estimate", help="estimate N from pattern counts")
    counts_args(est)

    boot = sub.add_parser("bootstrap", help="bootstrap the N_L estimate")
    counts_args(boot)
    boot.add_argument("--replicates", type=int, default=1000)
    boot.add_argument("--ci", type=float, default=0.95, help="interval level")
    boot.add_argument("--ci-method", choices=CI_METHODS, default="percentile")
    boot.add_argument("--seed", type=_seed, default=0)
    boot.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                      help="accepted for symmetry; the bootstrap runs in one process")

    cls = sub.add_parser("classify", help="classify patterns read from stdin")
    cls.add_argument("params", help="fitted-parameter report written by estimate")
    cls.add_argument("--mu", type=_unit_interval, required=True, help="false-link level")
    cls.add_argument("--lambda", dest="lam", type=_unit_interval, required=True,
                     help="false-non-link level")
    return parser


def _emit(text: str, out_path: str | None, stdout: TextIO):
    if out_path is None:
        stdout.write(text)
    else:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)


def _load_counts(args) -> PatternCounts:
    counts = read_pattern_counts(args.counts)
    if counts.total == 0:
        raise EmptyInputError(f"{args.counts}: no pattern counts")
    omega = args.n1 * args.n2
    if counts.total != omega:
        raise InconsistentInputError(
            f"{args.counts}: pattern counts sum to {counts.total} but n1*n2 = {omega}"
        )
    return counts


def _fit(counts: PatternCounts) -> EmFit:
    fit = fit_em(counts)
    if not fit.converged:
        print(f"warning: EM stopped after {fit.iterations} iterations without converging",
              file=sys.stderr)
    return fit


def cmd_simulate(args, stdout: TextIO) -> int:
    if args.config is None and args.preset is None:
        raise _UsageError("simulate needs --preset or --config")
    if args.preset is not None:
        scenarios = PRESETS[args.preset](seed=args.seed or 0)
    else:
        scenarios = read_scenarios(args.config)
        if args.seed is not None:
            scenarios = [s.with_(seed=args.seed) for s in scenarios]
    if args.reps is not None:
        scenarios = [s.with_(reps=args.reps) for s in scenarios]
    rows = run_suite(scenarios, workers=args.threads)
    _emit(rows_to_csv(rows), args.out, stdout)
    failed = [r for r in rows if r.error is not None]
    for r in failed:
        print(f"error: {r.error}", file=sys.stderr)
    return EXIT_ERROR if failed else EXIT_OK


def cmd_estimate(args, stdout: TextIO) -> int:
    counts = _load_counts(args)
    fit = _fit(counts)
    fields = fit_report_fields(fit)
    fields["omega"] = counts.total
    fields["n_hat_L"] = lfdse(fit.p_hat).value
    fields["n11_hat"] = estimated_matches(fit.p_hat, counts.total)
    _emit(format_report(fields), args.out, stdout)
    return EXIT_OK


def cmd_bootstrap(args, stdout: TextIO) -> int:
    config = BootstrapConfig(replicates=args.replicates, ci_level=args.ci, seed=args.seed,
                             ci_method=args.ci_method)
    counts = _load_counts(args)
    fit = _fit(counts)
    res = bootstrap_variance(counts, args.n1, args.n2, fit, config)
    fields = {
        "n_hat_L": res.estimate,
        "se": res.se,
        "rse": res.rse,
        "ci_level": config.ci_level,
        "ci_method": config.ci_method,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "replicates": config.replicates,
        "degenerate_count": res.degenerate_count,
    }
    _emit(format_report(fields), args.out, stdout)
    return EXIT_OK


def cmd_classify(args, stdout: TextIO, stdin: TextIO) -> int:
    with open(args.params) as fh:
        params = params_from_report(parse_report(fh.read(), path=args.params))
    thr = derive_thresholds(params, args.mu, args.lam)
    writer = csv.writer(stdout, lineterminator="\n")
    for line in stdin:
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        pattern = parse_pattern(line, params.k)
        w = match_weight(params, pattern)
        writer.writerow([format_pattern(pattern), repr(w), classify(w, thr).value])
    return EXIT_OK


class _UsageError(Exception):
    pass


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None,
         stdin: TextIO | None = None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stdin = stdin if stdin is not None else sys.stdin
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.subcommand == "simulate":
            return cmd_simulate(args, stdout)
        if args.subcommand == "estimate":
            return cmd_estimate(args, stdout)
        if args.subcommand == "bootstrap":
            return cmd_bootstrap(args, stdout)
        return cmd_classify(args, stdout, stdin)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lfdse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LfdseError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
