"""Command-line front end: ``estimate``, ``predict``, ``simulate`` and ``replay``.

Exit codes: 0 success, 1 I/O or invalid configuration, 2 input parse error,
3 identification failure.  Every output directory gets a ``meta.json`` with the
full configuration; ``twoscale replay DIR/meta.json`` reruns it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import (WEIGHT_LAWS, BootstrapEnsemble, predict_survival, run_bootstrap,
                        write_estimates_csv, write_survival_csv)
from .data import CovariateSchema, ParseError, parse_subjects
from .grid import ThetaEstimate, TwoScaleGrid, build_grid
from .model import fit
from .operator import DEFAULT_SPECTRAL_TOL, spectral_report
from .simulation import (DEFAULT_SCENARIO, PiecewiseRate, Scenario, bias_study, coverage_study,
                         study_meta, write_band_table, write_bias_table, write_uncertainty_table)
from .solver import DivergenceError, IdentificationError

log = logging.getLogger("twoscale")

EXIT_OK, EXIT_IO, EXIT_PARSE, EXIT_IDENT = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid command-line configuration (exit 1)."""


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return value
    return parse


def _add_grid(p: argparse.ArgumentParser, defaults: dict) -> None:
    g = p.add_argument_group("grid")
    g.add_argument("--grid-time", type=int, default=100, metavar="J", help="duration grid points")
    g.add_argument("--grid-age", type=int, default=100, metavar="K", help="age grid points")
    g.add_argument("--tmax", type=float, default=defaults.get("tmax"))
    g.add_argument("--a0", type=float, default=defaults.get("a0"))
    g.add_argument("--amax", type=float, default=defaults.get("amax"))


def _add_solver(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--method", choices=("direct", "backfit"), default="direct")
    g.add_argument("--tol", type=_positive(float), default=1e-8, help="backfit stopping tolerance")
    g.add_argument("--max-iter", type=_positive(int), default=1000)
    g.add_argument("--spectral-tol", type=_positive(float), default=DEFAULT_SPECTRAL_TOL)


def _add_boot(p: argparse.ArgumentParser, default_b: int = 100) -> None:
    g = p.add_argument_group("bootstrap")
    g.add_argument("--boot", type=int, default=default_b, metavar="B", help="replicates (0 disables)")
    g.add_argument("--boot-variant", type=int, choices=(1, 2), default=1)
    g.add_argument("--weights", choices=WEIGHT_LAWS, default="normal")
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="subject CSV (id,entry_age,exit_time,event,covariates...)")
    g = p.add_argument_group("design")
    g.add_argument("--x-only", type=_csv_list, default=[], metavar="COLS",
                   help="covariate columns used only on the duration scale")
    g.add_argument("--z-only", type=_csv_list, default=[], metavar="COLS",
                   help="covariate columns used only on the age scale")
    g.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None,
                   help="add a shared at-risk column (default: only without covariates)")
    g.add_argument("--shared-d", type=int, default=None, metavar="D",
                   help="expected number of shared columns; checked against the design")
    g.add_argument("--delimiter", default=",")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twoscale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit the model to a subject file")
    _add_data(est)
    _add_grid(est, {})
    _add_solver(est)
    _add_boot(est)
    est.add_argument("--out", required=True, metavar="DIR")
    est.add_argument("--threads", type=_positive(int), default=1)

    pred = sub.add_parser("predict", help="survival curves with bands for given entry ages")
    src = pred.add_mutually_exclusive_group(required=True)
    src.add_argument("--from", dest="from_dir", metavar="DIR", help="directory written by estimate")
    src.add_argument("--data", metavar="CSV", help="fit this subject file first")
    pred.add_argument("--entry-ages", type=lambda s: [float(v) for v in _csv_list(s)], required=True)
    pred.add_argument("--x", type=lambda s: [float(v) for v in _csv_list(s)], default=None,
                      help="duration-scale covariate vector (default all ones)")
    pred.add_argument("--z", type=lambda s: [float(v) for v in _csv_list(s)], default=None,
                      help="age-scale covariate vector (default all ones)")
    pred.add_argument("--x-only", type=_csv_list, default=[], metavar="COLS")
    pred.add_argument("--z-only", type=_csv_list, default=[], metavar="COLS")
    pred.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)
    pred.add_argument("--shared-d", type=int, default=None)
    pred.add_argument("--delimiter", default=",")
    _add_grid(pred, {})
    _add_solver(pred)
    _add_boot(pred)
    pred.add_argument("--out", required=True, metavar="DIR")
    pred.add_argument("--threads", type=_positive(int), default=1)

    sim = sub.add_parser("simulate", help="Monte Carlo bias and coverage studies")
    sim.add_argument("--table", choices=("bias", "coverage", "all"), default="all")
    sim.add_argument("--n", type=lambda s: [int(v) for v in _csv_list(s)], default=[100, 200, 400],
                     help="comma-separated sample sizes")
    sim.add_argument("--reps", type=_positive(int), default=1000)
    sim.add_argument("--entry-max", type=float, default=DEFAULT_SCENARIO.entry_max)
    sim.add_argument("--entry-zero-prob", type=float, default=DEFAULT_SCENARIO.entry_zero_prob)
    sim.add_argument("--beta", type=float, default=DEFAULT_SCENARIO.beta.rates[0],
                     help="constant age-scale rate")
    _add_grid(sim, dict(tmax=DEFAULT_SCENARIO.censor_time, a0=DEFAULT_SCENARIO.a0,
                        amax=DEFAULT_SCENARIO.a_max))
    _add_boot(sim)
    sim.add_argument("--out", required=True, metavar="DIR")
    sim.add_argument("--threads", type=_positive(int), default=1,
                     help="worker processes; results do not depend on it")

    rep = sub.add_parser("replay", help="rerun the configuration stored in a meta.json")
    rep.add_argument("meta", help="meta.json written by an earlier run")
    rep.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    return parser


# Helpers ----------------------------------------------------------------------

def _config(args: argparse.Namespace) -> dict:
    skip = {"verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_meta(out: Path, config: dict, extra: dict | None = None) -> None:
    meta = dict(version=__version__, config=config)
    if extra:
        meta.update(extra)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_cohort(path: str, args):
    text = Path(path).read_text()
    header = text.splitlines()[0].split(args.delimiter) if text else []
    covs = [h.strip() for h in header[4:]]
    schema = None
    if args.x_only or args.z_only or args.intercept is not None:
        unknown = [c for c in args.x_only + args.z_only if c not in covs]
        if unknown:
            raise ConfigError(f"columns not in the input header: {unknown}")
        shared = tuple(c for c in covs if c not in args.x_only and c not in args.z_only)
        intercept = args.intercept if args.intercept is not None else not shared
        schema = CovariateSchema(shared, tuple(args.x_only), tuple(args.z_only), intercept)
    cohort = parse_subjects(text, schema, delimiter=args.delimiter, t_max=args.tmax, a0=args.a0,
                            a_max=args.amax)
    if args.shared_d is not None and args.shared_d != cohort.d:
        raise ConfigError(f"--shared-d {args.shared_d} does not match the design's {cohort.d} "
                          "shared columns")
    return cohort


def _fit_and_boot(args):
    cohort = _load_cohort(args.input if args.command == "estimate" else args.data, args)
    if args.grid_time < 2 or args.grid_age < 2:
        raise ConfigError("grid sizes must be at least 2")
    grid = build_grid(cohort.t_max, cohort.a0, cohort.a_max, args.grid_time, args.grid_age)
    result = fit(cohort, grid, method=args.method, tol=args.tol, max_iter=args.max_iter)
    report = spectral_report(result.operator, args.spectral_tol)
    if not report.identifiable:
        log.warning("spectral report: near-unit multiplicities (%d, %d) differ from d=%d",
                    report.near_unit_E2, report.near_unit_E, report.d)
    ens = None
    if args.boot >= 2:
        ens = run_bootstrap(result.increments, result.marginal, result.operator, result.theta,
                            replicates=args.boot, variant=args.boot_variant, weights=args.weights,
                            seed=args.seed, factorization=result.factorization)
    elif args.boot == 1:
        raise ConfigError("--boot must be 0 or at least 2")
    return result, report, ens


def _save_fit(out: Path, result, ens: BootstrapEnsemble | None) -> None:
    g = result.grid
    reps = ens.replicates if ens is not None else np.zeros((0, result.operator.size))
    np.savez(out / "fit.npz", t_points=g.t_points, a_points=g.a_points, p=result.theta.p,
             q=result.theta.q, d=result.cohort.d, theta=result.theta.stack(), replicates=reps,
             variant=ens.variant if ens else 0, seed=ens.seed if ens else 0)


def _load_fit(directory: Path):
    with np.load(directory / "fit.npz") as z:
        grid = TwoScaleGrid(z["t_points"], z["a_points"])
        p, q = int(z["p"]), int(z["q"])
        theta = ThetaEstimate.unstack(z["theta"], grid, p, q)
        reps = z["replicates"]
        ens = None
        if reps.shape[0] >= 2:
            ens = BootstrapEnsemble(reps, int(z["variant"]), "normal", int(z["seed"]), grid, p, q)
    return grid, theta, ens


# Commands ----------------------------------------------------------------------

def cmd_estimate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, report, ens = _fit_and_boot(args)
    with open(out / "estimates.csv", "w", newline="") as fh:
        write_estimates_csv(result.theta, fh, ens, args.alpha)
    (out / "solve_report.txt").write_text(result.report.as_text())
    (out / "spectral_report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    _save_fit(out, result, ens)
    _write_meta(out, _config(args), dict(solve_report=result.report.__dict__))
    return EXIT_OK


def cmd_predict(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.from_dir:
        grid, theta, ens = _load_fit(Path(args.from_dir))
    else:
        result, _, ens = _fit_and_boot(args)
        grid, theta = result.grid, result.theta
    for age in args.entry_ages:
        if age < grid.a0 or age + grid.t_max > grid.a_max + 1e-12:
            raise ConfigError(f"entry age {age} outside the age grid")
    for age in args.entry_ages:
        pred = predict_survival(theta, ens, grid, age, args.alpha, args.x, args.z)
        with open(out / f"survival_{age:g}.csv", "w", newline="") as fh:
            write_survival_csv(pred, fh)
    _write_meta(out, _config(args))
    return EXIT_OK


def _scenario(args) -> Scenario:
    return Scenario(beta=PiecewiseRate((args.a0, args.amax), (args.beta,)),
                    entry_zero_prob=args.entry_zero_prob, entry_max=args.entry_max,
                    censor_time=args.tmax, a0=args.a0, a_max=args.amax,
                    grid_time=args.grid_time, grid_age=args.grid_age)


def cmd_simulate(args) -> int:
    try:
        scenario = _scenario(args)
    except ValueError as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    if not args.n or min(args.n) < 1:
        raise ConfigError("--n needs positive sample sizes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.threads if args.threads > 1 else None
    if args.table == "bias":
        results = [bias_study(n, args.reps, scenario, args.seed, workers=workers) for n in args.n]
    else:
        if args.boot < 2:
            raise ConfigError("coverage tables need --boot >= 2")
        results = [coverage_study(n, args.reps, args.boot, args.alpha, scenario, args.seed,
                                  variant=args.boot_variant, workers=workers) for n in args.n]
    with open(out / "table1_bias.csv", "w", newline="") as fh:
        write_bias_table(results, fh)
    if args.table != "bias":
        with open(out / "table2_uncertainty.csv", "w", newline="") as fh:
            write_uncertainty_table(results, fh)
        with open(out / "table3_bands.csv", "w", newline="") as fh:
            write_band_table(results, fh)
    _write_meta(out, _config(args), study_meta(results))
    return EXIT_OK


def cmd_replay(args) -> int:
    meta = json.loads(Path(args.meta).read_text())
    config = dict(meta["config"])
    if args.out is not None:
        config["out"] = args.out
    return dispatch(argparse.Namespace(**config))


COMMANDS = dict(estimate=cmd_estimate, predict=cmd_predict, simulate=cmd_simulate,
                replay=cmd_replay)


def dispatch(args: argparse.Namespace) -> int:
    try:
        return COMMANDS[args.command](args)
    except ParseError as exc:
        print(f"twoscale: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (IdentificationError, DivergenceError) as exc:
        print(f"twoscale: identification failure: {exc}", file=sys.stderr)
        return EXIT_IDENT
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        print(f"twoscale: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
