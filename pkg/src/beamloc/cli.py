"""Command-line entry point: ``beamloc {allocate,simulate,calibrate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocate import read_allocation_csv, write_allocation_csv
from .experiments import (EXPERIMENTS, allocate_for, calibrate_for, emit, make_manifest,
                          rerun_from_manifest, run_experiment)
from .scenario import load_scenario

log = logging.getLogger("beamloc")


def _strategies(arg):
    return [s.strip() for s in arg.split(",") if s.strip()] if arg else None


def cmd_allocate(args) -> int:
    sc = load_scenario(args.scenario)
    p = sc.p_re_dbm if args.p_re_dbm is None else args.p_re_dbm
    seed = sc.seed if args.seed is None else args.seed
    alloc = allocate_for(sc, args.strategy, p, seed, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"allocation_{args.strategy}.csv"
    write_allocation_csv(alloc, path, {"scenario": sc.name, "scenario_sha256": sc.digest(),
                                       "p_re_dbm": p, "seed": seed})
    obj = "n/a" if alloc.objective is None else f"{alloc.objective:.6g}"
    print(f"{args.strategy}: status={alloc.status} objective={obj} -> {path}")
    return 0


def cmd_simulate(args) -> int:
    if args.manifest:
        m = rerun_from_manifest(args.manifest, args.out, plots=not args.no_plots)
        print(f"rerun {m['experiment']} -> {args.out}")
        return 0
    if not (args.experiment and args.scenario):
        raise SystemExit("simulate needs --experiment and --scenario (or --manifest)")
    sc = load_scenario(args.scenario)
    seed = sc.seed if args.seed is None else args.seed
    strategies = _strategies(args.strategies) or list(sc.strategies)
    rep = run_experiment(sc, args.experiment, args.trials, seed, strategies)
    emit(rep, args.out, make_manifest(sc, args.experiment, seed, args.trials, strategies),
         plots=not args.no_plots)
    print(f"{args.experiment} -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    sc = load_scenario(args.scenario)
    p = sc.p_re_dbm if args.p_re_dbm is None else args.p_re_dbm
    seed = sc.seed if args.seed is None else args.seed
    if args.allocation:
        q, _ = read_allocation_csv(args.allocation)
        name = Path(args.allocation).stem
    else:
        q = allocate_for(sc, args.strategy, p, seed, 0).q
        name = args.strategy
    if args.trials is not None:
        sc = sc.model_copy(update={"estimator": sc.estimator.model_copy(
            update={"calibration_trials": args.trials})})
    sc = sc.model_copy(update={"estimator": sc.estimator.model_copy(update={"p_fa": args.pfa})})
    thr = calibrate_for(sc, np.asarray(q), p, seed, name, 0)
    print(f"zeta1={thr!r} p_fa={args.pfa} trials={sc.estimator.calibration_trials} "
          f"strategy={name} p_re_dbm={p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="beamloc", description=__doc__)
    ap.add_argument("--version", action="version", version=f"beamloc {__version__}")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("allocate", help="compute a beam power allocation")
    a.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    a.add_argument("--strategy", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--p-re-dbm", type=float)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_allocate)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    s.add_argument("--experiment", choices=EXPERIMENTS)
    s.add_argument("--scenario")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--strategies", help="comma-separated subset of the scenario strategies")
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--manifest", help="rerun exactly from a previous manifest.json")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="calibrate the detection threshold")
    c.add_argument("--scenario", required=True)
    c.add_argument("--pfa", type=float, default=0.05)
    c.add_argument("--strategy", default="subopt")
    c.add_argument("--allocation", help="allocation CSV instead of --strategy")
    c.add_argument("--p-re-dbm", type=float)
    c.add_argument("--trials", type=int)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
