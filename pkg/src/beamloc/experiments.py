"""Monte Carlo drivers: RMSE vs power, error CDF, LOS power fraction vs clock spread.

Every trial draws from its own ``SeedSequence((seed, experiment, strategy,
point, trial))`` so results do not depend on scheduling or worker count.
Output tables are written as CSV with ``repr`` floats; see README for the
column schemas.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .allocate import Allocation, q_los_metric, run_strategy, with_clock_std
from .estimate import GridCorrelator, calibrate_threshold, default_config
from .fisher import SingularFimError, beam_position_fims, fim_at_allocation, hybrid_fim, \
    observation_fim, speb
from .geometry import GeometryError, pos_to_channel
from .locate import LocateConfig, NoDetectionError, locate
from .scenario import Scenario
from .waveform import synthesize_received

log = logging.getLogger(__name__)

EXPERIMENTS = ("rmse", "cdf", "qlos")
_EXP_CODE = {"rmse": 1, "cdf": 2, "qlos": 3, "alloc": 11, "calib": 12, "points": 13}
PERCENTILES = (50, 90, 95, 99)
MANIFEST = "manifest.json"

SCHEMAS = {
    "rmse.csv": ["strategy", "p_re_dbm", "peb_m", "rmse_m", "n_trials", "n_censored",
                 "threshold"],
    "cdf.csv": ["strategy", "trial", "error_m", "status", "n_paths"],
    "percentiles.csv": ["strategy", "p50_m", "p90_m", "p95_m", "p99_m", "n_trials",
                        "n_censored"],
    "qlos.csv": ["n_rx", "strategy", "clock_std_units", "clock_std_s", "q_los", "mean_peb_m",
                 "espeb_m2", "status"],
}


def thread_count() -> int:
    """Worker count from BEAMLOC_THREADS (default 1)."""
    raw = os.environ.get("BEAMLOC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"BEAMLOC_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def seed_for(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + [int(k) for k in keys])


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class MetricsReport:
    experiment: str
    tables: dict = field(default_factory=dict)  # file name -> list of row tuples
    allocations: dict = field(default_factory=dict)


# ---------------------------------------------------------------- trials

@dataclass(frozen=True)
class TrialContext:
    scenario_json: str
    q: tuple
    p_re_dbm: float
    threshold: float
    fixed_geometry: bool
    n_rx: int | None = None


@lru_cache(maxsize=16)
def _resolve(ctx: TrialContext):
    sc = Scenario.model_validate_json(ctx.scenario_json)
    system = sc.system(ctx.p_re_dbm, ctx.n_rx)
    X = system.reference(np.array(ctx.q))
    est = sc.estimator
    cfg = default_config(X, ctx.threshold, est.tau_max_s, est.grid_oversampling,
                         prune_ratio=10 ** (est.zeta2_db / 10), n_cd=est.n_cd,
                         l_max=est.l_max, p_fa=est.p_fa)
    return sc, system, X, cfg, sc.prior_model(), LocateConfig(est.zeta3a, est.zeta3b)


def run_trial(ctx: TrialContext, entropy: tuple):
    """One draw of geometry, clock, phases and noise; returns (error_m, status, n_paths)."""
    sc, system, X, cfg, prior, lcfg = _resolve(ctx)
    rng = np.random.default_rng(np.random.SeedSequence(list(entropy)))
    nu = prior.mean_params() if ctx.fixed_geometry else prior.sample_params(rng, 1)[0]
    phases = rng.uniform(0, 2 * np.pi, nu.n_paths)
    eps = rng.normal(0.0, sc.clock_std)
    nu = nu.replace(gains=np.abs(nu.gains) * np.exp(1j * phases), clock_offset=eps)
    try:
        Y = synthesize_received(X, pos_to_channel(nu), system.noise_variance, rng)
        fix = locate(Y, X, cfg, sc.clock_std, lcfg)
    except NoDetectionError:
        return float("nan"), "no_detection", 0
    except (GeometryError, SingularFimError, np.linalg.LinAlgError) as exc:
        log.debug("trial failed: %s", exc)
        return float("nan"), "failed", 0
    return fix.error(nu.rx_position), "ok", len(fix.paths)


def _init_worker():
    threadpool_limits(1)


def map_trials(ctx: TrialContext, entropies, threads: int | None = None):
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(entropies) < 2:
        with threadpool_limits(1):
            return [run_trial(ctx, e) for e in entropies]
    chunk = max(1, len(entropies) // (4 * threads))
    with ProcessPoolExecutor(threads, initializer=_init_worker) as pool:
        return list(pool.map(run_trial, [ctx] * len(entropies), entropies, chunksize=chunk))


# ---------------------------------------------------------------- shared steps

def allocate_for(sc: Scenario, strategy: str, p_re_dbm: float, seed: int, point: int,
                 clock_std: float | None = None, n_rx: int | None = None) -> Allocation:
    system = sc.system(p_re_dbm, n_rx)
    prior = sc.prior_model(clock_std)
    rng = np.random.default_rng(seed_for(seed, _EXP_CODE["alloc"], _strategy_key(strategy), point))
    with threadpool_limits(1):
        return run_strategy(strategy, prior, system, rng, sc.strategy_settings())


def calibrate_for(sc: Scenario, q, p_re_dbm: float, seed: int, strategy: str, point: int,
                  n_rx: int | None = None) -> float:
    system = sc.system(p_re_dbm, n_rx)
    X = system.reference(q)
    est = sc.estimator
    cfg = default_config(X, 0.0, est.tau_max_s, est.grid_oversampling)
    rng = np.random.default_rng(seed_for(seed, _EXP_CODE["calib"], _strategy_key(strategy), point))
    with threadpool_limits(1):
        return calibrate_threshold(X, system.noise_variance, est.p_fa, est.calibration_trials,
                                   rng, cfg)


def _strategy_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def peb_at_mean(sc: Scenario, q, p_re_dbm: float) -> float:
    """PEB at the prior-mean geometry (zero phases, zero clock offset)."""
    system = sc.system(p_re_dbm)
    nu = sc.prior_model().mean_params()
    X = system.reference(q)
    J = hybrid_fim(observation_fim(X, nu, system.noise_variance), sc.clock_std)
    try:
        return speb(J).peb
    except SingularFimError:
        return float("inf")


# ---------------------------------------------------------------- experiments

def run_rmse_vs_power(sc: Scenario, strategies=None, powers=None, n_trials=None, seed=None,
                      threads=None) -> MetricsReport:
    """Position RMSE and PEB at the prior-mean geometry over a transmit-power sweep."""
    strategies = list(strategies or sc.strategies)
    powers = list(sc.power_sweep_dbm if powers is None else powers)
    n_trials = sc.trials_rmse if n_trials is None else n_trials
    seed = sc.seed if seed is None else seed
    rep = MetricsReport("rmse")
    rows = []
    js = sc.canonical_json()
    for s in strategies:
        for k, p in enumerate(powers):
            alloc = allocate_for(sc, s, p, seed, k)
            thr = calibrate_for(sc, alloc.q, p, seed, s, k)
            ctx = TrialContext(js, tuple(float(x) for x in alloc.q), float(p), thr, True)
            ent = [(seed, _EXP_CODE["rmse"], _strategy_key(s), k, t) for t in range(n_trials)]
            res = map_trials(ctx, ent, threads)
            err = np.array([r[0] for r in res])
            ok = np.array([r[1] == "ok" for r in res])
            rmse = float(np.sqrt(np.mean(err[ok] ** 2))) if ok.any() else float("nan")
            peb = peb_at_mean(sc, alloc.q, p)
            rows.append((s, float(p), peb, rmse, n_trials, int((~ok).sum()), thr))
            rep.allocations[(s, float(p))] = alloc
            log.info("rmse %s %+.1f dBm: rmse %.4g m, peb %.4g m, censored %d", s, p, rmse, peb,
                     (~ok).sum())
    rep.tables["rmse.csv"] = rows
    return rep


def percentiles(errors, statuses, qs=PERCENTILES):
    """Percentiles with censored trials counted as +inf (never dropped)."""
    e = np.where(np.asarray(statuses) == "ok", np.asarray(errors, float), np.inf)
    return [float(np.percentile(e, q, method="inverted_cdf")) for q in qs]


def run_error_cdf(sc: Scenario, strategies=None, p_re_dbm=None, n_trials=None, seed=None,
                  threads=None) -> MetricsReport:
    """Position-error samples over prior-drawn geometries at one transmit power."""
    strategies = list(strategies or sc.strategies)
    p = sc.p_re_dbm if p_re_dbm is None else p_re_dbm
    n_trials = sc.trials_cdf if n_trials is None else n_trials
    seed = sc.seed if seed is None else seed
    rep = MetricsReport("cdf")
    samples, pct = [], []
    js = sc.canonical_json()
    for s in strategies:
        alloc = allocate_for(sc, s, p, seed, 0)
        thr = calibrate_for(sc, alloc.q, p, seed, s, 0)
        ctx = TrialContext(js, tuple(float(x) for x in alloc.q), float(p), thr, False)
        ent = [(seed, _EXP_CODE["cdf"], _strategy_key(s), 0, t) for t in range(n_trials)]
        res = map_trials(ctx, ent, threads)
        for t, (e, st, n) in enumerate(res):
            samples.append((s, t, e, st, n))
        stat = [r[1] for r in res]
        pv = percentiles([r[0] for r in res], stat)
        n_cens = sum(x != "ok" for x in stat)
        pct.append((s, *pv, n_trials, n_cens))
        rep.allocations[(s, float(p))] = alloc
        log.info("cdf %s: percentiles %s, censored %d", s, pv, n_cens)
    rep.tables["cdf.csv"] = samples
    rep.tables["percentiles.csv"] = pct
    return rep


def _sweep_points(sc: Scenario, seed: int, n_rx_index: int):
    prior = sc.prior_model()
    rng = np.random.default_rng(seed_for(seed, _EXP_CODE["points"], n_rx_index))
    pts = []
    while len(pts) < sc.espeb_samples:
        for nu in prior.sample_params(rng, sc.espeb_samples - len(pts)):
            try:
                pos_to_channel(nu)
            except GeometryError:
                continue
            pts.append(nu)
    return pts


def run_qlos_sweep(sc: Scenario, strategies=None, clock_units=None, n_rx_list=None, seed=None,
                   threads=None) -> MetricsReport:
    """Allocation, LOS power fraction and mean PEB across clock-offset spreads."""
    strategies = list(strategies or sc.strategies)
    units = list(sc.clock_sweep_units if clock_units is None else clock_units)
    n_rx_list = list(sc.qlos_n_rx if n_rx_list is None else n_rx_list)
    seed = sc.seed if seed is None else seed
    rep = MetricsReport("qlos")
    rows = []
    sp = sc.strategy_params
    for r, n_rx in enumerate(n_rx_list):
        system = sc.system(None, n_rx)
        pts = _sweep_points(sc, seed, r)
        with threadpool_limits(1):
            stacks = [beam_position_fims(system, nu) for nu in pts]
        for s in strategies:
            for k, u in enumerate(units):
                cs = float(u) * sc.delay_unit
                prior = with_clock_std(sc.prior_model(), cs)
                try:
                    alloc = allocate_for(sc, s, sc.p_re_dbm, seed, 1000 * r, cs, n_rx)
                except Exception as exc:  # solver failure is reported, not fatal
                    log.warning("qlos %s n_rx=%d units=%g: %s", s, n_rx, u, exc)
                    rows.append((n_rx, s, float(u), cs, float("nan"), float("nan"),
                                 float("nan"), "failed"))
                    continue
                qlos = q_los_metric(alloc.q, prior, system, sp.kappa, sp.n_theta)
                sq = []
                for S in stacks:
                    try:
                        sq.append(speb(fim_at_allocation(S, alloc.q, cs)).speb)
                    except SingularFimError:
                        sq.append(np.inf)
                sq = np.array(sq)
                rows.append((n_rx, s, float(u), cs, qlos, float(np.mean(np.sqrt(sq))),
                             float(np.mean(sq)), alloc.status))
                rep.allocations[(s, n_rx, float(u))] = alloc
                log.info("qlos %s n_rx=%d units=%g: q_los %.3f, E[PEB] %.4g m", s, n_rx, u,
                         qlos, np.mean(np.sqrt(sq)))
    rep.tables["qlos.csv"] = rows
    return rep


# ---------------------------------------------------------------- output

def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit(report: MetricsReport, out_dir, manifest: dict | None = None, plots: bool = True) -> dict:
    """Write CSV tables, optional SVG charts and a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, rows in report.tables.items():
        write_csv(out / name, SCHEMAS[name], rows)
        hashes[name] = _sha256(out / name)
    if plots:
        try:
            from .plots import plot_report
            plot_report(report, out)
        except ImportError:  # matplotlib is optional
            log.warning("matplotlib not available; skipping plots")
    m = dict(manifest or {})
    m["outputs"] = hashes
    (out / MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return m


def make_manifest(sc: Scenario, experiment: str, seed: int, trials: int | None,
                  strategies) -> dict:
    return {
        "manifest_version": 1,
        "package_version": __version__,
        "experiment": experiment,
        "seed": int(seed),
        "trials": trials,
        "strategies": list(strategies),
        "scenario": json.loads(sc.canonical_json()),
        "scenario_sha256": sc.digest(),
    }


def run_experiment(sc: Scenario, experiment: str, trials: int | None = None,
                   seed: int | None = None, strategies=None, threads=None) -> MetricsReport:
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    if experiment == "rmse":
        return run_rmse_vs_power(sc, strategies, None, trials, seed, threads)
    if experiment == "cdf":
        return run_error_cdf(sc, strategies, None, trials, seed, threads)
    return run_qlos_sweep(sc, strategies, None, None, seed, threads)


def rerun_from_manifest(path, out_dir, plots: bool = False, threads=None) -> dict:
    """Repeat an experiment exactly as recorded in a manifest."""
    m = json.loads(Path(path).read_text())
    sc = Scenario.model_validate(m["scenario"])
    if sc.digest() != m["scenario_sha256"]:
        raise ValueError("manifest scenario does not match its recorded digest")
    rep = run_experiment(sc, m["experiment"], m["trials"], m["seed"], m["strategies"], threads)
    base = {k: v for k, v in m.items() if k != "outputs"}
    return emit(rep, out_dir, base, plots)
