"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

Full-scale by default (about 25 minutes on one core). BEAMLOC_QUICK=1 runs the
Monte Carlo criteria with reduced trial counts as a smoke proxy; their lines
are tagged "(quick proxy)" and do not count as acceptance evidence.
Run standalone with ``python3 tests/test_acceptance.py`` for the summary only.
"""

import os
import sys
import time
import warnings

import numpy as np
import pytest

from beamloc.allocate import allocation_espeb
from beamloc.estimate import GridCorrelator, PathEstimate, adcg_run, default_config
from beamloc.experiments import (allocate_for, calibrate_for, emit, make_manifest,
                                 rerun_from_manifest, run_error_cdf, run_experiment,
                                 run_qlos_sweep, run_rmse_vs_power, seed_for)
from beamloc.fisher import (beam_position_fims, channel_fim, fim_at_allocation,
                            observation_fim, speb)
from beamloc.geometry import pos_to_channel, wrap_angle
from beamloc.locate import locate_from_paths
from beamloc.scenario import Scenario, load_scenario, indoor_prior_arrays
from beamloc.sdp import OPTIMAL, solve
from beamloc.waveform import atom, synthesize_received

sys.path.insert(0, os.path.dirname(__file__))
from conftest import random_geometry  # noqa: E402
from oracles import fd_channel_fim, fd_observation_fim  # noqa: E402
from sdp_suite import suite  # noqa: E402

QUICK = os.environ.get("BEAMLOC_QUICK") == "1"
TAG = " (quick proxy)" if QUICK else ""
RESULTS = {}

OPTIMIZED = ("opt_unconstr", "opt_constr", "opt_reduced", "subopt")
SWEPT = ("opt_unconstr", "opt_constr", "opt_reduced")
UNIFORM = ("uni_0.60", "uni_0.90")


def record(n: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}{TAG}: {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def paper_default():
    return load_scenario("paper_default")


@pytest.fixture(scope="module")
def paper_small():
    return load_scenario("paper_small")


def _normalized_error(J, Jref):
    d = np.sqrt(np.diag(Jref))
    return float(np.abs((J - Jref) / np.outer(d, d)).max())


# ---------------------------------------------------------------- 1

def test_criterion_01_fim_correctness(paper_small):
    t0 = time.perf_counter()
    system = paper_small.system(0.0)
    rng = np.random.default_rng(101)
    worst = 0.0
    for k in range(100):
        q = rng.dirichlet(np.ones(system.codebook.n_beams))
        X = system.reference(q)
        nu = random_geometry(rng, int(rng.integers(2, 5)), clock=rng.uniform(-5e-9, 5e-9))
        ch = pos_to_channel(nu)
        nv = system.noise_variance
        worst = max(worst,
                    _normalized_error(channel_fim(X, ch, nv), fd_channel_fim(X, ch, nv)),
                    _normalized_error(observation_fim(X, nu, nv), fd_observation_fim(X, nu, nv)))
    dt = time.perf_counter() - t0
    record(1, "FIM vs finite differences", worst < 1e-4 and dt < 60,
           f"max normalized error {worst:.2e} (< 1e-4) over 100 configs, {dt:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 2

def test_criterion_02_sdp_suite():
    problems = suite()
    t0 = time.perf_counter()
    worst_gap, worst_rel, bad = 0.0, 0.0, []
    for name, prob, opt in problems:
        sol = solve(prob)
        rel = abs(sol.primal_objective - opt) / max(1.0, abs(opt))
        worst_gap = max(worst_gap, sol.relative_gap)
        worst_rel = max(worst_rel, rel)
        if sol.status != OPTIMAL or sol.relative_gap > 1e-7 or rel > 1e-5:
            bad.append(name)
    dt = time.perf_counter() - t0
    record(2, "SDP solver suite", not bad and len(problems) == 30 and dt < 120,
           f"{len(problems)} problems, max gap {worst_gap:.1e} (<= 1e-7), max rel. objective "
           f"error {worst_rel:.1e} (<= 1e-5), {dt:.1f} s (< 120 s), failures {bad}")


# ---------------------------------------------------------------- 3

def test_criterion_03_jensen_bound(paper_small):
    system = paper_small.system(0.0)
    rng = np.random.default_rng(303)
    mu0, C0 = indoor_prior_arrays()
    worst = -np.inf
    for k in range(50):
        # random prior: jittered means and scaled covariance around the bundled one
        sc = paper_small.model_copy(update={"prior": paper_small.prior.model_copy(update={
            "mean": (mu0 + rng.normal(0, 1.0, mu0.size)).tolist(),
            "cov": (C0 * rng.uniform(0.5, 2.0)).tolist()})})
        prior = sc.prior_model()
        q = rng.dirichlet(np.ones(system.codebook.n_beams))
        pts = prior.sample_params(rng, 8)
        Js = [fim_at_allocation(beam_position_fims(system, nu), q, prior.clock_std) for nu in pts]
        lhs = speb(np.mean(Js, axis=0)).speb
        rhs = float(np.mean([speb(J).speb for J in Js]))
        worst = max(worst, lhs - rhs)
    record(3, "Jensen bound", worst <= 1e-9,
           f"max [SPEB(mean J) - mean SPEB] = {worst:.3e} m^2 (<= 1e-9) over 50 priors")


# ---------------------------------------------------------------- 4

def _espeb_table(sc, n_points=200):
    prior = sc.prior_model()
    system = sc.system(0.0)
    pts = prior.sample_params(np.random.default_rng(seed_for(sc.seed, 404)), n_points)
    out = {}
    for s in OPTIMIZED + UNIFORM:
        alloc = allocate_for(sc, s, 0.0, sc.seed, 0)
        out[s] = allocation_espeb(alloc.q, prior, system, pts)
    return out


def test_criterion_04_strategy_dominance(paper_small, paper_default):
    small = _espeb_table(paper_small)
    dom_small = all(small[o] <= small[u] for o in OPTIMIZED for u in UNIFORM)
    parts = [f"paper_small dominance {dom_small}"]
    ok = dom_small
    if not QUICK:
        full = _espeb_table(paper_default)
        gains = {o: 10 * np.log10(min(full[u] for u in UNIFORM) / full[o]) for o in OPTIMIZED}
        dom = all(full[o] <= full[u] for o in OPTIMIZED for u in UNIFORM)
        band = all(1.5 <= g <= 5.5 for g in gains.values())
        ok = ok and dom and band
        parts.append(f"paper_default dominance {dom}, gain over best uniform (dB) "
                     + ", ".join(f"{o} {g:.2f}" for o, g in gains.items())
                     + " (within 3-4 +-1.5 dB: " + str(band) + ")")
    record(4, "strategy dominance", ok, "; ".join(parts))


# ---------------------------------------------------------------- 5

def test_criterion_05_table_one(paper_default):
    n = 150 if QUICK else 1000
    rep = run_error_cdf(paper_default, OPTIMIZED + UNIFORM, 0.0, n, paper_default.seed)
    pct = {r[0]: r[1:5] for r in rep.tables["percentiles.csv"]}
    cens = {r[0]: r[6] for r in rep.tables["percentiles.csv"]}
    target = (0.21, 0.57, 0.76)
    got = pct["opt_reduced"][:3]
    within = all(abs(g - t) <= 0.25 * t for g, t in zip(got, target))
    p90 = {s: v[1] for s, v in pct.items()}
    order = (p90["opt_reduced"] <= p90["opt_constr"] <= p90["subopt"]
             <= min(p90[u] for u in UNIFORM))
    rows = "; ".join(f"{s} p50/90/95/99 = " + "/".join(f"{v:.3f}" for v in pct[s])
                     + f" censored {cens[s]}" for s in pct)
    record(5, "error percentiles", within and order,
           f"{n} trials; opt_reduced (p50,p90,p95) = ({got[0]:.3f}, {got[1]:.3f}, {got[2]:.3f}) "
           f"vs {target} +-25%: {within}; p90 ordering reduced<=constr<=subopt<=uni: {order}; "
           + rows)


# ---------------------------------------------------------------- 6

def test_criterion_06_rmse_behavior(paper_default):
    n = 50 if QUICK else paper_default.trials_rmse
    hi, lo = max(paper_default.power_sweep_dbm), min(paper_default.power_sweep_dbm)
    constrained = ("opt_constr", "opt_reduced", "subopt")
    high = run_rmse_vs_power(paper_default, constrained, [hi], n).tables["rmse.csv"]
    low = run_rmse_vs_power(paper_default, UNIFORM, [lo], n).tables["rmse.csv"]
    ratios = {r[0]: r[3] / r[2] for r in high}
    ok_ratio = all(1.0 <= v <= 1.3 for v in ratios.values())
    target = 4.88
    low_rmse = {r[0]: r[3] for r in low}
    ok_low = all(abs(v - target) <= 0.2 * target for v in low_rmse.values())
    record(6, "RMSE vs power behavior", ok_ratio and ok_low,
           f"{n} trials; RMSE/PEB at {hi:+.0f} dBm "
           + ", ".join(f"{s} {v:.3f}" for s, v in ratios.items()) + " (in [1, 1.3]); "
           + f"uniform RMSE at {lo:+.0f} dBm "
           + ", ".join(f"{s} {v:.2f} m" for s, v in low_rmse.items()) + " (4.88 m +-20%); "
           + "censored " + ", ".join(f"{r[0]}@{r[1]:+.0f} {r[5]}" for r in high + low))


# ---------------------------------------------------------------- 7

def test_criterion_07_qlos_sweep(paper_default):
    sc = paper_default
    if QUICK:
        sc = sc.model_copy(update={"espeb_samples": 20, "qlos_n_rx": [sc.n_rx]})
    rows = run_qlos_sweep(sc, SWEPT).tables["qlos.csv"]
    problems = []
    for n_rx in sorted({r[0] for r in rows}):
        for s in SWEPT:
            sel = sorted((r for r in rows if r[0] == n_rx and r[1] == s), key=lambda r: r[2])
            q = np.array([r[4] for r in sel])
            peb = np.array([r[5] for r in sel])
            tag = f"{s}/n_rx={n_rx}"
            if any(r[7] == "failed" for r in sel):
                problems.append(f"{tag} solver failure")
                continue
            if not q[0] > 0.8:
                problems.append(f"{tag} q_LOS at smallest sigma {q[0]:.3f} <= 0.8")
            if np.any(np.diff(q) > 0.02):
                problems.append(f"{tag} q_LOS increases by {np.diff(q).max():.3f}")
            if np.any(np.diff(peb) < -1e-3 * peb[:-1]):
                problems.append(f"{tag} E[PEB] decreases")
            if abs(peb[-1] - peb[-2]) > 0.05 * peb[-2]:
                problems.append(f"{tag} E[PEB] not saturated ({peb[-2]:.4g} -> {peb[-1]:.4g})")
    summary = "; ".join(
        f"{r[1]}/n_rx={r[0]} u={r[2]:g}: q_LOS {r[4]:.3f} E[PEB] {r[5]:.4g}" for r in rows
        if r[2] in (min(x[2] for x in rows), max(x[2] for x in rows)))
    record(7, "q_LOS sweep behavior", not problems,
           ("all properties hold" if not problems else "violations: " + "; ".join(problems))
           + " | endpoints: " + summary)


# ---------------------------------------------------------------- 8

def _match(est, truth, crlb, gate=50.0):
    """Per true path, the error of the nearest estimate in CRLB units (nan if none within gate)."""
    e = np.full(truth.shape, np.nan)
    if not len(est):
        return e
    for l in range(truth.shape[0]):
        d = est - truth[l]
        d[:, 1:] = wrap_angle(d[:, 1:])
        z = np.sqrt(np.sum((d / crlb[l]) ** 2, axis=1))
        k = int(np.argmin(z))
        if z[k] <= gate:
            e[l] = d[k]
    return e


def _efficiency(sc, strategy, p, n, key):
    """(RMSE / sqrt(CRLB) per path and parameter, misses per path, X, cfg, threshold)."""
    alloc = allocate_for(sc, strategy, p, sc.seed, 0)
    system = sc.system(p)
    X = system.reference(alloc.q)
    est = sc.estimator
    thr = calibrate_for(sc, alloc.q, p, sc.seed, strategy, 0)
    cfg = default_config(X, thr, est.tau_max_s, est.grid_oversampling,
                         prune_ratio=10 ** (est.zeta2_db / 10), n_cd=est.n_cd, l_max=est.l_max,
                         p_fa=est.p_fa)
    ch = pos_to_channel(sc.prior_model().mean_params())
    crlb = np.sqrt(np.diag(np.linalg.inv(channel_fim(X, ch, system.noise_variance))))
    crlb = crlb.reshape(-1, 5)[:, :3]
    truth = np.column_stack([ch.delays, ch.aod, ch.aoa])
    rng = np.random.default_rng(seed_for(sc.seed, key))
    errs = []
    for _ in range(n):
        Y = synthesize_received(X, ch, system.noise_variance, rng)
        paths = adcg_run(Y, X, cfg)
        errs.append(_match(np.array([q.params() for q in paths]).reshape(-1, 3), truth, crlb))
    errs = np.array(errs)
    misses = np.isnan(errs[:, :, 0]).sum(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # a never-detected path gives nan
        ratio = np.sqrt(np.nanmean(errs ** 2, axis=0)) / crlb
    return ratio, misses, X, cfg, thr, system


def test_criterion_08_estimator_efficiency(paper_small):
    sc, p = paper_small, 10.0
    n = 50 if QUICK else 200
    # a uniform allocation illuminates every path of the scenario; the optimized ones
    # leave the weakest bounce below the detection threshold, reported for information
    strategy = "uni_0.90"
    ratio, misses, X, cfg, thr, system = _efficiency(sc, strategy, p, n, 808)
    ok_eff = misses.sum() == 0 and np.all(ratio <= 2.0)
    ratio_s, misses_s, *_ = _efficiency(sc, "subopt", p, n, 807)

    # false alarms on fresh noise-only blocks at the calibrated threshold
    corr = GridCorrelator(X, cfg)
    shape = atom(0.0, 0.0, 0.0, X).shape
    nrng = np.random.default_rng(seed_for(sc.seed, 809))
    nv = system.noise_variance
    m = 500 if QUICK else 2000
    fa = np.mean([corr.max_score(np.sqrt(nv / 2) * (nrng.standard_normal(shape)
                                                      + 1j * nrng.standard_normal(shape))) > thr
                  for _ in range(m)])
    ok_fa = abs(fa - 0.05) <= 0.02
    record(8, "estimator efficiency", ok_eff and ok_fa,
           f"{strategy} at {p:+.0f} dBm, {n} trials; max RMSE/sqrt(CRLB) over (tau, thT, thR) "
           f"per path {np.round(ratio.max(axis=1), 3).tolist()} (<= 2), misses "
           f"{misses.tolist()}; empirical P_fa {fa:.4f} over {m} noise-only trials "
           f"(0.05 +- 0.02); info: subopt detected-path ratios "
           f"{np.round(ratio_s.max(axis=1), 3).tolist()}, misses {misses_s.tolist()}")


# ---------------------------------------------------------------- 9

def test_criterion_09_round_trip(paper_default):
    system = paper_default.system(0.0)
    X = system.reference(np.full(system.codebook.n_beams, 1 / system.codebook.n_beams))
    prior = paper_default.prior_model()
    pts = prior.sample_params(np.random.default_rng(909), 100)
    worst_m, worst_rad = 0.0, 0.0
    for nu in pts:
        nu = nu.replace(clock_offset=0.0)
        ch = pos_to_channel(nu)
        paths = [PathEstimate(t, a, b, h) for t, a, b, h in
                 zip(ch.delays, ch.aod, ch.aoa, ch.gains)]
        fix = locate_from_paths(paths, X, paper_default.clock_std)
        # fix.paths maps output order back to input order
        scat_true = np.array([nu.scatterers[i - 1] for i in fix.paths[1:]]).reshape(-1, 2)
        worst_m = max(worst_m, fix.error(nu.rx_position),
                      float(np.abs(fix.scatterers - scat_true).max(initial=0.0)))
        worst_rad = max(worst_rad, abs(float(wrap_angle(fix.rx_orientation - nu.rx_orientation))))
    record(9, "pipeline round trip", worst_m < 1e-6 and worst_rad < 1e-8,
           f"100 geometries; max position error {worst_m:.2e} m (< 1e-6), orientation "
           f"{worst_rad:.2e} rad (< 1e-8)")


# ---------------------------------------------------------------- 10

def test_criterion_10_manifest_determinism(tmp_path):
    mu, C = indoor_prior_arrays()
    sc = Scenario.model_validate({
        "name": "determinism", "seed": 1010, "n_tx": 8, "n_rx": 4, "n_subcarriers": 16,
        "n_symbols": 4, "prior": {"mean": mu.tolist(), "cov": C.tolist()},
        "strategies": ["subopt", "uni_0.90"], "power_sweep_dbm": [0.0, 10.0],
        "clock_sweep_units": [1e-3, 1.0], "qlos_n_rx": [4], "espeb_samples": 4,
        "strategy_params": {"n_samples_full": 9, "n_samples_reduced": 9, "n_theta": 5},
        "estimator": {"calibration_trials": 200, "tau_max_s": 100e-9}})
    same = {}
    for exp in ("rmse", "cdf", "qlos"):
        first = tmp_path / exp / "first"
        m = emit(run_experiment(sc, exp, 4, sc.seed, sc.strategies), first,
                 make_manifest(sc, exp, sc.seed, 4, sc.strategies), plots=False)
        again = rerun_from_manifest(first / "manifest.json", tmp_path / exp / "again", threads=2)
        same[exp] = m["outputs"] == again["outputs"] and all(
            (first / f).read_bytes() == (tmp_path / exp / "again" / f).read_bytes()
            for f in m["outputs"])
    record(10, "manifest determinism", all(same.values()),
           "byte-identical CSVs on rerun (2 workers): "
           + ", ".join(f"{k} {v}" for k, v in same.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
