"""Mapping estimated path parameters to receiver position, orientation and clock offset.

Pipeline: pick the strongest path as LOS, drop NLOS paths that cannot form a
Tx-Rx-scatterer triangle or imply an implausible clock offset, build a
closed-form starting point, then refine by weighted least squares
(Levenberg-Marquardt) with the channel-parameter FIM as weight and a Gaussian
clock prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .estimate import AdcgConfig, PathEstimate, adcg_run
from .fisher import channel_fim, marginalize_gains
from .geometry import (SPEED_OF_LIGHT, ChannelParams, GeometryError, PositionParams,
                       geometric_columns, pos_to_channel, pos_to_channel_jacobian, unit,
                       wrap_angle)
from .waveform import ReferenceSignal

log = logging.getLogger(__name__)

DENOM_TOL = 1e-12
MAX_DAMPING = 1e12


class NoDetectionError(RuntimeError):
    def __init__(self):
        super().__init__("no detection")


class LmDivergence(RuntimeError):
    """LM could not decrease the cost even at maximum damping."""

    def __init__(self, best: "PositionFix"):
        super().__init__(f"Levenberg-Marquardt diverged (best cost {best.cost:.6g})")
        self.best = best


@dataclass(frozen=True)
class LocateConfig:
    zeta3a: float = 1e-4
    zeta3b: float = 1e-2
    max_iter: int = 100
    grad_tol: float = 1e-8
    damping0: float = 1e-3


@dataclass(frozen=True)
class PositionFix:
    rx_position: np.ndarray
    rx_orientation: float
    clock_offset: float
    scatterers: np.ndarray
    paths: tuple  # indices into the input path list, LOS first
    iterations: int = 0
    cost: float = 0.0
    converged: bool = True
    los_only: bool = False
    position_std: float = np.nan  # sqrt of the local position-error bound, m
    extra: dict = field(default_factory=dict)

    def error(self, rx_position) -> float:
        return float(np.linalg.norm(self.rx_position - np.asarray(rx_position)))


# ---------------------------------------------------------------- filters

def select_los(paths):
    """Reorder so the path with the largest |h| comes first; returns (paths, order)."""
    if not paths:
        raise ValueError("select_los needs at least one path")
    k = int(np.argmax([abs(p.gain) for p in paths]))
    order = [k] + [i for i in range(len(paths)) if i != k]
    return [paths[i] for i in order], order


def angle_offsets(paths):
    """(d theta_T, d theta_R) of each NLOS path relative to path 0, wrapped."""
    t0, r0 = paths[0].aod, paths[0].aoa
    dT = wrap_angle(np.array([p.aod - t0 for p in paths[1:]]))
    dR = wrap_angle(np.array([p.aoa - r0 for p in paths[1:]]))
    return dT, dR


def triangle_mask(paths) -> np.ndarray:
    """Boolean keep-mask over all paths (LOS always kept)."""
    dT, dR = angle_offsets(paths)
    return np.r_[True, dT * dR < 0]


def triangle_filter(paths):
    m = triangle_mask(paths)
    return [p for p, k in zip(paths, m) if k]


def clock_from_path(tau0, tau_l, dT, dR):
    """Clock offset implied by one NLOS path and the LOS; None if uninformative."""
    s = np.sin(dR - dT)
    t = np.sin(dR) - np.sin(dT)
    den = s - t
    if abs(den) <= DENOM_TOL:
        return None
    return float((tau_l * s - tau0 * t) / den)


def path_clocks(paths):
    dT, dR = angle_offsets(paths)
    return [clock_from_path(paths[0].delay, p.delay, a, b)
            for p, a, b in zip(paths[1:], dT, dR)]


def clock_density(eps, clock_std):
    """Standard normal density of eps / clock_std (dimensionless)."""
    z = np.asarray(eps, dtype=float) / clock_std
    return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)


def clock_consistency_mask(paths, clock_std, zeta3a=1e-4, zeta3b=1e-2) -> np.ndarray:
    """Keep-mask dropping NLOS paths whose implied clock offset is improbable.

    Uninformative paths (no clock estimate) are kept.
    """
    eps = path_clocks(paths)
    dens = np.array([np.nan if e is None else clock_density(e, clock_std) for e in eps])
    keep = np.ones(len(paths), bool)
    if np.all(np.isnan(dens)):
        return keep
    pmax = np.nanmax(dens)
    for i, d in enumerate(dens):
        if not np.isnan(d) and (d < zeta3a or d < zeta3b * pmax):
            keep[i + 1] = False
    return keep


def clock_consistency_filter(paths, clock_std, zeta3a=1e-4, zeta3b=1e-2):
    m = clock_consistency_mask(paths, clock_std, zeta3a, zeta3b)
    return [p for p, k in zip(paths, m) if k]


# ---------------------------------------------------------------- starting point

def _scatterer_guess(p_r, alpha, aod, aoa):
    phi = aoa + alpha
    den = np.tan(phi) * np.cos(aod) - np.sin(aod)
    if abs(np.cos(phi)) > 1e-6 and abs(den) > 1e-9:
        r = (np.tan(phi) * p_r[0] - p_r[1]) / den
        return r * unit(aod)
    # same point as the intersection of the Tx ray and the Rx ray
    A = np.column_stack([unit(aod), -unit(phi)])
    try:
        r, _ = np.linalg.solve(A, p_r)
    except np.linalg.LinAlgError:
        raise GeometryError("Tx and Rx rays of an NLOS path are parallel") from None
    return r * unit(aod)


def initial_guess(paths) -> PositionParams:
    """Closed-form start from the LOS and the NLOS clock estimates."""
    los = paths[0]
    eps = path_clocks(paths)
    w = np.array([abs(p.gain) ** 2 for p, e in zip(paths[1:], eps) if e is not None])
    e = np.array([e for e in eps if e is not None])
    eps0 = float(np.sum(w * e) / np.sum(w)) if w.size and np.sum(w) > 0 else 0.0
    p_r = SPEED_OF_LIGHT * (los.delay - eps0) * unit(los.aod)
    alpha = float(wrap_angle(los.aod + np.pi - los.aoa))
    scat = np.array([_scatterer_guess(p_r, alpha, p.aod, p.aoa) for p in paths[1:]]).reshape(-1, 2)
    gains = np.array([p.gain for p in paths])
    return PositionParams(p_r, alpha, eps0, gains, scat)


# ---------------------------------------------------------------- EXIP refinement

def exip_weight(X: ReferenceSignal, paths, noise_var: float) -> np.ndarray:
    """Gain-marginalized channel FIM (3L x 3L) evaluated at the estimates."""
    ch = ChannelParams([p.delay for p in paths], [p.aod for p in paths],
                       [p.aoa for p in paths], [p.gain for p in paths])
    return marginalize_gains(channel_fim(X, ch, noise_var))


def _psd_sqrt(J):
    w, V = np.linalg.eigh(0.5 * (J + J.T))
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def _geo_to_params(z, gains) -> PositionParams:
    L = gains.size
    return PositionParams(z[0:2], z[2], z[3], gains, z[4:].reshape(L - 1, 2))


def exip_refine(nu0: PositionParams, measured, J, clock_std: float,
                config: LocateConfig = LocateConfig(), fix_clock: bool = False) -> PositionFix:
    """Minimize (m - f(nu))^T J (m - f(nu)) + (eps / clock_std)^2 over the geometry.

    ``measured`` is the stacked (tau, theta_T, theta_R) vector, J its weight.
    With ``fix_clock`` the clock offset is held at nu0's value and the prior
    term drops out. Convergence is declared when the Jacobi-scaled gradient
    norm falls below ``config.grad_tol``.
    """
    gains = nu0.gains
    L = gains.size
    m = np.asarray(measured, dtype=float)
    S = _psd_sqrt(np.asarray(J, dtype=float))
    cols = geometric_columns(L)
    free = np.ones(cols.size, bool)
    if fix_clock:
        free[3] = False
    angle_rows = np.array([i % 3 != 0 for i in range(3 * L)])

    def residual(z):
        ch = pos_to_channel(_geo_to_params(z, gains))
        d = m - ch.vector()
        d[angle_rows] = wrap_angle(d[angle_rows])
        r = S @ d
        if not fix_clock:
            r = np.r_[r, z[3] / clock_std]
        return r

    def jacobian(z):
        Jf = pos_to_channel_jacobian(_geo_to_params(z, gains))[:, cols][:, free]
        A = -S @ Jf
        if not fix_clock:
            prior = np.zeros(free.sum())
            prior[3] = 1.0 / clock_std
            A = np.vstack([A, prior])
        return A

    z = nu0.to_vector()[cols]
    r = residual(z)
    cost = float(r @ r)
    mu = config.damping0
    it = 0
    converged = False
    A = jacobian(z)
    while it < config.max_iter:
        g = A.T @ r
        H = A.T @ A
        dg = np.sqrt(np.maximum(np.diag(H), 1e-300))
        if np.linalg.norm(g / dg) < config.grad_tol:
            converged = True
            break
        accepted = False
        while mu <= MAX_DAMPING:
            try:
                step = np.linalg.solve(H + mu * np.diag(np.diag(H)), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            zn = z.copy()
            zn[free] += step
            zn[2] = wrap_angle(zn[2])
            try:
                rn = residual(zn)
            except GeometryError:
                mu *= 10
                continue
            cn = float(rn @ rn)
            if cn < cost:
                z, r, cost = zn, rn, cn
                mu = max(mu / 10, 1e-15)
                accepted = True
                break
            mu *= 10
        it += 1
        if not accepted:
            # stationary to machine precision if the undamped model predicts no gain
            try:
                gn = np.linalg.lstsq(A, -r, rcond=None)[0]
            except np.linalg.LinAlgError:
                gn = np.zeros_like(g)
            predicted = -(2 * g @ gn + gn @ H @ gn)
            best = _make_fix(z, gains, cost, it, False, A, fix_clock, clock_std)
            if predicted <= 1e-12 * max(cost, 1e-300):
                converged = True
                break
            raise LmDivergence(best)
        A = jacobian(z)
    return _make_fix(z, gains, cost, it, converged, A, fix_clock, clock_std)


def _make_fix(z, gains, cost, it, converged, A, fix_clock, clock_std) -> PositionFix:
    L = gains.size
    H = A.T @ A
    try:
        d = np.sqrt(np.maximum(np.diag(H), 1e-300))
        cov = np.linalg.inv(H / np.outer(d, d)) / np.outer(d, d)
        pos_var = float(cov[0, 0] + cov[1, 1])
    except np.linalg.LinAlgError:
        pos_var = np.inf
    if fix_clock:
        pos_var += (SPEED_OF_LIGHT * clock_std) ** 2
    return PositionFix(np.array(z[0:2]), float(wrap_angle(z[2])), float(z[3]),
                       np.array(z[4:]).reshape(L - 1, 2), tuple(range(L)), it, cost,
                       converged, fix_clock, float(np.sqrt(max(pos_var, 0.0))))


def locate_from_paths(paths, X: ReferenceSignal, clock_std: float, noise_var: float | None = None,
                      config: LocateConfig = LocateConfig(), J=None) -> PositionFix:
    """Filters, starting point and EXIP refinement on given path estimates."""
    if not paths:
        raise NoDetectionError()
    ordered, order = select_los(list(paths))
    idx = np.array(order)
    m1 = triangle_mask(ordered)
    ordered, idx = [p for p, k in zip(ordered, m1) if k], idx[m1]
    m2 = clock_consistency_mask(ordered, clock_std, config.zeta3a, config.zeta3b)
    ordered, idx = [p for p, k in zip(ordered, m2) if k], idx[m2]
    if J is None:
        nv = X.system.noise_variance if noise_var is None else noise_var
        J = exip_weight(X, ordered, nv)
    nu0 = initial_guess(ordered)
    measured = np.column_stack([[p.delay for p in ordered], [p.aod for p in ordered],
                                [p.aoa for p in ordered]]).ravel()
    los_only = len(ordered) == 1
    try:
        fix = exip_refine(nu0, measured, J, clock_std, config, fix_clock=los_only)
    except LmDivergence as exc:
        log.warning("%s; returning best iterate", exc)
        fix = exc.best
    return PositionFix(fix.rx_position, fix.rx_orientation, fix.clock_offset, fix.scatterers,
                       tuple(int(i) for i in idx), fix.iterations, fix.cost, fix.converged,
                       los_only, fix.position_std)


def locate(Y, X: ReferenceSignal, config: AdcgConfig, clock_std: float,
           locate_config: LocateConfig = LocateConfig(), noise_var: float | None = None) -> PositionFix:
    """Full two-stage estimate from a received block."""
    paths = adcg_run(Y, X, config)
    fix = locate_from_paths(paths, X, clock_std, noise_var, locate_config)
    fix.extra["paths"] = paths
    return fix
