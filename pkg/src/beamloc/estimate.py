"""Gridless channel-parameter estimation (sparse recovery with local refinement).

The loss is ``Lambda = 0.5 * ||Y - sum_l h_l C(tau_l, thT_l, thR_l)||_F^2`` with an
L1 penalty ``chi * sum_l |h_l|`` on the gains. New paths are detected on a
discrete grid, then gains, support and continuous parameters are refined in
alternation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .geometry import steering_vector, wrap_angle
from .waveform import ReferenceSignal, atom, atom_with_derivatives, tx_excitation

log = logging.getLogger(__name__)

LASSO_MAX_ITER = 5000
LASSO_RTOL = 1e-10
MAX_HALVINGS = 4


@dataclass(frozen=True)
class PathEstimate:
    delay: float
    aod: float
    aoa: float
    gain: complex = 0j

    def params(self):
        return self.delay, self.aod, self.aoa


@dataclass(frozen=True)
class AdcgConfig:
    n_delay: int
    n_aod: int
    n_aoa: int
    tau_max: float
    threshold: float
    l1_weight: float
    prune_ratio: float = 10 ** (-3.5)
    n_cd: int = 3
    l_max: int = 10
    p_fa: float = 0.05
    aod_range: tuple = (-np.pi / 2, np.pi / 2)

    def __post_init__(self):
        if min(self.n_delay, self.n_aod, self.n_aoa) < 2:
            raise ValueError("grid sizes must be at least 2")
        if self.tau_max <= 0 or self.threshold < 0 or self.l1_weight < 0:
            raise ValueError("tau_max must be positive, threshold and l1_weight non-negative")
        if not 0 < self.prune_ratio < 1 or self.l_max < 1 or self.n_cd < 1:
            raise ValueError("need 0 < prune_ratio < 1, l_max >= 1, n_cd >= 1")

    @property
    def delay_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.tau_max, self.n_delay)

    @property
    def aod_grid(self) -> np.ndarray:
        lo, hi = self.aod_range
        return np.linspace(lo, hi, self.n_aod, endpoint=False)

    @property
    def aoa_grid(self) -> np.ndarray:
        return np.linspace(-np.pi, np.pi, self.n_aoa, endpoint=False)

    @property
    def bins(self) -> np.ndarray:
        """Grid spacing of (tau, theta_T, theta_R)."""
        lo, hi = self.aod_range
        return np.array([self.tau_max / (self.n_delay - 1), (hi - lo) / self.n_aod,
                         2 * np.pi / self.n_aoa])


def default_l1_weight(noise_var, n_tx, n_rx, n_pilots, n_symbols, p_re):
    """chi = sigma sqrt(2 (N_T + N_R) |P| N_B P_RE / N_T)."""
    return float(np.sqrt(noise_var * 2 * (n_tx + n_rx) * n_pilots * n_symbols * p_re / n_tx))


def default_config(X: ReferenceSignal, threshold: float, tau_max: float = 450e-9,
                   oversampling: int = 2, **kw) -> AdcgConfig:
    """Grid sizes N_tau = 2 N_P, N_thT = 2 N_T, N_thR = 2 N_R and the default chi."""
    s = X.system
    NP, NB = X.grid.n_subcarriers, X.grid.n_symbols
    NT, NR = s.tx_array.n_elements, s.rx_array.n_elements
    chi = kw.pop("l1_weight", None)
    if chi is None:
        chi = default_l1_weight(s.noise_variance, NT, NR, NP, NB, s.power_per_re)
    return AdcgConfig(oversampling * NP, oversampling * NT, oversampling * NR, tau_max,
                      threshold, chi, **kw)


# ---------------------------------------------------------------- detection

class GridCorrelator:
    """Evaluates |trace(R^H C(tau, thT, thR))| on the whole grid at once.

    Antenna sums are contracted first, then the delay axis is a matrix
    product with the (N_P, N_tau) phase matrix, so no atom is formed.
    """

    def __init__(self, X: ReferenceSignal, config: AdcgConfig):
        s = X.system
        self.config = config
        self.tau = config.delay_grid
        self.aod = config.aod_grid
        self.aoa = config.aoa_grid
        self.aR = steering_vector(s.rx_array, self.aoa)            # (NthR, N_R)
        self.v = tx_excitation(X, self.aod)                         # (NthT, N_B, N_P)
        self.phase = np.exp(-1j * np.outer(X.grid.omegas, self.tau))  # (N_P, Ntau)
        self.shape = (X.grid.n_symbols, s.rx_array.n_elements, X.grid.n_subcarriers)

    def scores(self, R) -> np.ndarray:
        """Correlation magnitudes, shape (N_thR, N_thT, N_tau)."""
        R3 = np.asarray(R).reshape(self.shape)
        U = np.einsum("bip,ri->rbp", R3.conj(), self.aR)
        W = np.einsum("rbp,tbp->rtp", U, self.v)
        return np.abs(W @ self.phase)

    def detect(self, R):
        """(tau, thT, thR, score) of the grid maximum."""
        S = self.scores(R)
        r, t, k = np.unravel_index(np.argmax(S), S.shape)
        return self.tau[k], self.aod[t], self.aoa[r], float(S[r, t, k])

    def max_score(self, R) -> float:
        return float(self.scores(R).max())


def correlate(R, tau, aod, aoa, X: ReferenceSignal) -> float:
    """|trace(R^H C(tau, thT, thR))|."""
    return float(abs(np.vdot(np.asarray(R).ravel(), atom(tau, aod, aoa, X).ravel())))


def calibrate_threshold(X: ReferenceSignal, noise_var: float, p_fa: float, n_trials: int,
                        rng: np.random.Generator, config: AdcgConfig) -> float:
    """(1 - p_fa)-quantile of the grid-max statistic on noise-only observations."""
    if n_trials < 200:
        raise ValueError("n_trials must be >= 200")
    corr = GridCorrelator(X, config)
    shape = (X.grid.n_symbols * X.system.rx_array.n_elements, X.grid.n_subcarriers)
    stats = np.empty(n_trials)
    for i in range(n_trials):
        N = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        stats[i] = corr.max_score(np.sqrt(noise_var / 2) * N)
    return float(np.quantile(stats, 1.0 - p_fa))


# ---------------------------------------------------------------- gains

class LassoError(RuntimeError):
    def __init__(self, residual: float):
        super().__init__(f"gain update did not converge (last relative change {residual:.3g})")
        self.residual = residual


def _soft(h, t):
    mag = np.abs(h)
    return np.where(mag > t, h * (1 - t / np.maximum(mag, 1e-300)), 0)


def lasso_objective(G, b, yy, h, chi) -> float:
    """0.5||y - C h||^2 + chi ||h||_1 from the Gram form."""
    return float(0.5 * yy - np.real(np.vdot(b, h)) + 0.5 * np.real(np.vdot(h, G @ h))
                 + chi * np.sum(np.abs(h)))


def gain_lasso(atoms, Y, chi: float, h0=None):
    """Complex L1-regularized least squares over the gains of fixed atoms.

    Monotone accelerated proximal gradient on the Gram form; stops when the
    objective changes by less than 1e-10 relative. Returns (h, objective).
    """
    Cm = np.stack([np.asarray(C).ravel() for C in atoms], axis=1)
    y = np.asarray(Y).ravel()
    G = Cm.conj().T @ Cm
    b = Cm.conj().T @ y
    yy = float(np.real(np.vdot(y, y)))
    Lf = float(np.linalg.eigvalsh(G)[-1])
    if Lf <= 0:
        return np.zeros(Cm.shape[1], complex), 0.5 * yy
    h = np.zeros(Cm.shape[1], complex) if h0 is None else np.asarray(h0, complex).copy()
    f = lasso_objective(G, b, yy, h, chi)
    # objective is evaluated in Gram form, so it carries roundoff of order eps * ||y||^2
    floor = 1e-6 * yy
    w, t = h.copy(), 1.0
    change = np.inf
    for _ in range(LASSO_MAX_ITER):
        cand = _soft(w - (G @ w - b) / Lf, chi / Lf)
        fc = lasso_objective(G, b, yy, cand, chi)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if fc <= f:
            w = cand + ((t - 1) / t_new) * (cand - h)
            h_new, f_new = cand, fc
        else:
            # monotone variant: keep the previous point, momentum toward the candidate
            w = h + (t / t_new) * (cand - h)
            h_new, f_new = h, f
        t = t_new
        scale = max(abs(f_new), floor, 1e-300)
        change = (f - f_new) / scale
        h, f = h_new, f_new
        if 0 <= change < LASSO_RTOL and fc <= f + LASSO_RTOL * scale:
            # confirm with a plain proximal step from the current point
            plain = _soft(h - (G @ h - b) / Lf, chi / Lf)
            fp = lasso_objective(G, b, yy, plain, chi)
            if f - fp <= LASSO_RTOL * max(abs(f), floor, 1e-300):
                return h, f
            h, f, w, t = plain, fp, plain.copy(), 1.0
    raise LassoError(change)


def prune(paths, ratio: float):
    """Drop paths with |h|^2 < ratio * max |h|^2 (order preserved)."""
    if not paths:
        return []
    g2 = np.array([abs(p.gain) ** 2 for p in paths])
    keep = g2 >= ratio * g2.max()
    if g2.max() == 0:
        return []
    return [p for p, k in zip(paths, keep) if k]


# ---------------------------------------------------------------- local descent

def _atom3(p, X):
    return atom(p.delay, p.aod, p.aoa, X).reshape(X.grid.n_symbols, -1, X.grid.n_subcarriers)


def loss(Y, paths, X) -> float:
    """Lambda = 0.5 ||Y - sum h C||_F^2."""
    R = np.asarray(Y).reshape(X.grid.n_symbols, -1, X.grid.n_subcarriers).copy()
    for p in paths:
        R -= p.gain * _atom3(p, X)
    return 0.5 * float(np.real(np.vdot(R, R)))


def loss_derivatives(R, path: PathEstimate, X, k: int):
    """First and second derivative of Lambda along parameter k of one path.

    R is the residual including this path, layout (N_B, N_R, N_P).
    """
    _, dC, d2C = atom_with_derivatives(path.delay, path.aod, path.aoa, X)
    h = path.gain
    g = -np.real(h * np.vdot(R, dC[k]))
    H = abs(h) ** 2 * np.real(np.vdot(dC[k], dC[k])) - np.real(h * np.vdot(R, d2C[k]))
    return float(g), float(H)


def _with_param(p: PathEstimate, k: int, value: float) -> PathEstimate:
    if k == 0:
        return replace(p, delay=value)
    if k == 1:
        return replace(p, aod=float(wrap_angle(value)))
    return replace(p, aoa=float(wrap_angle(value)))


def single_gain(a, n, chi):
    """argmin_h 0.5||r - h C||^2 + chi |h| given a = C^H r and n = ||C||^2."""
    s = abs(a)
    return 0j if s <= chi else complex(a * (1 - chi / s) / n)


def profiled_derivatives(r, path: PathEstimate, X, k: int, chi: float):
    """Derivatives along parameter k of min_h [0.5||r - h C||^2 + chi |h|].

    r is the residual with this path removed, layout (N_B, N_R, N_P). The
    profiled value is 0.5||r||^2 - 0.5 (|C^H r| - chi)_+^2 / ||C||^2; returns
    (g, H), both zero inside the soft-threshold dead zone.
    """
    C, dC, d2C = atom_with_derivatives(path.delay, path.aod, path.aoa, X)
    a = np.vdot(C, r)
    a1 = np.vdot(dC[k], r)
    a2 = np.vdot(d2C[k], r)
    n = np.real(np.vdot(C, C))
    n1 = 2 * np.real(np.vdot(C, dC[k]))
    n2 = 2 * (np.real(np.vdot(dC[k], dC[k])) + np.real(np.vdot(C, d2C[k])))
    s = abs(a)
    e = s - chi
    if e <= 0 or s == 0:
        return 0.0, 0.0
    re1 = np.real(np.conj(a) * a1)
    s1 = re1 / s
    s2 = (abs(a1) ** 2 + np.real(np.conj(a) * a2)) / s - re1**2 / s**3
    g = -e * s1 / n + 0.5 * e * e * n1 / n**2
    H = (-(s1 * s1 + e * s2) / n + 2 * e * s1 * n1 / n**2 + 0.5 * e * e * n2 / n**2
         - e * e * n1 * n1 / n**3)
    return float(g), float(H)


def local_descent(paths, Y, X, caps, tau_max: float | None = None, chi: float = 0.0):
    """One sweep of safeguarded truncated Newton steps over every path and parameter.

    Each step works on the loss with the moving path's gain profiled out: the
    step magnitude is min(|g/H|, cap_k) (the cap if H <= 0) and an accepted
    step also sets that gain to its single-path L1 minimizer. A step is kept
    only if Lambda + chi |h| decreases; otherwise it is halved up to four
    times and then skipped. Returns (paths, Lambda).
    """
    paths = list(paths)
    shape = (X.grid.n_symbols, -1, X.grid.n_subcarriers)
    R = np.asarray(Y).reshape(shape).copy()
    atoms = [_atom3(p, X) for p in paths]
    for p, C in zip(paths, atoms):
        R -= p.gain * C
    for l in range(len(paths)):
        for k in range(3):
            p = paths[l]
            r = R + p.gain * atoms[l]
            cur = 0.5 * float(np.real(np.vdot(R, R))) + chi * abs(p.gain)
            g, H = profiled_derivatives(r, p, X, k, chi)
            if g == 0:
                continue
            step = caps[k] if H <= 0 else min(abs(g / H), caps[k])
            x0 = p.params()[k]
            for _ in range(MAX_HALVINGS + 1):
                x1 = x0 - np.sign(g) * step
                if k == 0 and tau_max is not None:
                    x1 = min(max(x1, 0.0), tau_max)
                C1 = _atom3(_with_param(p, k, x1), X)
                h1 = single_gain(np.vdot(C1, r), np.real(np.vdot(C1, C1)), chi)
                R1 = r - h1 * C1
                new = 0.5 * float(np.real(np.vdot(R1, R1))) + chi * abs(h1)
                if new < cur:
                    paths[l] = replace(_with_param(p, k, x1), gain=h1)
                    atoms[l], R = C1, R1
                    break
                step *= 0.5
    return paths, 0.5 * float(np.real(np.vdot(R, R)))


# ---------------------------------------------------------------- main loop

def _update_gains(paths, Y, X, chi):
    if not paths:
        return []
    atoms = [atom(p.delay, p.aod, p.aoa, X) for p in paths]
    h, _ = gain_lasso(atoms, Y, chi, [p.gain for p in paths])
    return [replace(p, gain=complex(hl)) for p, hl in zip(paths, h)]


def adcg_run(Y, X: ReferenceSignal, config: AdcgConfig, correlator: GridCorrelator | None = None):
    """Detect paths until the best new score drops to the threshold or L_max iterations."""
    corr = GridCorrelator(X, config) if correlator is None else correlator
    caps = 0.5 * config.bins
    paths: list[PathEstimate] = []
    Y = np.asarray(Y)
    shape = Y.shape
    for _ in range(config.l_max):
        R = Y.copy()
        for p in paths:
            R -= p.gain * atom(p.delay, p.aod, p.aoa, X)
        tau, tt, tr, score = corr.detect(R)
        if score <= config.threshold:
            break
        paths.append(PathEstimate(float(tau), float(tt), float(tr), 0j))
        for _ in range(config.n_cd):
            paths = _update_gains(paths, Y, X, config.l1_weight)
            paths = prune(paths, config.prune_ratio)
            if not paths:
                break
            paths, _ = local_descent(paths, Y.reshape(shape), X, caps, config.tau_max,
                                      config.l1_weight)
    paths = prune(_update_gains(paths, Y, X, config.l1_weight), config.prune_ratio)
    return paths
