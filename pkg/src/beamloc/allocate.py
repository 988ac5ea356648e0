"""Beam power allocation strategies.

Every optimized strategy minimizes a weighted sum of SPEBs over a set of
parameter points through the epigraph SDP

    min  sum_j p_j trace(B_j)   s.t.  [[B_j, E^T], [E, J_j(q)]] >= 0,
         q >= 0, 1^T q <= 1   (+ optional power-ratio rows)

and differs only in how the points, weights and per-point FIMs are built.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import special

from . import sdp
from .fisher import (SingularFimError, beam_channel_fims, beam_position_fims,
                     channel_to_position_transform, gain_moment_matrix, prior_fim, speb)
from .geometry import (SPEED_OF_LIGHT, GeometryError, PositionParams, path_lengths,
                       pos_to_channel, steering_vector, unit, wrap_angle)
from .waveform import OfdmSystem

log = logging.getLogger(__name__)

DB_TO_NEPER_AMP = np.log(10.0) / 20.0
DB_TO_NEPER_POW = np.log(10.0) / 10.0


# ------------------------------------------------------------------ prior model

@dataclass(frozen=True)
class PriorModel:
    """Gaussian prior over (p_R, p_s1, rho_1, ..., p_s(L-1), rho_(L-1)).

    Reflection coefficients rho_l are in dB. Gain magnitudes follow free-space
    loss: |h_0| = c / (4 pi f_c d_0), |h_l| = sqrt(rho_l) c / (4 pi f_c d_l) with
    d_l the bounce path length.
    """

    mean: np.ndarray
    cov: np.ndarray
    carrier_frequency: float
    clock_std: float
    rx_orientation: float = 0.0

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        C = np.asarray(self.cov, dtype=float)
        if (mu.size - 2) % 3:
            raise ValueError("mean must have length 2 + 3(L-1)")
        if C.shape != (mu.size, mu.size):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(C, C.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh(C)
        if w[0] < -1e-9 * max(1.0, w[-1]):
            raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {w[0]:.3g})")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", 0.5 * (C + C.T))

    @property
    def n_paths(self) -> int:
        return (self.mean.size - 2) // 3 + 1

    def position_index(self, l: int) -> np.ndarray:
        return np.array([0, 1]) if l == 0 else 2 + 3 * (l - 1) + np.array([0, 1])

    def rho_index(self, l: int) -> int:
        if l < 1:
            raise ValueError("the LOS path has no reflection coefficient")
        return 2 + 3 * (l - 1) + 2

    @property
    def position_indices(self) -> np.ndarray:
        return np.concatenate([self.position_index(l) for l in range(self.n_paths)])

    def marginal(self, l: int):
        """Mean and covariance of the 2D position of path l (p_R for l = 0)."""
        i = self.position_index(l)
        return self.mean[i], self.cov[np.ix_(i, i)]

    def rho_moments(self, l: int):
        """(E[sqrt(rho)], E[rho]) for the lognormal reflection coefficient."""
        k = self.rho_index(l)
        m, v = self.mean[k], self.cov[k, k]
        return (np.exp(DB_TO_NEPER_AMP * m + 0.5 * DB_TO_NEPER_AMP**2 * v),
                np.exp(DB_TO_NEPER_POW * m + 0.5 * DB_TO_NEPER_POW**2 * v))

    def free_space_amplitude(self, length):
        return SPEED_OF_LIGHT / (4 * np.pi * self.carrier_frequency * np.asarray(length))

    def to_params(self, row, clock_offset: float = 0.0, phases=None) -> PositionParams:
        """Position parameters for one prior row (rho read from the row)."""
        row = np.asarray(row, dtype=float)
        L = self.n_paths
        scat = np.array([row[self.position_index(l)] for l in range(1, L)]).reshape(-1, 2)
        lengths = path_lengths(PositionParams(row[:2], 0.0, 0.0, np.ones(L), scat))
        amp = self.free_space_amplitude(lengths)
        for l in range(1, L):
            amp[l] *= 10.0 ** (row[self.rho_index(l)] / 20.0)
        ph = np.zeros(L) if phases is None else np.asarray(phases, dtype=float)
        return PositionParams(row[:2], self.rx_orientation, clock_offset, amp * np.exp(1j * ph), scat)

    def sample(self, rng: np.random.Generator, n: int, positions_only: bool = False) -> np.ndarray:
        """Draw n prior rows; with `positions_only` rho is drawn at its mean."""
        if positions_only:
            idx = self.position_indices
            out = np.tile(self.mean, (n, 1))
            out[:, idx] = rng.multivariate_normal(self.mean[idx], self.cov[np.ix_(idx, idx)],
                                                  size=n, method="eigh")
            return out
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")

    def sample_params(self, rng, n: int, positions_only: bool = False) -> list:
        """n non-degenerate PositionParams drawn from the prior (degenerate draws redrawn)."""
        out, bad = [], 0
        while len(out) < n:
            for row in self.sample(rng, n - len(out), positions_only):
                try:
                    nu = self.to_params(row)
                    pos_to_channel(nu)
                except GeometryError:
                    bad += 1
                    continue
                out.append(nu)
        if bad:
            log.info("redrew %d degenerate prior samples", bad)
        return out

    def gain_moments(self, nu: PositionParams):
        """(E|h_l|, E|h_l|^2) given the positions in `nu` (rho averaged out)."""
        amp = self.free_space_amplitude(path_lengths(nu))
        m, m2 = amp.copy(), amp**2
        for l in range(1, self.n_paths):
            e1, e2 = self.rho_moments(l)
            m[l] *= e1
            m2[l] *= e2
        return m, m2

    def mean_params(self) -> PositionParams:
        return self.to_params(self.mean)

    def conditional_mean(self, rx_position) -> np.ndarray:
        """E[row | p_R] for the Gaussian prior."""
        i = np.array([0, 1])
        r = np.arange(2, self.mean.size)
        Crr = self.cov[np.ix_(i, i)]
        out = self.mean.copy()
        out[:2] = rx_position
        delta = np.asarray(rx_position, dtype=float) - self.mean[:2]
        out[r] += self.cov[np.ix_(r, i)] @ np.linalg.lstsq(Crr, delta, rcond=None)[0]
        return out


def gauss_cubature_2d(mean, cov, order: int = 3):
    """Tensor-product Gauss-Hermite rule for a 2D Gaussian (order 3: 9 points, degree 5)."""
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    s, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    L = V * np.sqrt(np.clip(s, 0.0, None))
    Z = np.array(np.meshgrid(z, z, indexing="ij")).reshape(2, -1).T
    W = np.outer(w, w).ravel()
    return np.asarray(mean, dtype=float) + Z @ L.T, W


# ------------------------------------------------------ AOD grids and excitation

def confidence_aod_interval(mean, cov, kappa: float):
    """Extreme AODs (seen from the origin) over the kappa-confidence ellipse."""
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")
    mu = np.asarray(mean, dtype=float)
    theta_mu = np.arctan2(mu[1], mu[0])
    s, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    L = V * np.sqrt(np.clip(s, 0.0, None))
    r = np.sqrt(-2.0 * np.log1p(-kappa))
    if np.linalg.norm(mu) <= 0:
        raise GeometryError("ellipse centred at the origin: AOD undefined")
    if np.allclose(L, 0):
        return float(theta_mu), float(theta_mu)
    # boundary x(phi) = mu + r L u(phi); extremes where cross(x, x') = 0
    cross = lambda a, b: a[0] * b[1] - a[1] * b[0]
    c0, c1 = cross(mu, L[:, 0]), cross(mu, L[:, 1])
    R = np.hypot(c0, c1)
    rhs = -r * np.linalg.det(L)
    if R <= abs(rhs) * (1 + 1e-12):
        raise GeometryError("confidence ellipse contains the origin: AOD undefined")
    delta = np.arctan2(c0, c1)
    beta = np.arccos(rhs / R)
    ang = []
    for phi in (-delta + beta, -delta - beta):
        x = mu + r * L @ np.array([np.cos(phi), np.sin(phi)])
        ang.append(wrap_angle(np.arctan2(x[1], x[0]) - theta_mu))
    return float(theta_mu + min(ang)), float(theta_mu + max(ang))


def confidence_aod_grid(prior: PriorModel, l: int, kappa: float, n_theta: int) -> np.ndarray:
    """n_theta equally spaced AODs spanning the kappa-confidence interval of path l."""
    lo, hi = confidence_aod_interval(*prior.marginal(l), kappa)
    return wrap_angle(np.linspace(lo, hi, n_theta))


def excitation_matrix(system: OfdmSystem, thetas) -> np.ndarray:
    """[A]_{m,k} = |a_T(theta_m)^T f_k|^2."""
    aT = steering_vector(system.tx_array, np.atleast_1d(thetas))
    return np.abs(aT @ system.codebook.vectors) ** 2


def best_beams(system: OfdmSystem, thetas) -> np.ndarray:
    """Strongest beam per AOD; ties go to the lowest beam index."""
    return np.argmax(excitation_matrix(system, thetas), axis=1)


# -------------------------------------------------------------------- results

@dataclass(frozen=True)
class ExcitationConstraint:
    kappa: float = 0.995
    q_th_db: float = -10.0
    n_theta: int = 15

    @property
    def q_th(self) -> float:
        return 10.0 ** (self.q_th_db / 10.0)


@dataclass
class Allocation:
    q: np.ndarray
    strategy: str
    objective: float | None = None
    status: str = "n/a"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if np.any(q < -1e-9) or q.sum() > 1 + 1e-9:
            raise ValueError("allocation violates q >= 0, sum(q) <= 1")
        self.q = np.clip(q, 0.0, None)


def write_allocation_csv(alloc: Allocation, path, metadata: dict | None = None) -> None:
    """CSV with '# key: value' header lines followed by columns beam_index,q."""
    meta = {"strategy": alloc.strategy, "objective": alloc.objective, "status": alloc.status}
    meta.update(metadata or {})
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beam_index", "q"])
        for k, qk in enumerate(alloc.q):
            w.writerow([k, repr(float(qk))])


def read_allocation_csv(path) -> tuple[np.ndarray, dict]:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif line and not line.startswith("beam_index"):
            rows.append(float(line.split(",")[1]))
    return np.array(rows), meta


# ---------------------------------------------------------- epigraph SDP core

def _ratio_rows(system, prior, con: ExcitationConstraint, paths=None):
    """(A_0, A) excitation matrices for the power-ratio constraints."""
    paths = range(prior.n_paths) if paths is None else paths
    mats = [excitation_matrix(system, confidence_aod_grid(prior, l, con.kappa, con.n_theta))
            for l in paths]
    return mats[0], np.vstack(mats)


def solve_speb_epigraph(stacks, priors, weights, Q=None, ratio=None, q_th=0.0,
                        pos_idx=(0, 1), tol: float = 1e-7, max_iter: int = 200):
    """Minimize sum_j p_j SPEB_j(q) with q = Q u via the epigraph SDP.

    stacks: per point, per-beam FIM contributions (M_T, n, n); priors: (n, n)
    constant terms. `ratio` = (A_0, A) adds A_0 q >= q_th e, A q <= e.
    Returns (q, sdp_solution, recomputed objective).
    """
    npts = len(stacks)
    M_T = stacks[0].shape[0]
    Q = np.eye(M_T) if Q is None else np.asarray(Q, dtype=float)
    m = Q.shape[1]
    p = np.asarray(weights, dtype=float)
    u_ref = np.full(m, 1.0 / Q.sum())
    q_ref = Q @ u_ref
    pos = list(pos_idx)

    coef = [np.tensordot(Q.T, S, axes=1) for S in stacks]
    n_aux = 1 if ratio is not None else 0
    nvar = m + 3 * npts + n_aux
    c = np.zeros(nvar)
    blocks = []
    Jrefs = [P + np.tensordot(q_ref, S, axes=1) for P, S in zip(priors, stacks)]
    obj_ref = sum(pj * speb(J, pos_idx).speb for pj, J in zip(p, Jrefs))
    for j in range(npts):
        n = priors[j].shape[0]
        T = _node_transform(Jrefs[j])
        # B_j is represented as gamma * B' with B' ~ I at the reference allocation
        gamma = 0.5 * speb(Jrefs[j], pos_idx).speb
        E = T.T[:, pos] / np.sqrt(gamma)
        F0 = np.zeros((n + 2, n + 2))
        F0[2:, :2] = E
        F0[:2, 2:] = E.T
        P = T.T @ priors[j] @ T
        F0[2:, 2:] = 0.5 * (P + P.T)
        Fi = np.zeros((m + 3, n + 2, n + 2))
        C = np.einsum("ai,kab,bj->kij", T, coef[j], T)
        Fi[:m, 2:, 2:] = 0.5 * (C + C.transpose(0, 2, 1))
        Fi[m, 0, 0] = 1.0
        Fi[m + 1, 0, 1] = Fi[m + 1, 1, 0] = 1.0
        Fi[m + 2, 1, 1] = 1.0
        base = m + 3 * j
        idx = np.r_[np.arange(m), base + np.arange(3)]
        blocks.append(sdp.LmiBlock(F0, idx, Fi))
        w = p[j] * gamma / obj_ref
        c[base] = c[base + 2] = w

    G = [np.c_[-Q, np.zeros((M_T, nvar - m))], np.r_[Q.sum(axis=0), np.zeros(nvar - m)][None]]
    h = [np.zeros(M_T), np.ones(1)]
    if ratio is not None:
        A0, A = ratio
        e_col = np.zeros((A0.shape[0], 1))
        rows0 = np.c_[-(A0 @ Q), np.zeros((A0.shape[0], 3 * npts)), e_col + q_th]
        rows1 = np.c_[A @ Q, np.zeros((A.shape[0], 3 * npts)), -np.ones((A.shape[0], 1))]
        G += [rows0, rows1]
        h += [np.zeros(A0.shape[0]), np.zeros(A.shape[0])]
    prob = sdp.SdpProblem(c, blocks, np.vstack(G), np.concatenate(h))
    sol = sdp.solve(prob, tol=tol, max_iter=max_iter)
    if sol.status == sdp.INACCURATE:
        log.warning("allocation SDP stalled at relative gap %.2e; using best iterate",
                    sol.relative_gap)
    elif sol.status != sdp.OPTIMAL:
        raise sdp.SdpError(sol)
    q = Q @ sol.x[:m]
    q = np.where(np.abs(q) < 1e-12, 0.0, q)
    if q.sum() > 1:
        q = q / q.sum()
    obj = sum(p[j] * speb(priors[j] + np.tensordot(q, stacks[j], axes=1), pos_idx).speb
              for j in range(npts))
    return q, sol, float(obj)


def _node_transform(Jref):
    """T with T^T Jref T = I (Jacobi equilibration, then eigen-whitening).

    Full whitening rather than diagonal scaling: with a very loose clock prior
    the range/clock direction is pinned by the prior alone and the FIM is
    nearly singular along a direction no diagonal scaling can fix.
    """
    diag = np.diag(Jref).copy()
    diag[diag <= 0] = 1.0
    D = 1.0 / np.sqrt(diag)
    lam, V = np.linalg.eigh(D[:, None] * Jref * D[None, :])
    lam = np.maximum(lam, lam[-1] * 1e-15)
    return D[:, None] * (V / np.sqrt(lam)) @ V.T


def _finish(strategy, q, sol, obj, **diag):
    d = {"sdp_iterations": sol.iterations, "sdp_relative_gap": sol.relative_gap}
    d.update(diag)
    return Allocation(q, strategy, obj, sol.status, d)


# ------------------------------------------------------------------ strategies

def optimal_allocation(prior: PriorModel, system: OfdmSystem, n_samples: int = 121,
                       constraints: ExcitationConstraint | None = None,
                       rng=None, points=None, strategy: str | None = None) -> Allocation:
    """Sampled ESPEB minimization over the full prior (gains sampled too)."""
    rng = np.random.default_rng() if rng is None else rng
    points = prior.sample_params(rng, n_samples) if points is None else list(points)
    stacks = [beam_position_fims(system, nu) for nu in points]
    n = stacks[0].shape[1]
    priors = [prior_fim(n, prior.clock_std)] * len(points)
    ratio = None if constraints is None else _ratio_rows(system, prior, constraints)
    q_th = 0.0 if constraints is None else constraints.q_th
    q, sol, obj = solve_speb_epigraph(stacks, priors, np.full(len(points), 1 / len(points)),
                                      ratio=ratio, q_th=q_th)
    name = strategy or ("opt_constr" if constraints else "opt_unconstr")
    return _finish(name, q, sol, obj, n_points=len(points))


def reduced_allocation(prior: PriorModel, system: OfdmSystem, n_samples: int = 64,
                       constraints: ExcitationConstraint | None = ExcitationConstraint(),
                       rng=None, points=None) -> Allocation:
    """Jensen lower bound: positions sampled, FIM averaged over gain magnitudes."""
    rng = np.random.default_rng() if rng is None else rng
    if points is None:
        points = prior.sample_params(rng, n_samples, positions_only=True)
    stacks = [beam_position_fims(system, nu, prior.gain_moments(nu)) for nu in points]
    n = stacks[0].shape[1]
    priors = [prior_fim(n, prior.clock_std)] * len(points)
    ratio = None if constraints is None else _ratio_rows(system, prior, constraints)
    q_th = 0.0 if constraints is None else constraints.q_th
    q, sol, obj = solve_speb_epigraph(stacks, priors, np.full(len(points), 1 / len(points)),
                                      ratio=ratio, q_th=q_th)
    return _finish("opt_reduced", q, sol, obj, n_points=len(points))


def los_radial_moments(mean, cov, theta, order: int = 20):
    """E[d^2 | theta], E[d^4 | theta] and the angular density p(theta) of p_R.

    Along the ray u(theta) the density of d is proportional to
    d * N(d; m, 1/a) with a = u^T C^-1 u and m = u^T C^-1 mu / a.
    """
    mu = np.asarray(mean, dtype=float)
    Ci = np.linalg.inv(cov)
    u = unit(theta)
    a = u @ Ci @ u
    m = (u @ Ci @ mu) / a
    z, w = np.polynomial.hermite_e.hermegauss(order)
    d = m + z / np.sqrt(a)
    wd = w * np.clip(d, 0.0, None)
    e2 = np.sum(wd * d**2) / wd.sum()
    e4 = np.sum(wd * d**4) / wd.sum()
    # angular marginal: int_0^inf d N(d u; mu, C) dd (closed form)
    k = np.exp(-0.5 * (mu @ Ci @ mu - a * m * m)) / (2 * np.pi * np.sqrt(np.linalg.det(cov)))
    radial = (np.exp(-0.5 * a * m * m) / a
              + m * np.sqrt(np.pi / (2 * a)) * (1 + special.erf(m * np.sqrt(a / 2))))
    return e2, e4, k * radial


def los_quadrature(prior: PriorModel, kappa: float, order: int = 15, radial_order: int = 20):
    """Nodes (theta_j, d_bar_j, g_bar_j) and weights of the LOS 1D rule."""
    mu, C = prior.marginal(0)
    lo, hi = confidence_aod_interval(mu, C, kappa)
    k0 = (4 * np.pi * prior.carrier_frequency / SPEED_OF_LIGHT) ** 2
    if hi - lo < 1e-12:
        d = np.linalg.norm(mu)
        return np.array([lo]), np.array([d]), np.array([1 / (k0 * d * d)]), np.ones(1)
    x, w = np.polynomial.legendre.leggauss(order)
    th = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    dbar, gbar, dens = [], [], []
    for t in th:
        e2, e4, pth = los_radial_moments(mu, C, t, radial_order)
        gbar.append(1.0 / (k0 * e2))
        dbar.append(np.sqrt(e4 / e2))
        dens.append(pth)
    p = w * np.array(dens)
    return th, np.array(dbar), np.array(gbar), p / p.sum()


def subopt_los(prior: PriorModel, system: OfdmSystem, kappa: float = 0.995,
               q_th_los_db: float = -3.0, n_theta: int = 15, order: int = 15) -> Allocation:
    """Per-path allocation for the LOS path only (1D quadrature over its AOD)."""
    th, dbar, gbar, p = los_quadrature(prior, kappa, order)
    stacks = []
    for t, d, g in zip(th, dbar, gbar):
        nu = PositionParams(d * unit(t), prior.rx_orientation, 0.0, [np.sqrt(g)])
        stacks.append(beam_position_fims(system, nu))
    priors = [prior_fim(6, prior.clock_std)] * len(stacks)
    A0 = excitation_matrix(system, confidence_aod_grid(prior, 0, kappa, n_theta))
    q, sol, obj = solve_speb_epigraph(stacks, priors, p, ratio=(A0, A0),
                                      q_th=10 ** (q_th_los_db / 10))
    return _finish("subopt_los", q, sol, obj, nodes=th.tolist())


def nlos_beam_fims(system: OfdmSystem, rx_position, rx_orientation, scatterer, moments):
    """Per-beam FIM of (p_s, eps, |h|, arg h) for one bounce path, Rx known.

    `moments` = (E|h|, E|h|^2) averages over the path amplitude.
    """
    nu = PositionParams(rx_position, rx_orientation, 0.0, [1.0, 1.0], [scatterer])
    ch = pos_to_channel(nu).subset([1])
    S = beam_channel_fims(system, ch) * gain_moment_matrix([moments[0]], [moments[1]])[None]
    T = channel_to_position_transform(nu)[5:10][:, [6, 7, 3, 8, 9]]
    out = np.einsum("ai,kab,bj->kij", T, S, T)
    return 0.5 * (out + out.transpose(0, 2, 1))


def subopt_nlos(prior: PriorModel, system: OfdmSystem, l: int, order: int = 3) -> Allocation:
    """Per-path allocation for bounce path l (bistatic setup, Rx at its prior mean)."""
    mu_s, C_s = prior.marginal(l)
    pts, w = gauss_cubature_2d(mu_s, C_s, order)
    p_R = prior.mean[:2]
    e1, e2 = prior.rho_moments(l)
    stacks = []
    for ps in pts:
        length = np.linalg.norm(ps) + np.linalg.norm(p_R - ps)
        a = prior.free_space_amplitude(length)
        stacks.append(nlos_beam_fims(system, p_R, prior.rx_orientation, ps, (a * e1, a * a * e2)))
    priors = [_nlos_prior(prior.clock_std)] * len(stacks)
    q, sol, obj = solve_speb_epigraph(stacks, priors, w)
    return _finish(f"subopt_nlos_{l}", q, sol, obj)


def _nlos_prior(clock_std):
    P = np.zeros((5, 5))
    if np.isfinite(clock_std):
        P[2, 2] = 1.0 / clock_std**2
    return P


def subopt_weights(Q, prior: PriorModel, system: OfdmSystem,
                   constraints: ExcitationConstraint = ExcitationConstraint(),
                   order: int = 3) -> Allocation:
    """Optimal combination q = Q w of per-path allocations."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape[1] == 1:
        return Allocation(Q[:, 0], "subopt", None, "trivial", {"weights": [1.0]})
    pts, w = gauss_cubature_2d(*prior.marginal(0), order)
    stacks = [beam_position_fims(system, prior.to_params(prior.conditional_mean(pr)))
              for pr in pts]
    n = stacks[0].shape[1]
    priors = [prior_fim(n, prior.clock_std)] * len(stacks)
    ratio = _ratio_rows(system, prior, constraints)
    q, sol, obj = solve_speb_epigraph(stacks, priors, w, Q=Q, ratio=ratio, q_th=constraints.q_th)
    weights = np.linalg.lstsq(Q, q, rcond=None)[0]
    return _finish("subopt", q, sol, obj, weights=weights.tolist())


def subopt_allocation(prior: PriorModel, system: OfdmSystem, kappa: float = 0.995,
                      q_th_los_db: float = -3.0, q_th_db: float = -10.0,
                      n_theta: int = 15) -> Allocation:
    """LOS and per-bounce allocations combined by optimal weights."""
    cols = [subopt_los(prior, system, kappa, q_th_los_db, n_theta).q]
    cols += [subopt_nlos(prior, system, l).q for l in range(1, prior.n_paths)]
    return subopt_weights(np.column_stack(cols), prior, system,
                          ExcitationConstraint(kappa, q_th_db, n_theta))


def useful_beams(prior: PriorModel, system: OfdmSystem, kappa: float, n_theta: int,
                 paths=None) -> np.ndarray:
    paths = range(prior.n_paths) if paths is None else paths
    beams = set()
    for l in paths:
        beams.update(best_beams(system, confidence_aod_grid(prior, l, kappa, n_theta)).tolist())
    return np.array(sorted(beams), dtype=int)


def uniform_benchmark(prior: PriorModel, system: OfdmSystem, kappa: float,
                      n_theta: int = 15) -> Allocation:
    """Equal power on every beam that is the best beam for some grid AOD."""
    B = useful_beams(prior, system, kappa, n_theta)
    q = np.zeros(system.codebook.n_beams)
    q[B] = 1.0 / B.size
    return Allocation(q, f"uni_{kappa:.2f}", None, "closed_form", {"beams": B.tolist()})


def q_los_metric(q, prior: PriorModel, system: OfdmSystem, kappa: float = 0.995,
                 n_theta: int = 15) -> float:
    """Fraction of power on LOS-illuminating beams."""
    B = useful_beams(prior, system, kappa, n_theta, paths=[0])
    return float(np.sum(np.asarray(q)[B]))


def allocation_espeb(q, prior: PriorModel, system: OfdmSystem, points) -> float:
    """Mean SPEB of allocation q over the given parameter points."""
    vals = []
    for nu in points:
        S = beam_position_fims(system, nu)
        J = prior_fim(S.shape[1], prior.clock_std) + np.tensordot(q, S, axes=1)
        try:
            vals.append(speb(J).speb)
        except SingularFimError:
            vals.append(np.inf)
    return float(np.mean(vals))


STRATEGIES = ("opt_unconstr", "opt_constr", "opt_reduced", "subopt", "uni_0.60", "uni_0.90")


def run_strategy(name: str, prior: PriorModel, system: OfdmSystem, rng=None,
                 settings: dict | None = None) -> Allocation:
    """Dispatch by strategy tag; `settings` overrides sample counts and constraints."""
    s = dict(settings or {})
    con = ExcitationConstraint(s.get("kappa", 0.995), s.get("q_th_db", -10.0),
                               s.get("n_theta", 15))
    if name == "opt_unconstr":
        return optimal_allocation(prior, system, s.get("n_samples_full", 121), None, rng)
    if name == "opt_constr":
        return optimal_allocation(prior, system, s.get("n_samples_full", 121), con, rng)
    if name == "opt_reduced":
        return reduced_allocation(prior, system, s.get("n_samples_reduced", 64), con, rng)
    if name == "subopt":
        return subopt_allocation(prior, system, con.kappa, s.get("q_th_los_db", -3.0),
                                 con.q_th_db, con.n_theta)
    if name.startswith("uni_"):
        return uniform_benchmark(prior, system, float(name[4:]), con.n_theta)
    raise ValueError(f"unknown strategy {name!r}")


def with_clock_std(prior: PriorModel, clock_std: float) -> PriorModel:
    return replace(prior, clock_std=clock_std)
