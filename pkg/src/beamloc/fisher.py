"""Fisher information for channel and position parameters, SPEB/PEB.

Channel parameters are ordered per path as (tau, theta_T, theta_R, |h|, arg h),
i.e. a (5L, 5L) matrix; `marginalize_gains` reduces it to the (tau, theta_T,
theta_R) ordering by a Schur complement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .geometry import (GeometryError, PositionParams, ChannelParams, pos_to_channel,
                       pos_to_channel_jacobian, steering_derivatives)
from .waveform import OfdmSystem, ReferenceSignal

log = logging.getLogger(__name__)

CLOCK_INDEX = 3
MAX_CONDITION = 1e12


class SingularFimError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        super().__init__(f"Fisher information is singular (condition ~ {condition:.3g})")
        self.condition = condition


@dataclass(frozen=True)
class SpebValue:
    speb: float  # m^2

    @property
    def peb(self) -> float:
        return float(np.sqrt(self.speb))


def _derivative_tensor(ch: ChannelParams, v, dv, aR, daR, omegas):
    """dm/d(channel params), shape (5L, N_B, N_R, N_P).

    v, dv: Tx excitation a_T^T x and its AOD derivative per path, (L, N_B, N_P).
    """
    L = ch.n_paths
    _, NB, NP = v.shape
    NR = aR.shape[-1]
    D = np.empty((5 * L, NB, NR, NP), dtype=complex)
    for l in range(L):
        h = ch.gains[l]
        ph = np.exp(-1j * omegas * ch.delays[l])
        base = (v[l] * ph)[:, None, :] * aR[l][None, :, None]
        unit_phase = np.exp(1j * np.angle(h)) if h != 0 else 1.0
        D[5 * l] = h * (-1j * omegas) * base
        D[5 * l + 1] = h * (dv[l] * ph)[:, None, :] * aR[l][None, :, None]
        D[5 * l + 2] = h * (v[l] * ph)[:, None, :] * daR[l][None, :, None]
        D[5 * l + 3] = unit_phase * base
        D[5 * l + 4] = 1j * h * base
    return D


def _reference_derivatives(X: ReferenceSignal, ch: ChannelParams):
    sysm = X.system
    aT, daT, _ = steering_derivatives(sysm.tx_array, ch.aod)
    aR, daR, _ = steering_derivatives(sysm.rx_array, ch.aoa)
    v = np.einsum("ln,bnp->lbp", aT, X.symbols)
    dv = np.einsum("ln,bnp->lbp", daT, X.symbols)
    return _derivative_tensor(ch, v, dv, aR, daR, X.grid.omegas)


def _fim_from_tensor(D, noise_var):
    Df = D.reshape(D.shape[0], -1)
    J = (2.0 / noise_var) * np.real(Df.conj() @ Df.T)
    return 0.5 * (J + J.T)


def channel_fim(X: ReferenceSignal, ch: ChannelParams, noise_var: float) -> np.ndarray:
    """(5L, 5L) FIM of (tau, theta_T, theta_R, |h|, arg h) per path."""
    return _fim_from_tensor(_reference_derivatives(X, ch), noise_var)


def marginalize_gains(J: np.ndarray) -> np.ndarray:
    """Equivalent FIM of (tau, theta_T, theta_R) per path (Schur complement over gains)."""
    n = J.shape[0]
    keep = np.array([i for i in range(n) if i % 5 < 3])
    drop = np.array([i for i in range(n) if i % 5 >= 3])
    Jgg = J[np.ix_(drop, drop)]
    Jkg = J[np.ix_(keep, drop)]
    d = np.sqrt(np.diag(Jgg))
    if np.any(d <= 0):
        raise SingularFimError(np.inf)
    Js = Jgg / np.outer(d, d)
    cond = np.linalg.cond(Js)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularFimError(cond)
    S = J[np.ix_(keep, keep)] - (Jkg / d) @ np.linalg.solve(Js, (Jkg / d).T)
    return 0.5 * (S + S.T)


def channel_to_position_transform(nu: PositionParams) -> np.ndarray:
    """d(channel params incl. gains)/d(nu), shape (5L, 4L+2)."""
    L = nu.n_paths
    Jg = pos_to_channel_jacobian(nu)
    T = np.zeros((5 * L, 4 * L + 2))
    for l in range(L):
        T[5 * l:5 * l + 3] = Jg[3 * l:3 * l + 3]
        gi = 4 if l == 0 else 6 + 4 * (l - 1) + 2
        T[5 * l + 3, gi] = 1.0
        T[5 * l + 4, gi + 1] = 1.0
    return T


def observation_fim(X: ReferenceSignal, nu: PositionParams, noise_var: float) -> np.ndarray:
    """J^(o) in the position parameterization, shape (4L+2, 4L+2)."""
    ch = pos_to_channel(nu)
    T = channel_to_position_transform(nu)
    J = T.T @ channel_fim(X, ch, noise_var) @ T
    return 0.5 * (J + J.T)


def _unit_beam_excitations(system: OfdmSystem, aod):
    """Per-path excitation with every beam at full power: (L, N_B, N_P) x2."""
    grid = system.grid
    aT, daT, _ = steering_derivatives(system.tx_array, aod)
    F = system.codebook.vectors
    amp = np.sqrt(system.total_power * grid.uniform_fractions())
    g = (aT @ F)[:, grid.beam_map] * amp
    dg = (daT @ F)[:, grid.beam_map] * amp
    return g, dg


def beam_channel_fims(system: OfdmSystem, ch: ChannelParams) -> np.ndarray:
    """Channel FIM contribution of each beam at q_k = 1, shape (M_T, 5L, 5L).

    The FIM of an allocation q is ``np.tensordot(q, stack, 1)``.
    """
    aR, daR, _ = steering_derivatives(system.rx_array, ch.aoa)
    v, dv = _unit_beam_excitations(system, ch.aod)
    D = _derivative_tensor(ch, v, dv, aR, daR, system.grid.omegas)
    n, NB, NR, NP = D.shape
    # per-RE outer products, then summed within each beam's RE set
    per_re = np.real(np.einsum("ibrp,jbrp->bpij", D.conj(), D)).reshape(NB * NP, n * n)
    beams = system.grid.beam_map.ravel()
    stack = np.zeros((system.grid.n_beams, n * n))
    np.add.at(stack, beams, per_re)
    stack = stack.reshape(-1, n, n) * (2.0 / system.noise_variance)
    return 0.5 * (stack + stack.transpose(0, 2, 1))


def gain_moment_matrix(mean_amp, mean_sq_amp) -> np.ndarray:
    """E[a a^T] for the per-parameter amplitude factors of a unit-gain FIM.

    Non-|h| parameters of path l scale with |h_l|; the |h_l| parameter itself
    carries no amplitude factor.
    """
    m = np.asarray(mean_amp, dtype=float)
    m2 = np.asarray(mean_sq_amp, dtype=float)
    L = m.size
    amp_mean = np.empty(5 * L)
    path = np.repeat(np.arange(L), 5)
    scaled = np.tile([True, True, True, False, True], L)
    amp_mean[scaled] = m[path[scaled]]
    amp_mean[~scaled] = 1.0
    M = np.outer(amp_mean, amp_mean)
    same = (path[:, None] == path[None, :]) & scaled[:, None] & scaled[None, :]
    M[same] = m2[path[np.nonzero(same)[0]]]
    return M


def beam_position_fims(system: OfdmSystem, nu: PositionParams, gain_moments=None) -> np.ndarray:
    """Per-beam J^(o) stack in the position parameterization, (M_T, 4L+2, 4L+2).

    With ``gain_moments = (E|h_l|, E|h_l|^2)`` the stack is the expectation over
    independent path-gain magnitudes (the values of |h_l| in `nu` are ignored).
    """
    ch = pos_to_channel(nu)
    if gain_moments is not None:
        unit = np.exp(1j * np.angle(ch.gains))
        ch = ChannelParams(ch.delays, ch.aod, ch.aoa, unit)
    S = beam_channel_fims(system, ch)
    if gain_moments is not None:
        S = S * gain_moment_matrix(*gain_moments)[None]
    T = channel_to_position_transform(nu)
    out = np.einsum("ai,kab,bj->kij", T, S, T)
    return 0.5 * (out + out.transpose(0, 2, 1))


def prior_fim(n: int, clock_std: float) -> np.ndarray:
    """Clock-offset prior information: only entry (eps, eps) is non-zero."""
    J = np.zeros((n, n))
    if np.isfinite(clock_std):
        if clock_std <= 0:
            raise ValueError("clock_std must be positive (use a small value for sync)")
        J[CLOCK_INDEX, CLOCK_INDEX] = 1.0 / clock_std**2
    return J


def hybrid_fim(J_obs: np.ndarray, clock_std: float) -> np.ndarray:
    return J_obs + prior_fim(J_obs.shape[0], clock_std)


def _equilibrate(J):
    d = np.diag(J).copy()
    if np.any(d <= 0):
        raise SingularFimError(np.inf)
    s = 1.0 / np.sqrt(d)
    return J * np.outer(s, s), s


def position_crb(J: np.ndarray, idx=(0, 1)) -> np.ndarray:
    """Block of J^-1 for the entries `idx`, via a full Cholesky solve."""
    Js, s = _equilibrate(0.5 * (J + J.T))
    w = np.linalg.eigvalsh(Js)
    cond = w[-1] / w[0] if w[0] > 0 else np.inf
    if not cond < MAX_CONDITION:
        raise SingularFimError(cond)
    E = np.zeros((J.shape[0], len(idx)))
    E[list(idx), range(len(idx))] = 1.0
    Z = linalg.cho_solve(linalg.cho_factor(Js), s[:, None] * E)
    return (s[:, None] * E).T @ Z


def speb(J: np.ndarray, idx=(0, 1)) -> SpebValue:
    """trace(E^T J^-1 E) for the position entries."""
    return SpebValue(float(np.trace(position_crb(J, idx))))


def fim_at_allocation(stack: np.ndarray, q, clock_std: float) -> np.ndarray:
    J = np.tensordot(np.asarray(q, dtype=float), stack, axes=1)
    return hybrid_fim(J, clock_std)


def espeb_sample(q, system: OfdmSystem, prior=None, n_samples: int = 121, rng=None,
                 clock_std: float = np.inf, points=None, weights=None,
                 gain_moments=None) -> float:
    """Weighted mean SPEB over prior samples or supplied (points, weights).

    `prior` must provide ``sample_params(rng, n)`` returning PositionParams.
    Degenerate draws are redrawn; `gain_moments` is a callable nu -> moments
    used to average over gain magnitudes in closed form.
    """
    if points is None:
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        points, n_bad = [], 0
        while len(points) < n_samples:
            for nu in prior.sample_params(rng, n_samples - len(points)):
                try:
                    pos_to_channel(nu)
                except GeometryError:
                    n_bad += 1
                    continue
                points.append(nu)
        if n_bad:
            log.info("redrew %d degenerate geometries", n_bad)
    w = np.full(len(points), 1.0 / len(points)) if weights is None else np.asarray(weights)
    total = 0.0
    for wj, nu in zip(w, points):
        gm = gain_moments(nu) if gain_moments is not None else None
        J = fim_at_allocation(beam_position_fims(system, nu, gm), q, clock_std)
        total += wj * speb(J).speb
    return float(total)
