"""OFDM reference signals: beam codebook, resource mapping, atoms, received signal.

Observations are kept as the stacked matrix of shape (N_B * N_R, N_P): row
``b * N_R + i`` holds antenna ``i`` of OFDM symbol ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ArrayGeometry, ChannelParams, steering_derivatives, steering_vector

NOISE_PSD_DBM_HZ = -174.0


def dbm_to_mw(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


def mw_to_dbm(x):
    return 10.0 * np.log10(x)


def noise_variance(noise_figure_db: float, n_subcarriers: int, spacing: float,
                   noise_psd_dbm_hz: float = NOISE_PSD_DBM_HZ) -> float:
    """Per-entry noise variance in mW: 10^(0.1 (n_Rx + N0)) * N * df."""
    return float(10.0 ** (0.1 * (noise_figure_db + noise_psd_dbm_hz)) * n_subcarriers * spacing)


@dataclass(frozen=True)
class Codebook:
    """Unit-norm beams stored as the columns of an (N_T, M_T) matrix."""

    vectors: np.ndarray

    @property
    def n_beams(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.vectors.shape[0]


def dft_codebook(n_tx: int) -> Codebook:
    """DFT beams f_k[n] = exp(-j 2 pi n k / N_T) / sqrt(N_T), k = 0..N_T-1."""
    if n_tx < 1:
        raise ValueError("n_tx must be >= 1")
    n = np.arange(n_tx)
    F = np.exp(-2j * np.pi * np.outer(n, n) / n_tx) / np.sqrt(n_tx)
    return Codebook(F)


@dataclass(frozen=True)
class ResourceGrid:
    """Reference-signal grid with a beam index per resource element.

    ``beam_map[b, i]`` is the beam transmitted on subcarrier ``subcarriers[i]``
    of symbol ``b``.
    """

    subcarriers: np.ndarray
    n_symbols: int
    spacing: float
    n_beams: int
    beam_map: np.ndarray

    @property
    def n_subcarriers(self) -> int:
        return self.subcarriers.size

    @property
    def n_res(self) -> int:
        return self.n_symbols * self.subcarriers.size

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * self.subcarriers * self.spacing

    def counts(self) -> np.ndarray:
        return np.bincount(self.beam_map.ravel(), minlength=self.n_beams)

    def resource_set(self, k: int) -> list[tuple[int, int]]:
        """R_k as (subcarrier, symbol) pairs."""
        b, i = np.nonzero(self.beam_map == k)
        return [(int(self.subcarriers[ii]), int(bb)) for bb, ii in zip(b, i)]

    def uniform_fractions(self) -> np.ndarray:
        """gamma_k[p, b] = 1/|R_k| laid out like `beam_map`."""
        return 1.0 / self.counts()[self.beam_map]


def interleaved_staggered_map(subcarriers, n_symbols: int, n_beams: int,
                              spacing: float = 1.0) -> ResourceGrid:
    """Assign RE (p, b) to beam k = (p - b) mod M_T."""
    P = np.asarray(sorted(set(int(p) for p in subcarriers)))
    b = np.arange(n_symbols)[:, None]
    beam_map = np.mod(P[None, :] - b, n_beams)
    grid = ResourceGrid(P, int(n_symbols), float(spacing), int(n_beams), beam_map)
    empty = np.nonzero(grid.counts() == 0)[0]
    if empty.size:
        raise ValueError(f"beams {empty.tolist()} get no resource elements")
    return grid


@dataclass(frozen=True)
class OfdmSystem:
    """Everything fixed about the link except the beam power allocation."""

    tx_array: ArrayGeometry
    rx_array: ArrayGeometry
    grid: ResourceGrid
    codebook: Codebook
    total_power: float
    noise_variance: float

    def __post_init__(self):
        if self.codebook.n_antennas != self.tx_array.n_elements:
            raise ValueError("codebook does not match the Tx array")
        if self.codebook.n_beams != self.grid.n_beams:
            raise ValueError("grid and codebook disagree on the beam count")

    @property
    def power_per_re(self) -> float:
        return self.total_power / self.grid.n_res

    def with_power(self, total_power: float) -> "OfdmSystem":
        return OfdmSystem(self.tx_array, self.rx_array, self.grid, self.codebook,
                          float(total_power), self.noise_variance)

    def reference(self, q, phases=None) -> "ReferenceSignal":
        return build_reference(q, self, phases)


@dataclass(frozen=True)
class ReferenceSignal:
    system: OfdmSystem
    allocation: np.ndarray
    fractions: np.ndarray
    phases: np.ndarray
    symbols: np.ndarray  # (N_B, N_T, N_P)

    @property
    def grid(self) -> ResourceGrid:
        return self.system.grid

    def energy(self) -> float:
        return float(np.sum(np.abs(self.symbols) ** 2))

    def amplitudes(self) -> np.ndarray:
        """|lambda_k[p, b]| per RE, shape (N_B, N_P)."""
        q = self.allocation[self.grid.beam_map]
        return np.sqrt(self.system.total_power * q * self.fractions)


def build_reference(q, system: OfdmSystem, phases=None) -> ReferenceSignal:
    """Per-RE symbols x[p, b] = sqrt(P q_k gamma_k[p, b]) e^{j beta} f_k."""
    q = np.asarray(q, dtype=float)
    grid = system.grid
    if q.shape != (grid.n_beams,):
        raise ValueError("allocation length must equal the number of beams")
    if np.any(q < -1e-12):
        raise ValueError("allocation must be non-negative")
    if q.sum() > 1 + 1e-9:
        raise ValueError("allocation must sum to at most one")
    q = np.clip(q, 0.0, None)
    gamma = grid.uniform_fractions()
    beta = np.zeros_like(gamma) if phases is None else np.asarray(phases, dtype=float)
    lam = np.sqrt(system.total_power * q[grid.beam_map] * gamma) * np.exp(1j * beta)
    F = system.codebook.vectors
    X = lam[:, None, :] * F[:, grid.beam_map].transpose(1, 0, 2)
    return ReferenceSignal(system, q, gamma, beta, X)


def tx_excitation(X: ReferenceSignal, aod, order: int = 0):
    """a_T(theta)^T x[p, b] (and derivatives) for each RE, shape (..., N_B, N_P)."""
    aT, daT, d2aT = steering_derivatives(X.system.tx_array, aod)
    out = [np.einsum("...n,bnp->...bp", v, X.symbols) for v in (aT, daT, d2aT)[: order + 1]]
    return out if order else out[0]


def _atom3(tau, aod, aoa, X: ReferenceSignal) -> np.ndarray:
    aR = steering_vector(X.system.rx_array, aoa)
    v = tx_excitation(X, aod)
    ph = np.exp(-1j * X.grid.omegas * tau)
    return aR[None, :, None] * (v * ph)[:, None, :]


def atom(tau, aod, aoa, X: ReferenceSignal) -> np.ndarray:
    """Stacked atom C(tau, theta_T, theta_R), shape (N_B * N_R, N_P)."""
    C = _atom3(tau, aod, aoa, X)
    return C.reshape(-1, C.shape[-1])


def atom_with_derivatives(tau, aod, aoa, X: ReferenceSignal):
    """Atom in (N_B, N_R, N_P) layout plus first and second derivatives.

    Returns ``C, dC, d2C`` where ``dC[k]``/``d2C[k]`` differentiate with respect
    to tau, theta_T, theta_R for k = 0, 1, 2.
    """
    aR, daR, d2aR = steering_derivatives(X.system.rx_array, aoa)
    v, dv, d2v = tx_excitation(X, aod, order=2)
    w = X.grid.omegas
    ph = np.exp(-1j * w * tau)
    base = (v * ph)[:, None, :]
    C = aR[None, :, None] * base
    dC = np.stack([
        C * (-1j * w),
        aR[None, :, None] * (dv * ph)[:, None, :],
        daR[None, :, None] * base,
    ])
    d2C = np.stack([
        C * (-(w ** 2)),
        aR[None, :, None] * (d2v * ph)[:, None, :],
        d2aR[None, :, None] * base,
    ])
    return C, dC, d2C


def noiseless_signal(X: ReferenceSignal, ch: ChannelParams) -> np.ndarray:
    M = np.zeros((X.grid.n_symbols, X.system.rx_array.n_elements, X.grid.n_subcarriers), complex)
    for l in range(ch.n_paths):
        M += ch.gains[l] * _atom3(ch.delays[l], ch.aod[l], ch.aoa[l], X)
    return M.reshape(-1, M.shape[-1])


def synthesize_received(X: ReferenceSignal, ch: ChannelParams, noise_var: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Y = sum_l h_l C_l + N with i.i.d. CN(0, noise_var) entries."""
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    Y = noiseless_signal(X, ch)
    N = rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)
    return Y + np.sqrt(noise_var / 2) * N
