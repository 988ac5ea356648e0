"""Planar array and single-bounce multipath geometry.

Parameter vector layout (length 4L + 2)::

    [p_R,x, p_R,y, alpha_R, eps_clk, |h_0|, arg h_0,
     p_s1,x, p_s1,y, |h_1|, arg h_1, ..., p_s(L-1),x, p_s(L-1),y, |h_L-1|, arg h_L-1]

Channel parameters are ordered per path as (tau, theta_T, theta_R).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
# below this distance two points are treated as coincident
DEGENERACY_TOL = 1e-6


class GeometryError(ValueError):
    """Raised for degenerate geometries (coincident points)."""


def wrap_angle(x):
    """Wrap angle(s) into [-pi, pi)."""
    return np.mod(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def unit(theta):
    return np.array([np.cos(theta), np.sin(theta)])


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna array described by polar element offsets from its reference point."""

    distances: np.ndarray
    angles: np.ndarray
    carrier_frequency: float

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.distances, dtype=float))
        psi = np.atleast_1d(np.asarray(self.angles, dtype=float))
        if d.shape != psi.shape or d.size < 1:
            raise ValueError("distances and angles must be equal-length, non-empty")
        if np.any(d < 0):
            raise ValueError("element distances must be non-negative")
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "angles", wrap_angle(psi))

    @property
    def n_elements(self) -> int:
        return self.distances.size

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @classmethod
    def ula(cls, n: int, carrier_frequency: float, axis_angle: float = np.pi / 2):
        """Half-wavelength ULA with element j at distance j*lambda/2 along `axis_angle`."""
        lam = SPEED_OF_LIGHT / carrier_frequency
        return cls(np.arange(n) * lam / 2, np.full(n, axis_angle), carrier_frequency)

    @classmethod
    def uca(cls, n: int, carrier_frequency: float):
        """UCA whose adjacent elements are lambda/2 apart along the circumference."""
        lam = SPEED_OF_LIGHT / carrier_frequency
        radius = n * lam / (4 * np.pi) if n > 1 else 0.0
        return cls(np.full(n, radius), 2 * np.pi * np.arange(n) / n, carrier_frequency)


def _phase_terms(array: ArrayGeometry, theta):
    theta = np.asarray(theta, dtype=float)[..., None]
    k = 2 * np.pi * array.carrier_frequency / SPEED_OF_LIGHT
    kd = k * array.distances
    delta = array.angles - theta
    return kd, delta


def steering_vector(array: ArrayGeometry, theta):
    """Array response exp(j w_c d_j cos(psi_j - theta) / c).

    `theta` may be a scalar or an array; the element axis is appended last.
    """
    kd, delta = _phase_terms(array, theta)
    return np.exp(1j * kd * np.cos(delta))


def steering_derivatives(array: ArrayGeometry, theta):
    """Return (a, da/dtheta, d2a/dtheta2)."""
    kd, delta = _phase_terms(array, theta)
    a = np.exp(1j * kd * np.cos(delta))
    g = 1j * kd * np.sin(delta)
    da = g * a
    d2a = (-1j * kd * np.cos(delta) + g * g) * a
    return a, da, d2a


@dataclass(frozen=True)
class PositionParams:
    """Receiver state, path gains and scatterer positions."""

    rx_position: np.ndarray
    rx_orientation: float
    clock_offset: float
    gains: np.ndarray
    scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        p = np.asarray(self.rx_position, dtype=float).reshape(2)
        h = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        s = np.asarray(self.scatterers, dtype=float).reshape(-1, 2)
        if h.size < 1:
            raise ValueError("at least the LOS path is required")
        if s.shape[0] != h.size - 1:
            raise ValueError("need one scatterer per NLOS path")
        if np.linalg.norm(p) <= 0:
            raise GeometryError("receiver at the transmitter")
        object.__setattr__(self, "rx_position", p)
        object.__setattr__(self, "gains", h)
        object.__setattr__(self, "scatterers", s)
        object.__setattr__(self, "rx_orientation", float(self.rx_orientation))
        object.__setattr__(self, "clock_offset", float(self.clock_offset))

    @property
    def n_paths(self) -> int:
        return self.gains.size

    def to_vector(self) -> np.ndarray:
        L = self.n_paths
        v = np.empty(4 * L + 2)
        v[0:2] = self.rx_position
        v[2] = self.rx_orientation
        v[3] = self.clock_offset
        v[4] = abs(self.gains[0])
        v[5] = np.angle(self.gains[0])
        for l in range(1, L):
            i = 6 + 4 * (l - 1)
            v[i:i + 2] = self.scatterers[l - 1]
            v[i + 2] = abs(self.gains[l])
            v[i + 3] = np.angle(self.gains[l])
        return v

    @classmethod
    def from_vector(cls, v) -> "PositionParams":
        v = np.asarray(v, dtype=float)
        if (v.size - 2) % 4 or v.size < 6:
            raise ValueError("parameter vector must have length 4L+2")
        L = (v.size - 2) // 4
        gains = np.empty(L, dtype=complex)
        gains[0] = v[4] * np.exp(1j * v[5])
        scat = np.empty((L - 1, 2))
        for l in range(1, L):
            i = 6 + 4 * (l - 1)
            scat[l - 1] = v[i:i + 2]
            gains[l] = v[i + 2] * np.exp(1j * v[i + 3])
        return cls(v[0:2], v[2], v[3], gains, scat)

    def replace(self, **kw) -> "PositionParams":
        d = dict(rx_position=self.rx_position, rx_orientation=self.rx_orientation,
                 clock_offset=self.clock_offset, gains=self.gains, scatterers=self.scatterers)
        d.update(kw)
        return PositionParams(**d)


@dataclass(frozen=True)
class ChannelParams:
    """Per-path delay, AOD, AOA and complex gain; path 0 is the LOS."""

    delays: np.ndarray
    aod: np.ndarray
    aoa: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.delays, dtype=float))
        tt = wrap_angle(np.atleast_1d(self.aod))
        tr = wrap_angle(np.atleast_1d(self.aoa))
        h = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        if not (tau.shape == tt.shape == tr.shape == h.shape):
            raise ValueError("inconsistent path counts")
        object.__setattr__(self, "delays", tau)
        object.__setattr__(self, "aod", tt)
        object.__setattr__(self, "aoa", tr)
        object.__setattr__(self, "gains", h)

    @property
    def n_paths(self) -> int:
        return self.delays.size

    def subset(self, idx) -> "ChannelParams":
        idx = np.atleast_1d(idx)
        return ChannelParams(self.delays[idx], self.aod[idx], self.aoa[idx], self.gains[idx])

    def vector(self) -> np.ndarray:
        """Stacked (tau, theta_T, theta_R) per path."""
        return np.column_stack([self.delays, self.aod, self.aoa]).ravel()


def _check_distance(x, what):
    if np.linalg.norm(x) < DEGENERACY_TOL:
        raise GeometryError(f"degenerate geometry: {what}")


def path_lengths(nu: PositionParams) -> np.ndarray:
    """Geometric propagation distance of each path (meters)."""
    out = np.empty(nu.n_paths)
    out[0] = np.linalg.norm(nu.rx_position)
    for l in range(1, nu.n_paths):
        ps = nu.scatterers[l - 1]
        out[l] = np.linalg.norm(ps) + np.linalg.norm(nu.rx_position - ps)
    return out


def pos_to_channel(nu: PositionParams) -> ChannelParams:
    """Map position parameters to per-path (tau, theta_T, theta_R, h)."""
    L = nu.n_paths
    p = nu.rx_position
    _check_distance(p, "receiver at transmitter")
    tau = np.empty(L)
    tt = np.empty(L)
    tr = np.empty(L)
    tau[0] = np.linalg.norm(p) / SPEED_OF_LIGHT + nu.clock_offset
    tt[0] = np.arctan2(p[1], p[0])
    tr[0] = tt[0] + np.pi - nu.rx_orientation
    for l in range(1, L):
        ps = nu.scatterers[l - 1]
        _check_distance(ps, f"scatterer {l} at transmitter")
        d = ps - p
        _check_distance(d, f"scatterer {l} at receiver")
        tau[l] = (np.linalg.norm(ps) + np.linalg.norm(d)) / SPEED_OF_LIGHT + nu.clock_offset
        tt[l] = np.arctan2(ps[1], ps[0])
        tr[l] = np.arctan2(d[1], d[0]) - nu.rx_orientation
    return ChannelParams(tau, tt, tr, nu.gains)


def pos_to_channel_jacobian(nu: PositionParams) -> np.ndarray:
    """Analytic d(tau, theta_T, theta_R)_l / d nu, shape (3L, 4L+2)."""
    L = nu.n_paths
    c = SPEED_OF_LIGHT
    p = nu.rx_position
    _check_distance(p, "receiver at transmitter")
    Jac = np.zeros((3 * L, 4 * L + 2))
    r = np.linalg.norm(p)
    dtheta = np.array([-p[1], p[0]]) / r**2
    Jac[0, 0:2] = p / (c * r)
    Jac[0, 3] = 1.0
    Jac[1, 0:2] = dtheta
    Jac[2, 0:2] = dtheta
    Jac[2, 2] = -1.0
    for l in range(1, L):
        ps = nu.scatterers[l - 1]
        _check_distance(ps, f"scatterer {l} at transmitter")
        d = ps - p
        _check_distance(d, f"scatterer {l} at receiver")
        i = 6 + 4 * (l - 1)
        row = 3 * l
        ns, nd = np.linalg.norm(ps), np.linalg.norm(d)
        Jac[row, i:i + 2] = (ps / ns + d / nd) / c
        Jac[row, 0:2] = -d / (nd * c)
        Jac[row, 3] = 1.0
        Jac[row + 1, i:i + 2] = np.array([-ps[1], ps[0]]) / ns**2
        g = np.array([-d[1], d[0]]) / nd**2
        Jac[row + 2, i:i + 2] = g
        Jac[row + 2, 0:2] = -g
        Jac[row + 2, 2] = -1.0
    return Jac


def gain_columns(L: int) -> np.ndarray:
    """Indices of the (|h_l|, arg h_l) entries in the parameter vector."""
    idx = [4, 5]
    for l in range(1, L):
        i = 6 + 4 * (l - 1)
        idx += [i + 2, i + 3]
    return np.array(idx)


def geometric_columns(L: int) -> np.ndarray:
    """Indices of the non-gain entries (p_R, alpha_R, eps_clk, p_s...)."""
    return np.setdiff1d(np.arange(4 * L + 2), gain_columns(L))
