"""Scenario files: a versioned JSON schema resolved into system and prior objects."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .allocate import PriorModel
from .geometry import SPEED_OF_LIGHT, ArrayGeometry
from .waveform import (OfdmSystem, dbm_to_mw, dft_codebook, interleaved_staggered_map,
                       noise_variance)

SCHEMA_VERSION = 1
BUNDLED = ("paper_default", "paper_small")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PriorSpec(_Strict):
    mean: list[float]
    cov: list[list[float]]

    @model_validator(mode="after")
    def _check(self):
        mu = np.asarray(self.mean)
        C = np.asarray(self.cov)
        if (mu.size - 2) % 3:
            raise ValueError("prior.mean must have length 2 + 3(L-1)")
        if C.shape != (mu.size, mu.size):
            raise ValueError(f"prior.cov must be {mu.size}x{mu.size}")
        if not np.allclose(C, C.T):
            raise ValueError("prior.cov must be symmetric")
        w = np.linalg.eigvalsh(C)
        if w[0] < -1e-9 * max(1.0, w[-1]):
            raise ValueError(f"prior.cov is not positive semidefinite (min eigenvalue {w[0]:.4g})")
        return self


class EstimatorSpec(_Strict):
    p_fa: float = Field(0.05, gt=0, le=1)
    zeta2_db: float = -35.0
    n_cd: int = Field(3, ge=1)
    l_max: int = Field(10, ge=1)
    tau_max_s: float = Field(450e-9, gt=0)
    grid_oversampling: int = Field(2, ge=1)
    zeta3a: float = Field(1e-4, gt=0)
    zeta3b: float = Field(1e-2, gt=0)
    calibration_trials: int = Field(500, ge=200)


class StrategySpec(_Strict):
    kappa: float = Field(0.995, gt=0, lt=1)
    q_th_db: float = -10.0
    q_th_los_db: float = -3.0
    n_theta: int = Field(15, ge=2)
    n_samples_full: int = Field(121, ge=1)
    n_samples_reduced: int = Field(64, ge=1)


class Scenario(_Strict):
    schema_version: int = SCHEMA_VERSION
    name: str
    seed: int
    carrier_frequency_hz: float = 38e9
    n_subcarriers: int = 64
    n_symbols: int = 10
    pilot_subcarriers: Optional[list[int]] = None
    bandwidth_hz: float = 120e6
    noise_figure_db: float = 8.0
    noise_psd_dbm_hz: float = -174.0
    clock_std_s: Optional[float] = None
    n_tx: int = Field(32, ge=1)
    n_rx: int = Field(16, ge=1)
    tx_axis_angle: float = float(np.pi / 2)
    prior: PriorSpec
    strategies: list[str] = ["opt_unconstr", "opt_constr", "opt_reduced", "subopt",
                             "uni_0.60", "uni_0.90"]
    strategy_params: StrategySpec = StrategySpec()
    estimator: EstimatorSpec = EstimatorSpec()
    p_re_dbm: float = 0.0
    power_sweep_dbm: list[float] = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0]
    clock_sweep_units: list[float] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0]
    qlos_n_rx: list[int] = [4, 16]
    espeb_samples: int = 200
    trials_rmse: int = 200
    trials_cdf: int = 1000

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    @property
    def subcarriers(self) -> np.ndarray:
        if self.pilot_subcarriers is not None:
            return np.array(sorted(self.pilot_subcarriers))
        half = self.n_subcarriers // 2 - 1
        return np.r_[np.arange(-half, 0), np.arange(1, half + 1)]

    @property
    def spacing(self) -> float:
        P = self.subcarriers
        return self.bandwidth_hz / (P.max() - P.min())

    @property
    def clock_std(self) -> float:
        if self.clock_std_s is not None:
            return self.clock_std_s
        return 2.0 / (self.n_subcarriers * self.spacing)

    @property
    def delay_unit(self) -> float:
        """1 / (N df), the unit of the clock-offset sweep."""
        return 1.0 / (self.n_subcarriers * self.spacing)

    @property
    def noise_variance(self) -> float:
        return noise_variance(self.noise_figure_db, self.n_subcarriers, self.spacing,
                              self.noise_psd_dbm_hz)

    def total_power(self, p_re_dbm: float) -> float:
        """P_tot (mW) for a per-RE power in dBm."""
        return float(dbm_to_mw(p_re_dbm)) * self.n_symbols * self.subcarriers.size

    def system(self, p_re_dbm: float | None = None, n_rx: int | None = None) -> OfdmSystem:
        fc = self.carrier_frequency_hz
        tx = ArrayGeometry.ula(self.n_tx, fc, self.tx_axis_angle)
        rx = ArrayGeometry.uca(n_rx or self.n_rx, fc)
        grid = interleaved_staggered_map(self.subcarriers, self.n_symbols, self.n_tx, self.spacing)
        p = self.p_re_dbm if p_re_dbm is None else p_re_dbm
        return OfdmSystem(tx, rx, grid, dft_codebook(self.n_tx), self.total_power(p),
                          self.noise_variance)

    def prior_model(self, clock_std: float | None = None) -> PriorModel:
        return PriorModel(np.array(self.prior.mean), np.array(self.prior.cov),
                          self.carrier_frequency_hz,
                          self.clock_std if clock_std is None else clock_std)

    def strategy_settings(self) -> dict:
        s = self.strategy_params
        return {"kappa": s.kappa, "q_th_db": s.q_th_db, "q_th_los_db": s.q_th_los_db,
                "n_theta": s.n_theta, "n_samples_full": s.n_samples_full,
                "n_samples_reduced": s.n_samples_reduced}

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_scenario(path) -> Scenario:
    """Load a scenario by file path or bundled name (``paper_default``, ``paper_small``)."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        text = resources.files("beamloc.scenarios").joinpath(f"{path}.json").read_text()
    else:
        text = p.read_text()
    return Scenario.model_validate_json(text)


def indoor_prior_arrays(rx_var: float = 8.0, rho_mean_db: float = -10.0, rho_std_db: float = 4.0):
    """Mean and covariance of the indoor three-bounce prior."""
    mu = np.array([25.0, 10.0, 15.63, 25.0, rho_mean_db, 10.42, -25.0, rho_mean_db,
                   60.0, 6.32, rho_mean_db])
    C = np.zeros((11, 11))
    C[0:2, 0:2] = rx_var * np.eye(2)
    blocks = [(2, [[3.48, 0], [0, 1]], [[4.45, 0], [0, 0]]),
              (5, [[1.34, 0], [0, 1]], [[1.64, 0], [0, 0]]),
              (8, [[1, 0], [0, 2.31]], [[0, 0], [0, 3.24]])]
    for i, Cll, C0l in blocks:
        C[i:i + 2, i:i + 2] = Cll
        C[0:2, i:i + 2] = C0l
        C[i:i + 2, 0:2] = np.transpose(C0l)
        C[i + 2, i + 2] = rho_std_db**2
    return mu, C


def delay_to_meters(t):
    return SPEED_OF_LIGHT * np.asarray(t)
