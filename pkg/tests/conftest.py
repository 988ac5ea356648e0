import sys

import numpy as np
import pytest

from beamloc.geometry import ArrayGeometry, PositionParams
from beamloc.scenario import load_scenario
from beamloc.waveform import OfdmSystem, dft_codebook, interleaved_staggered_map

FC = 38e9


def tiny_system(n_tx=8, n_rx=4, n_sub=8, n_sym=4, total_power=10.0, noise_var=1e-9):
    half = n_sub // 2
    P = np.r_[np.arange(-half, 0), np.arange(1, half + 1)]
    spacing = 120e6 / (P.max() - P.min())
    grid = interleaved_staggered_map(P, n_sym, n_tx, spacing)
    return OfdmSystem(ArrayGeometry.ula(n_tx, FC), ArrayGeometry.uca(n_rx, FC), grid,
                      dft_codebook(n_tx), total_power, noise_var)


def random_geometry(rng, n_paths=3, clock=0.0):
    """Receiver and scatterers in front of the Tx (x > 0), well separated."""
    while True:
        p = np.array([rng.uniform(5, 40), rng.uniform(-20, 20)])
        s = np.column_stack([rng.uniform(5, 60, n_paths - 1), rng.uniform(-30, 30, n_paths - 1)])
        d = np.r_[np.linalg.norm(s, axis=1), np.linalg.norm(s - p, axis=1)]
        if d.min() < 2:
            continue
        amps = rng.uniform(0.5, 1.5, n_paths) * 1e-5
        gains = amps * np.exp(2j * np.pi * rng.random(n_paths))
        return PositionParams(p, rng.uniform(-np.pi, np.pi), clock, gains, s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small():
    return load_scenario("paper_small")


@pytest.fixture(scope="session")
def default():
    return load_scenario("paper_default")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
