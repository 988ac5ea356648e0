import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamloc.estimate import PathEstimate, default_config
from beamloc.waveform import atom
from beamloc.geometry import SPEED_OF_LIGHT, PositionParams, pos_to_channel, unit, wrap_angle
from beamloc.locate import (NoDetectionError, clock_consistency_mask,
                            clock_density, clock_from_path, exip_refine, exip_weight,
                            initial_guess, locate, locate_from_paths, path_clocks,
                            select_los, triangle_filter, triangle_mask)
from conftest import random_geometry, tiny_system


def _paths(nu):
    """Exact path parameters; the LOS gain is boosted so it is the strongest."""
    nu = nu.replace(gains=np.r_[10 * nu.gains[0], nu.gains[1:]])
    ch = pos_to_channel(nu)
    return [PathEstimate(t, a, b, h) for t, a, b, h in zip(ch.delays, ch.aod, ch.aoa, ch.gains)]


def _measured(paths):
    return np.column_stack([[p.delay for p in paths], [p.aod for p in paths],
                            [p.aoa for p in paths]]).ravel()


@pytest.fixture(scope="module")
def X():
    s = tiny_system(n_tx=8, n_rx=4, n_sub=8, n_sym=4, total_power=1.0, noise_var=1e-12)
    return s.reference(np.full(8, 1 / 8))


def test_select_los_picks_largest_gain():
    paths = [PathEstimate(3e-8, 0, 0, 0.1), PathEstimate(4e-8, 0.1, 0, 0.5j), PathEstimate(5e-8, 0.2, 0, -0.2)]
    out, order = select_los(paths)
    assert order == [1, 0, 2]
    assert out[0] is paths[1]


def test_triangle_rule_examples():
    los = PathEstimate(1e-7, 0.0, 0.0, 1.0)
    same = PathEstimate(1.2e-7, 0.2, 0.3, 0.5)
    zero = PathEstimate(1.2e-7, 0.0, 0.3, 0.5)
    good = PathEstimate(1.2e-7, 0.2, -0.3, 0.5)
    assert triangle_mask([los, same, zero, good]).tolist() == [True, False, False, True]


def test_triangle_keeps_true_geometry(rng):
    for _ in range(50):
        paths = _paths(random_geometry(rng, 4))
        assert len(triangle_filter(paths)) == 4


def test_clock_from_path_recovers_offset(rng):
    for clock in (10e-9, 0.0, -3e-9):
        nu = random_geometry(rng, 2, clock)
        eps = path_clocks(_paths(nu))[0]
        assert eps == pytest.approx(clock, abs=1e-15)


def test_clock_from_path_degenerate_is_none():
    assert clock_from_path(1e-7, 2e-7, 0.3, 0.3) is None


def test_clock_density_is_standardized():
    assert clock_density(0.0, 1e-9) == pytest.approx(1 / np.sqrt(2 * np.pi))
    assert clock_density(2e-9, 1e-9) == pytest.approx(np.exp(-2) / np.sqrt(2 * np.pi))


def _with_clock(nu, paths, l, eps):
    """Shift one NLOS path's delay so it implies clock ``eps``."""
    p_r, ex = nu.rx_position, paths[l]
    t0 = np.linalg.norm(p_r) / SPEED_OF_LIGHT + eps
    # invert the closed form for the path delay given the LOS delay
    dT, dR = wrap_angle(ex.aod - paths[0].aod), wrap_angle(ex.aoa - paths[0].aoa)
    s, t = np.sin(dR - dT), np.sin(dR) - np.sin(dT)
    tl = (eps * (s - t) + paths[0].delay * t) / s
    return PathEstimate(tl, ex.aod, ex.aoa, ex.gain)


def test_clock_filter_drops_outliers(rng):
    sigma = 1e-9
    nu = random_geometry(rng, 4, 0.0)
    paths = _paths(nu)
    paths[2] = _with_clock(nu, paths, 2, 10 * sigma)
    assert clock_consistency_mask(paths, sigma).tolist() == [True, True, False, True]
    # a 1e-3 density ratio against the best path is below zeta3b even if zeta3a passes
    z = np.sqrt(2 * np.log(1e3))
    paths = _paths(nu)
    paths[3] = _with_clock(nu, paths, 3, z * sigma)
    assert clock_consistency_mask(paths, sigma).tolist() == [True, True, True, False]


def test_initial_guess_exact_on_clean_paths(rng):
    for _ in range(50):
        nu = random_geometry(rng, 3, rng.uniform(-5e-9, 5e-9))
        g = initial_guess(_paths(nu))
        np.testing.assert_allclose(g.rx_position, nu.rx_position, atol=1e-6)
        np.testing.assert_allclose(g.scatterers, nu.scatterers, atol=1e-6)
        assert wrap_angle(g.rx_orientation - nu.rx_orientation) == pytest.approx(0, abs=1e-9)
        assert g.clock_offset == pytest.approx(nu.clock_offset, abs=1e-15)
        assert -np.pi <= g.rx_orientation < np.pi


def test_initial_guess_los_only_uses_zero_clock():
    p = PathEstimate(1e-7, 0.3, 1.0, 1.0)
    g = initial_guess([p])
    assert g.clock_offset == 0
    np.testing.assert_allclose(g.rx_position, SPEED_OF_LIGHT * 1e-7 * unit(0.3))
    assert g.rx_orientation == pytest.approx(wrap_angle(0.3 + np.pi - 1.0))


def test_exip_zero_residual_optimum(rng):
    nu = random_geometry(rng, 3, 0.0)
    paths = _paths(nu)
    J = np.eye(9) * np.tile([1e18, 1.0, 1.0], 3)
    fix = exip_refine(nu, _measured(paths), J, 1e-9)
    assert fix.converged
    assert fix.iterations <= 1
    np.testing.assert_allclose(fix.rx_position, nu.rx_position, atol=1e-9)


def test_exip_weighting_pulls_toward_heavier_measurement(rng):
    nu = random_geometry(rng, 3, 0.0)
    paths = _paths(nu)
    m = _measured(paths)
    m[3] += 0.3e-9  # inconsistent delay on path 1
    base = np.tile([1e18, 1e2, 1e2], 3)
    light = exip_refine(initial_guess(paths), m, np.diag(base), 1.0)
    heavy_w = base.copy()
    heavy_w[3] *= 1e3
    heavy = exip_refine(initial_guess(paths), m, np.diag(heavy_w), 1.0)

    def resid(fix):
        p = PositionParams(fix.rx_position, fix.rx_orientation, fix.clock_offset, nu.gains, fix.scatterers)
        return abs(pos_to_channel(p).delays[1] - m[3])

    assert resid(heavy) < resid(light)


def test_locate_round_trip_and_angle_wrapping(rng, X):
    nu = random_geometry(rng, 3, 0.0)
    paths = _paths(nu)
    fix = locate_from_paths(paths, X, 1e-9)
    assert fix.error(nu.rx_position) < 1e-8
    shifted = [PathEstimate(p.delay, p.aod + 2 * np.pi, p.aoa - 2 * np.pi, p.gain) for p in paths]
    fix2 = locate_from_paths(shifted, X, 1e-9)
    np.testing.assert_allclose(fix2.rx_position, fix.rx_position, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-8, 3e-7), st.floats(-3, 3), st.floats(-3, 3),
                          st.floats(0.01, 1.0)), min_size=1, max_size=5))
def test_los_path_never_dropped(raw):
    paths = [PathEstimate(t, a, b, g) for t, a, b, g in raw]
    ordered, order = select_los(paths)
    assert triangle_mask(ordered)[0]
    assert clock_consistency_mask(ordered, 1e-9)[0]


def test_los_only_fix(X):
    p = PathEstimate(1e-7, 0.3, 1.0, 1.0)
    fix = locate_from_paths([p], X, 1e-9)
    assert fix.los_only
    assert fix.clock_offset == 0
    np.testing.assert_allclose(fix.rx_position, SPEED_OF_LIGHT * 1e-7 * unit(0.3), atol=1e-9)
    # fixed clock error shows up in the reported spread
    assert fix.position_std >= SPEED_OF_LIGHT * 1e-9


def test_empty_paths_raise(X):
    with pytest.raises(NoDetectionError):
        locate_from_paths([], X, 1e-9)


def test_noise_only_block_raises(X, rng):
    cfg = default_config(X, threshold=1e6, tau_max=100e-9)
    shape = atom(0.0, 0.0, 0.0, X).shape
    Y = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    with pytest.raises(NoDetectionError):
        locate(Y, X, cfg, 1e-9)
