import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamloc.fisher import (SingularFimError, channel_fim, hybrid_fim, marginalize_gains,
                            observation_fim, position_crb, prior_fim, speb)
from beamloc.geometry import pos_to_channel
from conftest import random_geometry, tiny_system
from oracles import fd_channel_fim, fd_observation_fim


def _X():
    system = tiny_system()
    return system, system.reference(np.full(8, 1 / 8))


def test_channel_fim_matches_finite_differences(rng):
    system, X = _X()
    for _ in range(5):
        ch = pos_to_channel(random_geometry(rng, 3, clock=1e-9))
        J = channel_fim(X, ch, system.noise_variance)
        Jfd = fd_channel_fim(X, ch, system.noise_variance)
        d = np.sqrt(np.diag(J))
        assert np.abs((J - Jfd) / np.outer(d, d)).max() < 1e-4


def test_observation_fim_matches_finite_differences(rng):
    system, X = _X()
    for _ in range(5):
        nu = random_geometry(rng, 3, clock=1e-9)
        J = observation_fim(X, nu, system.noise_variance)
        Jfd = fd_observation_fim(X, nu, system.noise_variance)
        d = np.sqrt(np.diag(J))
        assert np.abs((J - Jfd) / np.outer(d, d)).max() < 1e-4


def test_fim_scales_inversely_with_noise(rng):
    system, X = _X()
    ch = pos_to_channel(random_geometry(rng, 2))
    np.testing.assert_allclose(channel_fim(X, ch, 1e-9), 2 * channel_fim(X, ch, 2e-9))


def test_marginalized_fim_not_larger(rng):
    system, X = _X()
    ch = pos_to_channel(random_geometry(rng, 2))
    J = channel_fim(X, ch, system.noise_variance)
    S = marginalize_gains(J)
    keep = [i for i in range(J.shape[0]) if i % 5 < 3]
    w = np.linalg.eigvalsh(J[np.ix_(keep, keep)] - S)
    assert w.min() > -1e-9 * np.abs(w).max()


def test_prior_only_adds_clock_information():
    P = prior_fim(6, 2e-9)
    assert P[3, 3] == pytest.approx(1 / 4e-18)
    assert np.count_nonzero(P) == 1


def test_speb_equals_trace_of_position_crb(rng):
    system, X = _X()
    nu = random_geometry(rng, 3)
    J = hybrid_fim(observation_fim(X, nu, system.noise_variance), 8e-9)
    assert speb(J).speb == pytest.approx(np.trace(position_crb(J)), rel=1e-10)
    assert speb(J).peb == pytest.approx(np.sqrt(speb(J).speb))


def test_singular_fim_raises():
    with pytest.raises(SingularFimError):
        speb(np.diag([1.0, 0.0, 1.0]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_more_power_lowers_speb(seed):
    rng = np.random.default_rng(seed)
    system, X = _X()
    nu = random_geometry(rng, 2)
    J1 = hybrid_fim(observation_fim(X, nu, system.noise_variance), 8e-9)
    X2 = system.with_power(2 * system.total_power).reference(np.full(8, 1 / 8))
    J2 = hybrid_fim(observation_fim(X2, nu, system.noise_variance), 8e-9)
    assert speb(J2).speb <= speb(J1).speb * (1 + 1e-9)
