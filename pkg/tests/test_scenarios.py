import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bessgame.model import validate_market
from bessgame.scenarios import (
    baseline_market,
    baseline_theta,
    generation_sizes,
    sample_heterogeneous_market,
    sample_theta_market,
    solar_intercept,
    solar_loading,
    two_class_market,
)


def test_reference_parameters(baseline8):
    ag = baseline8.agents[0]
    assert (ag.p_bar, ag.c1, ag.c2, ag.c3, ag.c4) == (50.0, 1.0, 0.1, 0.25, 100.0)
    assert (ag.sigma, ag.rho, ag.s0) == (0.5, 0.6, 5.0)
    assert ag.zeta(12.0) == 5.0
    assert (baseline8.kappa, baseline8.sigma0, baseline8.q0, baseline8.horizon) == (5.0, 5.0, 23.43, 24.0)
    assert baseline8.n_agents == 8


def test_supply_peaks_mid_morning():
    t = np.linspace(0.0, 24.0, 24 * 60 + 1)
    assert t[np.argmax(baseline_theta()(t))] == pytest.approx(10.5, abs=0.1)


def test_generation_shapes():
    assert solar_loading()(12.0) == pytest.approx(0.008)
    assert solar_loading()(2.0) == 0.0
    assert solar_intercept()(0.0) == 0.0
    a = solar_intercept()(np.linspace(0, 24, 97))
    assert a.min() >= 0.0 and a.max() <= 0.2 + 1e-12


def test_theta_formula():
    t = 7.3
    want = 30 - 14 * math.sin(math.pi * t / 12 + 2 * math.pi / 3) - 7 * math.sin(math.pi * t / 6 - 7 * math.pi / 24)
    assert baseline_theta()(t) == pytest.approx(want)


def test_two_class_split():
    m = two_class_market(4, 12)
    assert m.n_agents == 16
    assert all(not a.is_arbitrageur for a in m.agents[:4])
    assert all(a.is_arbitrageur for a in m.agents[4:])
    assert m.agents[5].sigma == m.agents[0].sigma
    assert all(a.is_arbitrageur for a in two_class_market(0, 3).agents)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_heterogeneous_sampler(seed, n):
    m = sample_heterogeneous_market(seed, n)
    validate_market(m)
    g = generation_sizes(seed, n)
    assert np.all((g >= math.exp(-1)) & (g <= math.e))
    for gi, ag in zip(g, m.agents):
        assert ag.sigma == pytest.approx(math.sqrt(gi))
        assert 0.0 <= ag.rho <= 0.9
        assert 0.1 <= ag.c3 <= 1.0
        assert ag.b(12.0) == pytest.approx(0.008 * gi)
    assert sample_heterogeneous_market(seed, n) == m


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
def test_theta_sampler(seed, n):
    m = sample_theta_market(seed, n)
    validate_market(m)
    w = m.W
    np.testing.assert_array_equal(w, w.T)
    np.testing.assert_array_equal(np.diag(w), 1.0)
    off = w[~np.eye(n, dtype=bool)]
    assert off.min() >= 0.5 and off.max() <= 1.0
    assert all(a == m.agents[0] for a in m.agents)
    assert m.agents[0] == baseline_market(1).agents[0]
    assert sample_theta_market(seed, n) == m
