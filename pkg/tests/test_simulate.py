import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from bessgame.equilibrium import FeedbackPolicy, SymmetricGains, equilibrium_policy
from bessgame.model import Constant, MarketModel, TimeGrid
from bessgame.scenarios import baseline_market, baseline_theta, sample_heterogeneous_market
from bessgame.simulate import (
    Path,
    deterministic_TB,
    path_range,
    path_TC,
    pnl,
    quantile_bands,
    simulate_paths,
    stat_TB,
    stat_TC,
    stat_TS,
    summary_rows,
    write_paths_csv,
    write_summary_csv,
)
from markets import short_market

SHORT_GRID = TimeGrid(6.0, 600)


def zero_policy(model, horizon_steps=60):
    t = np.linspace(0.0, model.horizon, horizon_steps + 1)
    z = np.zeros_like(t)
    return FeedbackPolicy(model, "homogeneous", t, SymmetricGains(z, z, z, z))


@pytest.fixture(scope="module")
def short3():
    return short_market(baseline_market(3).agents)


@pytest.fixture(scope="module")
def short3_policy(short3):
    return equilibrium_policy(short3, TimeGrid(6.0, 1200))


@pytest.fixture(scope="module")
def calm():
    # no noise at all, supply starts at its constant mean
    ag = replace(baseline_market(1).agents[0], sigma=0.0)
    return MarketModel(agents=(ag,) * 2, theta=Constant(25.0), q0=25.0, sigma0=0.0, horizon=6.0)


# -- noise-free dynamics ----------------------------------------------------


def test_deterministic_paths_are_identical(calm):
    pol = equilibrium_policy(calm, TimeGrid(6.0, 1200))
    ens = simulate_paths(calm, pol, SHORT_GRID, n_paths=4, seed=9, keep_paths=True)
    P = ens.paths
    for key in ("Q", "S", "alpha", "price"):
        assert np.all(P[key] == P[key][0])
    np.testing.assert_array_equal(P["Q"][0], 25.0)
    assert np.all(ens.var["S"] == 0.0)


def test_deterministic_ou_flow():
    ag = replace(baseline_market(1).agents[0], sigma=0.0)
    m = MarketModel(agents=(ag,), theta=Constant(25.0), q0=15.0, sigma0=0.0, horizon=6.0)
    ens = simulate_paths(m, zero_policy(m), TimeGrid(6.0, 6000), n_paths=1, keep_paths=True)
    k = np.arange(6001)
    np.testing.assert_allclose(ens.paths["Q"][0], 25.0 - 10.0 * (1.0 - 5.0 * 1e-3) ** k, atol=1e-10)
    np.testing.assert_allclose(ens.paths["Q"][0], 25.0 - 10.0 * np.exp(-5.0 * ens.times), atol=1e-2)


def test_deterministic_statistics_match_single_path(calm):
    pol = equilibrium_policy(calm, TimeGrid(6.0, 1200))
    one = simulate_paths(calm, pol, SHORT_GRID, n_paths=1, cutoffs=(5.0,))
    many = simulate_paths(calm, pol, SHORT_GRID, n_paths=7, seed=3, cutoffs=(5.0,))
    for stat in (stat_TC, stat_TS, stat_TB):
        assert stat(many, 5.0) == pytest.approx(stat(one, 5.0), rel=1e-12)


def test_zero_policy_soc_mean():
    m = short_market(sample_heterogeneous_market(4, 2).agents)
    grid = TimeGrid(6.0, 6000)
    ens = simulate_paths(m, zero_policy(m), grid, n_paths=2, antithetic=True)
    # E[Q] solves the OU mean equation; E[S_T] = S_0 + int (a + b E[Q]) dt
    kappa, q0 = m.kappa, m.q0
    mean_q = lambda t: float(m.theta(t)) + (q0 - float(m.theta(t))) * math.exp(-kappa * t)
    for i, ag in enumerate(m.agents):
        integral, _ = quad(lambda t: float(ag.a(t)) + float(ag.b(t)) * mean_q(t), 0.0, 6.0, limit=200)
        assert ens.mean["S"][-1, i] == pytest.approx(ag.s0 + integral, abs=2e-3)


# -- reproducibility --------------------------------------------------------


def test_seed_determinism(short3, short3_policy):
    a = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=64, seed=42)
    b = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=64, seed=42)
    c = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=64, seed=43)
    for k in a.mean:
        np.testing.assert_array_equal(a.mean[k], b.mean[k])
        np.testing.assert_array_equal(a.var[k], b.var[k])
    np.testing.assert_array_equal(a.pnl.net, b.pnl.net)
    assert not np.array_equal(a.mean["Q"], c.mean["Q"])


def test_worker_count_does_not_change_results(short3, short3_policy):
    # 1100 paths span three batches
    serial = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=1100, seed=5, workers=1, track=False)
    parallel = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=1100, seed=5, workers=3, track=False)
    for k in serial.mean:
        np.testing.assert_array_equal(serial.mean[k], parallel.mean[k])
        np.testing.assert_array_equal(serial.var[k], parallel.var[k])
    for k in serial.metrics:
        np.testing.assert_array_equal(serial.metrics[k], parallel.metrics[k])


def test_path_is_independent_of_ensemble_size(short3, short3_policy):
    small = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=3, seed=8, keep_paths=True)
    large = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=9, seed=8, keep_paths=True)
    np.testing.assert_array_equal(small.paths["S"][2], large.paths["S"][2])


def test_soc_increments_telescope(short3, short3_policy):
    ens = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=5, seed=1, keep_paths=True)
    for p in range(5):
        path = ens.path(p)
        S = path.S
        np.testing.assert_array_equal(S[:-1] + path.increments, S[1:])


def test_policy_size_mismatch(short3, short3_policy):
    other = short_market(baseline_market(2).agents)
    with pytest.raises(ValueError, match="agents"):
        simulate_paths(other, short3_policy, SHORT_GRID, n_paths=2)


def test_prices_follow_the_price_map(short3, short3_policy):
    ens = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=2, seed=2, keep_paths=True)
    P = ens.paths
    want = 50.0 - (P["Q"][..., None] - P["alpha"].sum(axis=-1, keepdims=True))
    np.testing.assert_allclose(P["price"], np.broadcast_to(want, P["price"].shape), atol=1e-12)


# -- Monte Carlo accuracy ---------------------------------------------------


def test_strong_order(short3, short3_policy):
    n_paths, fine = 200, 3840
    z = np.random.default_rng(0).standard_normal((n_paths, fine, 4))
    ref = simulate_paths(short3, short3_policy, TimeGrid(6.0, fine), n_paths, normals=z, keep_paths=True, track=False)
    errors, steps = [], []
    for coarse in (60, 120, 240):
        r = fine // coarse
        zc = z.reshape(n_paths, coarse, r, 4).sum(axis=2) / math.sqrt(r)
        ens = simulate_paths(short3, short3_policy, TimeGrid(6.0, coarse), n_paths, normals=zc, keep_paths=True, track=False)
        diff = ens.paths["S"] - ref.paths["S"][:, ::r]
        errors.append(math.sqrt(np.mean(np.max(np.abs(diff), axis=1) ** 2)))
        steps.append(6.0 / coarse)
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    # additive noise gives order one; the half order is the guaranteed floor
    assert slope >= 0.5


def test_antithetic_pairs_reduce_variance(short3, short3_policy):
    plain, anti = [], []
    for seed in range(6):
        plain.append(simulate_paths(short3, short3_policy, SHORT_GRID, 40, seed, track=False).mean["Q"])
        anti.append(simulate_paths(short3, short3_policy, SHORT_GRID, 40, seed, antithetic=True, track=False).mean["Q"])
    v_plain = np.var(plain, axis=0)[1:].mean()
    v_anti = np.var(anti, axis=0)[1:].mean()
    assert v_anti <= 0.5 * v_plain


def test_antithetic_needs_even_count(short3, short3_policy):
    with pytest.raises(ValueError):
        simulate_paths(short3, short3_policy, SHORT_GRID, 3, antithetic=True)


# -- path statistics --------------------------------------------------------


def test_tc_constant_dispatch():
    t = np.linspace(0.0, 24.0, 2401)
    assert path_TC(t, np.full(t.shape, -0.7), 21.0) == pytest.approx(0.7 * 21.0)


def test_tc_sine_against_quadrature():
    t = np.linspace(0.0, 24.0, 24001)
    want, _ = quad(lambda x: abs(math.sin(math.pi * x / 12)), 0.0, 21.0, points=[12.0])
    assert path_TC(t, np.sin(np.pi * t / 12), 21.0) == pytest.approx(want, rel=1e-6)


def test_tc_partial_panel_cutoff():
    t = np.linspace(0.0, 24.0, 25)
    assert path_TC(t, t, 10.5) == pytest.approx(10.5**2 / 2)


def test_range_statistics():
    t = np.linspace(0.0, 24.0, 2401)
    assert path_range(t, np.full(t.shape, 5.0), 21.0) == 0.0
    assert path_range(t, 5 + np.sin(np.pi * t / 12), 21.0) == pytest.approx(2.0)


def test_no_storage_top_to_bottom(baseline8):
    assert deterministic_TB(baseline8) == pytest.approx(33.6, abs=0.05)
    t = np.linspace(0.0, 24.0, 200001)
    p = 50.0 - baseline_theta()(t)
    assert deterministic_TB(baseline8) == pytest.approx(p.max() - p.min(), abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5.0, 5.0), cutoff=st.floats(0.5, 24.0))
def test_tc_of_constant_property(c, cutoff):
    t = np.linspace(0.0, 24.0, 241)
    assert path_TC(t, np.full(t.shape, c), cutoff) == pytest.approx(abs(c) * cutoff, rel=1e-12, abs=1e-12)


# -- profit and loss --------------------------------------------------------


def _toy_path(alpha, price, S):
    t = np.array([0.0, 1.0])
    n = alpha.shape[1]
    return Path(t, np.zeros(2), S, alpha, price, np.diff(S, axis=0).reshape(1, n))


def test_pnl_one_step_revenue():
    m = MarketModel(agents=(replace(baseline_market(1).agents[0], c2=0.0, c3=0.0, c4=0.0),), horizon=1.0)
    path = _toy_path(np.full((2, 1), -1.0), np.full((2, 1), 20.0), np.full((2, 1), 5.0))
    out = pnl(path, m, 0)
    assert out.revenue == pytest.approx(20.0)
    assert out.total_cost == 0.0


def test_pnl_idle_agent():
    m = MarketModel(agents=(baseline_market(1).agents[0],), horizon=1.0)
    S = np.array([[5.0], [7.0]])
    out = pnl(_toy_path(np.zeros((2, 1)), np.full((2, 1), 30.0), S), m, 0)
    assert out.revenue == 0.0 and out.dispatch_cost == 0.0
    assert out.soc_cost == pytest.approx(0.25 * 0.5 * 4.0)
    assert out.terminal_cost == pytest.approx(100.0 * 4.0)


def test_pnl_matches_ensemble_accumulators(short3, short3_policy):
    ens = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=3, seed=4, keep_paths=True)
    for p in range(3):
        for i in range(3):
            one = pnl(ens.path(p), short3, i)
            assert one.revenue == pytest.approx(ens.pnl.revenue[p, i], rel=1e-10)
            assert one.terminal_cost == pytest.approx(ens.pnl.terminal_cost[p, i], rel=1e-10)
            assert one.net + one.total_cost == pytest.approx(one.revenue)


# -- bands and output -------------------------------------------------------


def test_normal_quantile_bands():
    draws = np.random.default_rng(0).standard_normal((100_000, 3))
    bands = quantile_bands(draws, levels=(0.9, 0.5))
    np.testing.assert_allclose(bands.upper[0.9], 1.6449, atol=0.02)
    np.testing.assert_allclose(bands.lower[0.9], -1.6449, atol=0.02)
    np.testing.assert_allclose(bands.median, np.median(draws, axis=0))
    np.testing.assert_allclose(bands.upper[0.5], 0.6745, atol=0.02)


def test_deterministic_bands_collapse(calm):
    pol = equilibrium_policy(calm, TimeGrid(6.0, 1200))
    ens = simulate_paths(calm, pol, SHORT_GRID, n_paths=5, track=True)
    bands = quantile_bands(ens, variable="S_1")
    for p in bands.levels:
        np.testing.assert_allclose(bands.lower[p], ens.mean["S"][:, 0], atol=1e-12)
        np.testing.assert_allclose(bands.upper[p], ens.mean["S"][:, 0], atol=1e-12)


def test_csv_outputs(tmp_path, short3, short3_policy):
    ens = simulate_paths(short3, short3_policy, SHORT_GRID, n_paths=4, seed=0, keep_paths=True)
    write_paths_csv(ens, tmp_path / "paths.csv")
    write_summary_csv(ens, tmp_path / "summary.csv")
    header = (tmp_path / "paths.csv").read_text().splitlines()[0].split(",")
    assert header == ["path_id", "t", "Q", "S_1", "S_2", "S_3", "alpha_1", "alpha_2", "alpha_3", "P_1", "P_2", "P_3"]
    assert len((tmp_path / "paths.csv").read_text().splitlines()) == 1 + 4 * 601
    head = (tmp_path / "summary.csv").read_text().splitlines()[0].split(",")
    assert head == ["t", "variable", "mean", "std", "q05", "q10", "q20", "q80", "q90", "q95"]
    assert len(list(summary_rows(ens))) > 0
