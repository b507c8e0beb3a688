"""Reference markets: the CAISO-style baseline, two-class markets and random draws."""

from __future__ import annotations

import math

import numpy as np

from .model import AgentParams, ClampedSinusoid, Constant, MarketModel, PiecewiseLinear, SinusoidSum

BASE_PRICE = 50.0
HORIZON = 24.0


def baseline_theta() -> SinusoidSum:
    """Average net supply: 30 - 14 sin(pi t/12 + 2pi/3) - 7 sin(pi t/6 - 7pi/24)."""
    return SinusoidSum(
        30.0,
        ((-14.0, math.pi / 12.0, 16.0 * math.pi / 24.0), (-7.0, math.pi / 6.0, -7.0 * math.pi / 24.0)),
    )


def solar_intercept(scale: float = 1.0) -> ClampedSinusoid:
    """Self-generation intercept a(t) = max(0, 0.2 sin(0.075 pi t - 2 pi/5))."""
    return ClampedSinusoid(0.2 * scale, 0.075 * math.pi, -2.0 * math.pi / 5.0, 0.0)


def solar_loading(scale: float = 1.0) -> PiecewiseLinear:
    """Loading b(t) on net supply: ramps 5:20-8:00, plateau 0.008 until 16:00, down by 18:40."""
    top = 0.008 * scale
    return PiecewiseLinear(
        ((0.0, 0.0), (16.0 / 3.0, 0.0), (8.0, top), (16.0, top), (56.0 / 3.0, 0.0), (HORIZON, 0.0))
    )


def hybrid_agent(**overrides) -> AgentParams:
    params = dict(
        a=solar_intercept(),
        b=solar_loading(),
        sigma=0.5,
        rho=0.6,
        p_bar=BASE_PRICE,
        c1=1.0,
        c2=0.1,
        c3=0.25,
        c4=100.0,
        zeta=Constant(5.0),
        s0=5.0,
    )
    params.update(overrides)
    return AgentParams(**params)


def arbitrageur_agent(**overrides) -> AgentParams:
    overrides = {"a": Constant(0.0), "b": Constant(0.0), **overrides}
    return hybrid_agent(**overrides)


def baseline_market(n: int = 8, **agent_overrides) -> MarketModel:
    """Homogeneous hybrid market with the reference cost and noise parameters."""
    theta = baseline_theta()
    agent = hybrid_agent(**agent_overrides)
    return MarketModel(
        agents=(agent,) * n,
        kappa=5.0,
        theta=theta,
        sigma0=5.0,
        q0=round(float(theta(0.0)), 2),
        horizon=HORIZON,
    )


def two_class_market(n_hybrid: int, n_arb: int, base: MarketModel | None = None) -> MarketModel:
    """``n_hybrid`` self-generating operators followed by ``n_arb`` pure arbitrageurs."""
    if n_hybrid < 0 or n_arb < 0 or n_hybrid + n_arb < 1:
        raise ValueError("need a non-negative split with at least one agent")
    base = base or baseline_market(1)
    hyb = base.agents[0]
    arb = AgentParams(**{**hyb.__dict__, "a": Constant(0.0), "b": Constant(0.0)})
    agents = (hyb,) * n_hybrid + (arb,) * n_arb
    return base.with_agents(agents)


def sample_heterogeneous_market(seed: int, n: int = 10) -> MarketModel:
    """Operators differing in generation size, noise correlation and SOC penalty.

    Generation capacity G has natural log uniform on (-1, 1); sigma = sqrt(G) and
    both a(t), b(t) scale with G. rho ~ U(0, 0.9), c3 ~ U(0.1, 1).
    """
    rng = np.random.default_rng(seed)
    g = np.exp(rng.uniform(-1.0, 1.0, size=n))
    rho = rng.uniform(0.0, 0.9, size=n)
    c3 = rng.uniform(0.1, 1.0, size=n)
    agents = tuple(
        hybrid_agent(
            a=solar_intercept(g[i]),
            b=solar_loading(g[i]),
            sigma=math.sqrt(g[i]),
            rho=float(rho[i]),
            c3=float(c3[i]),
        )
        for i in range(n)
    )
    market = baseline_market(1).with_agents(agents)
    return market


def generation_sizes(seed: int, n: int = 10) -> np.ndarray:
    """The capacity draws G used by :func:`sample_heterogeneous_market` for ``seed``."""
    rng = np.random.default_rng(seed)
    return np.exp(rng.uniform(-1.0, 1.0, size=n))


def sample_theta_market(seed: int, n: int = 10) -> MarketModel:
    """Identical operators facing a random supply curve and random symmetric weights."""
    rng = np.random.default_rng(seed)
    level = rng.uniform(25.0, 35.0)
    a1 = rng.uniform(18.0, 26.0)
    a2 = rng.uniform(6.0, 10.0)
    f1 = rng.uniform(12.0, 18.0)
    f2 = rng.uniform(-9.0, -5.0)
    theta = SinusoidSum(
        level,
        ((-a1, math.pi / 12.0, math.pi * f1 / 24.0), (-a2, math.pi / 6.0, math.pi * f2 / 24.0)),
    )
    w = np.ones((n, n))
    iu = np.triu_indices(n, k=1)
    w[iu] = rng.uniform(0.5, 1.0, size=len(iu[0]))
    w.T[iu] = w[iu]
    base = baseline_market(n)
    return MarketModel(
        agents=base.agents,
        kappa=base.kappa,
        theta=theta,
        sigma0=base.sigma0,
        q0=float(theta(0.0)),
        horizon=base.horizon,
        weights=w,
    )
