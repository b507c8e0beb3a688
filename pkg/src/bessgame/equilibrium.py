"""Equilibrium feedback controls, value functions and prices from a solved system.

Every equilibrium policy here is affine in the state,

    alpha = k1(t) q - K2(t) s - k3(t),

so a policy is a table of gains on a uniform time grid. Identical-agent
policies keep the gains in symmetric form (one own-SOC and one cross-SOC
coefficient) so that large N never materializes N x N tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._numerics import interp_rows
from .errors import DomainError
from .model import MarketModel, TimeGrid
from .riccati_general import GeneralSolution, solve_general
from .riccati_homogeneous import HomogeneousSolution, _g_values, solve_homogeneous


def _check_time(model: MarketModel, t: float) -> None:
    if not (-1e-12 <= t <= model.horizon + 1e-12):
        raise DomainError(f"t={t} outside [0, {model.horizon}]")


@dataclass(frozen=True, eq=False)
class DenseGains:
    """alpha = k1 q - K2 s - k3 with full matrices."""

    k1: np.ndarray  # (n_t, N)
    K2: np.ndarray  # (n_t, N, N)
    k3: np.ndarray  # (n_t, N)

    def resample(self, t_src: np.ndarray, times: np.ndarray) -> "DenseGains":
        h = t_src[1] - t_src[0]
        return DenseGains(*(np.stack([interp_rows(a, float(t), t_src[0], h) for t in times]) for a in (self.k1, self.K2, self.k3)))

    def control(self, k: int, q: np.ndarray, S: np.ndarray) -> np.ndarray:
        return q[..., None] * self.k1[k] - S @ self.K2[k].T - self.k3[k]

    def dense(self, k: int, n: int):
        return self.k1[k], self.K2[k], self.k3[k]


@dataclass(frozen=True, eq=False)
class SymmetricGains:
    """alpha_i = q1 q + own s_i + cross sum_{j != i} s_j + const, identical for every agent."""

    q1: np.ndarray  # (n_t,)
    own: np.ndarray
    cross: np.ndarray
    const: np.ndarray

    def resample(self, t_src: np.ndarray, times: np.ndarray) -> "SymmetricGains":
        h = t_src[1] - t_src[0]
        table = np.stack([self.q1, self.own, self.cross, self.const], axis=1)
        out = np.stack([interp_rows(table, float(t), t_src[0], h) for t in times])
        return SymmetricGains(*out.T.copy())

    def control(self, k: int, q: np.ndarray, S: np.ndarray) -> np.ndarray:
        cross = self.cross[k]
        return (
            (self.q1[k] * q)[..., None]
            + (self.own[k] - cross) * S
            + cross * S.sum(axis=-1, keepdims=True)
            + self.const[k]
        )

    def dense(self, k: int, n: int):
        own, cross = self.own[k], self.cross[k]
        K2 = -(own - cross) * np.eye(n) - cross * np.ones((n, n))
        return np.full(n, self.q1[k]), K2, np.full(n, -self.const[k])


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Markov feedback of every agent, evaluable at any t in [0, T]."""

    model: MarketModel
    source: str  # "general", "homogeneous" or "expansion"
    t: np.ndarray
    gains: DenseGains | SymmetricGains
    solution: object = None
    order: int | None = None
    bumps: tuple = field(default=())  # (agent, eps, callable) additive perturbations

    @property
    def n_agents(self) -> int:
        return self.model.n_agents

    @classmethod
    def from_general(cls, sol: GeneralSolution) -> "FeedbackPolicy":
        k1, K2, k3 = sol.gain_tables()
        return cls(sol.model, "general", sol.t, DenseGains(k1, K2, k3), sol)

    @classmethod
    def from_homogeneous(cls, sol: HomogeneousSolution) -> "FeedbackPolicy":
        g = sol.g_table()
        return cls(sol.model, "homogeneous", sol.t, SymmetricGains(g[:, 0], g[:, 1], g[:, 2], g[:, 3]), sol)

    @classmethod
    def from_expansion(cls, coeffs, model: MarketModel, order: int = 2) -> "FeedbackPolicy":
        from .asymptotics import expansion_gains

        q1, own, cross, const = expansion_gains(coeffs, model.n_agents, order)
        return cls(model, "expansion", coeffs.t, SymmetricGains(q1, own, cross, const), coeffs, order)

    def with_bump(self, agent: int, eps: float, bump: Callable[[np.ndarray], np.ndarray]) -> "FeedbackPolicy":
        """Add ``eps * bump(t)`` to one agent's control (0-based ``agent``)."""
        return FeedbackPolicy(
            self.model, self.source, self.t, self.gains, self.solution, self.order, self.bumps + ((agent, eps, bump),)
        )

    def on_grid(self, times: np.ndarray) -> "GridPolicy":
        """Gains resampled onto ``times`` for fast repeated evaluation."""
        times = np.asarray(times, dtype=float)
        if times.min() < -1e-12 or times.max() > self.model.horizon + 1e-12:
            raise DomainError("evaluation grid leaves [0, T]")
        h = self.t[1] - self.t[0]
        ratio = (times - self.t[0]) / h
        if np.allclose(ratio, np.round(ratio), atol=1e-9, rtol=0):
            idx = np.round(ratio).astype(int)
            g = self.gains
            if isinstance(g, DenseGains):
                gains = DenseGains(g.k1[idx], g.K2[idx], g.k3[idx])
            else:
                gains = SymmetricGains(g.q1[idx], g.own[idx], g.cross[idx], g.const[idx])
        else:
            gains = self.gains.resample(self.t, times)
        extra = np.zeros((len(times), self.n_agents))
        for agent, eps, bump in self.bumps:
            extra[:, agent] += eps * np.asarray(bump(times), dtype=float)
        return GridPolicy(times, gains, extra if self.bumps else None)

    def control(self, t: float, q, s) -> np.ndarray:
        """Controls of all agents at time ``t``; ``q`` (...), ``s`` (..., N)."""
        _check_time(self.model, t)
        gp = self.on_grid(np.array([t]))
        return gp.control(0, np.asarray(q, dtype=float), np.asarray(s, dtype=float))

    def gains_at(self, t: float):
        """Dense (k1, K2, k3) at time ``t``."""
        _check_time(self.model, t)
        return self.on_grid(np.array([t])).gains.dense(0, self.n_agents)


def equilibrium_policy(model: MarketModel, grid: TimeGrid | None = None, force_general: bool = False, store_every=None):
    """Solve ``model`` and wrap the result as a policy.

    Identical agents with uniform weights go through the reduced solver unless
    ``force_general`` is set.
    """
    if model.is_homogeneous and not force_general:
        return FeedbackPolicy.from_homogeneous(solve_homogeneous(model, grid, store_every or 1))
    return FeedbackPolicy.from_general(solve_general(model, grid, store_every))


@dataclass(frozen=True, eq=False)
class GridPolicy:
    times: np.ndarray
    gains: DenseGains | SymmetricGains
    extra: np.ndarray | None = None

    def control(self, k: int, q: np.ndarray, S: np.ndarray) -> np.ndarray:
        a = self.gains.control(k, q, S)
        if self.extra is not None:
            a = a + self.extra[k]
        return a


# --------------------------------------------------------------------------
# Pointwise evaluation from stored coefficients
# --------------------------------------------------------------------------


def _require(policy: FeedbackPolicy, kind):
    if not isinstance(policy.solution, kind):
        raise TypeError(f"policy was not built from a {kind.__name__}")
    return policy.solution


def control_general(policy: FeedbackPolicy, i: int, t: float, q: float, s) -> float:
    """Agent ``i``'s control from the first-order conditions, 0-based ``i``.

    alpha_i = m_i diag(d)^-1 (c1 q - grad - P_bar), grad_j = d V^j / d s_j.
    """
    sol = _require(policy, GeneralSolution)
    _check_time(sol.model, t)
    c = sol.coefficients_at(t)
    s = np.asarray(s, dtype=float)
    n = sol.n_agents
    idx = np.arange(n)
    grad = 2.0 * c["p"][idx, idx] * q + 2.0 * np.einsum("ij,j->i", c["P"][idx, idx, :], s) + c["r"][idx, idx]
    model = sol.model
    inter = sol.interaction
    rhs = (model.vector("c1") * q - grad - model.vector("p_bar")) / inter.d
    return float(inter.m_matrix[i] @ rhs)


def control_homogeneous(policy: FeedbackPolicy, t: float, q: float, s_i: float, sum_others: float) -> float:
    sol = _require(policy, HomogeneousSolution)
    _check_time(sol.model, t)
    c = sol.coefficients_at(t)
    g1, g2, g3, g4 = _g_values(sol.constants, c["p2"], c["p4"], c["p5"], c["r2"])[:4]
    return g1 * q + g2 * s_i + g3 * sum_others + g4


def value_general(policy: FeedbackPolicy, i: int, t: float, q: float, s) -> float:
    sol = _require(policy, GeneralSolution)
    _check_time(sol.model, t)
    c = sol.coefficients_at(t)
    s = np.asarray(s, dtype=float)
    return float(
        c["p0"][i] * q * q
        + 2.0 * q * (c["p"][i] @ s)
        + s @ c["P"][i] @ s
        + c["r0"][i] * q
        + c["r"][i] @ s
        + c["u"][i]
    )


def value_homogeneous(policy: FeedbackPolicy, t: float, q: float, s_i: float, s_others) -> float:
    sol = _require(policy, HomogeneousSolution)
    _check_time(sol.model, t)
    c = sol.coefficients_at(t)
    so = np.asarray(s_others, dtype=float)
    tot = so.sum()
    quad_others = (c["p7"] - c["p6"]) * (so @ so) + c["p6"] * tot * tot
    return (
        c["p1"] * q * q
        + 2.0 * c["p2"] * s_i * q
        + 2.0 * c["p3"] * tot * q
        + c["p4"] * s_i * s_i
        + 2.0 * c["p5"] * s_i * tot
        + quad_others
        + c["r1"] * q
        + c["r2"] * s_i
        + c["r3"] * tot
        + c["u"]
    )


def price(model: MarketModel, q, alphas) -> np.ndarray:
    """Agent-specific prices P^i = P_bar^i - c1^i (q - w_i' alpha); broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    return model.vector("p_bar") - model.vector("c1") * (q[..., None] - alphas @ model.W.T)


def system_price(model: MarketModel, q, alphas) -> np.ndarray:
    """Single market price with all-ones weights, P_bar - c1 (q - sum alpha), using agent 1's constants."""
    ag = model.agents[0]
    q = np.asarray(q, dtype=float)
    return ag.p_bar - ag.c1 * (q - np.asarray(alphas, dtype=float).sum(axis=-1))


# --------------------------------------------------------------------------
# Verification helpers
# --------------------------------------------------------------------------


def _node_derivative(arr: np.ndarray, k: int, h: float) -> np.ndarray:
    """Fourth-order central difference of stored rows at interior node ``k``."""
    return (-arr[k + 2] + 8.0 * arr[k + 1] - 8.0 * arr[k - 1] + arr[k - 2]) / (12.0 * h)


def hjb_residual(sol: GeneralSolution, i: int, k: int, q: float, s) -> tuple[float, float]:
    """Residual of agent i's HJB equation at stored node ``k`` and state (q, s).

    The time derivative is a finite difference of the stored coefficients; the
    Hamiltonian uses the model dynamics and costs directly. Returns
    ``(residual, value)``.
    """
    model = sol.model
    n = sol.n_agents
    h = sol.t_step
    t = float(sol.t[k])
    s = np.asarray(s, dtype=float)
    blocks = {name: getattr(sol, name) for name in ("P", "p", "r", "p0", "r0", "u")}
    d = {name: _node_derivative(arr, k, h) for name, arr in blocks.items()}
    c = {name: arr[k] for name, arr in blocks.items()}
    dV = d["p0"][i] * q * q + 2.0 * q * (d["p"][i] @ s) + s @ d["P"][i] @ s + d["r0"][i] * q + d["r"][i] @ s + d["u"][i]
    V = c["p0"][i] * q * q + 2.0 * q * (c["p"][i] @ s) + s @ c["P"][i] @ s + c["r0"][i] * q + c["r"][i] @ s + c["u"][i]
    Vq = 2.0 * c["p0"][i] * q + 2.0 * c["p"][i] @ s + c["r0"][i]
    Vs = 2.0 * c["p"][i] * q + 2.0 * c["P"][i] @ s + c["r"][i]
    H = np.zeros((n + 1, n + 1))
    H[0, 0] = c["p0"][i]
    H[0, 1:] = H[1:, 0] = c["p"][i]
    H[1:, 1:] = c["P"][i]
    idx = np.arange(n)
    k1 = sol.interaction.m_matrix @ ((model.vector("c1") - 2.0 * c["p"][idx, idx]) / sol.interaction.d)
    K2 = sol.interaction.m_matrix @ (2.0 * c["P"][idx, idx, :] / sol.interaction.d[:, None])
    k3 = sol.interaction.m_matrix @ ((c["r"][idx, idx] + model.vector("p_bar")) / sol.interaction.d)
    alpha = k1 * q - K2 @ s - k3
    ag = model.agents[i]
    pr = price(model, q, alpha)[i]
    a = model.curves_at("a", t)
    b = model.curves_at("b", t)
    zeta = float(ag.zeta(t))
    sig = np.asarray(_noise_cov(model))
    ham = (
        pr * alpha[i]
        + ag.c2 * alpha[i] ** 2
        + ag.c3 * (s[i] - zeta) ** 2
        + Vq * model.kappa * (float(model.theta(t)) - q)
        + Vs @ (a + b * q + alpha)
        + np.trace(sig @ H)
    )
    return float(dV + ham), float(V)


def _noise_cov(model: MarketModel) -> np.ndarray:
    from .model import build_noise

    s = build_noise(model)
    return s @ s.T


def foc_residual(sol: GeneralSolution, i: int, t: float, q: float, s) -> float:
    """d/d alpha_i of agent i's Hamiltonian at the equilibrium, others frozen."""
    model = sol.model
    c = sol.coefficients_at(t)
    s = np.asarray(s, dtype=float)
    inter = sol.interaction
    n = sol.n_agents
    idx = np.arange(n)
    k1 = inter.m_matrix @ ((model.vector("c1") - 2.0 * c["p"][idx, idx]) / inter.d)
    K2 = inter.m_matrix @ (2.0 * c["P"][idx, idx, :] / inter.d[:, None])
    k3 = inter.m_matrix @ ((c["r"][idx, idx] + model.vector("p_bar")) / inter.d)
    alpha = k1 * q - K2 @ s - k3
    ag = model.agents[i]
    w = model.W
    pr = price(model, q, alpha)[i]
    dVs_i = 2.0 * c["p"][i][i] * q + 2.0 * c["P"][i][i] @ s + c["r"][i][i]
    return float(pr + ag.c1 * w[i, i] * alpha[i] + 2.0 * ag.c2 * alpha[i] + dVs_i)
