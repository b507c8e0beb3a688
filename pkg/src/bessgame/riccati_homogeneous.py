"""Reduced Riccati system for a market of identical agents.

With identical agents and all-ones weights, agent i's value function only
depends on q, its own SOC s_i and the SOCs of the others through

    V(t, q, s_i, s_-i) = p1 q^2 + 2 p2 s_i q + 2 p3 (1's_-i) q + p4 s_i^2
                         + 2 p5 s_i (1's_-i) + s_-i' ((p7 - p6) I + p6 J) s_-i
                         + r1 q + r2 s_i + r3 (1's_-i) + u

so eleven scalar ODEs replace the N^3 + 2N^2 + 3N of the general system,
whatever N is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._numerics import compatible_stride, half_step_times, integrate_backward, interp_rows
from .errors import NotHomogeneousError, RiccatiBlowUpError
from .model import MarketModel, TimeGrid, validate_market
from .riccati_general import DEFAULT_DT, WellposednessBound

COEFF_NAMES = ("p1", "p2", "p3", "p4", "p5", "p6", "p7", "r1", "r2", "r3", "u")
G_NAMES = ("g1", "g2", "g3", "g4", "g5", "g6", "g7", "g8")


@dataclass(frozen=True)
class HomogeneousConstants:
    n: int
    c1: float
    c2: float
    c3: float
    c4: float
    p_bar: float
    d: float
    eta0: float
    eta1: float

    @classmethod
    def from_model(cls, model: MarketModel) -> "HomogeneousConstants":
        ag = model.agents[0]
        n = model.n_agents
        d = ag.c1 + 2.0 * ag.c2
        # group N c1 / d first so very large N stays finite
        eta1 = 1.0 + n * (ag.c1 / d)
        return cls(n, ag.c1, ag.c2, ag.c3, ag.c4, ag.p_bar, d, n * ag.p_bar / d, eta1)


@dataclass(frozen=True)
class GCoeffs:
    """Feedback coefficients: alpha_i = g1 q + g2 s_i + g3 sum_{j != i} s_j + g4."""

    g1: float
    g2: float
    g3: float
    g4: float
    g5: float
    g6: float
    g7: float
    g8: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g1, self.g2, self.g3, self.g4, self.g5, self.g6, self.g7, self.g8])


def _g_values(k: HomogeneousConstants, p2, p4, p5, r2):
    """g1..g8 from the coefficients they depend on. Works on floats or arrays."""
    n, c1, d, e1 = k.n, k.c1, k.d, k.eta1
    agg = p4 + (n - 1) * p5
    g1 = c1 / (d * e1) + 2.0 * n * c1 * p2 / (d * d * e1) - 2.0 * p2 / d
    common = 2.0 * c1 * agg / (d * d * e1)
    g2 = common - 2.0 * p4 / d
    g3 = common - 2.0 * p5 / d
    g4 = n * c1 * r2 / (d * d * e1) + c1 * k.eta0 / (d * e1) - (r2 + k.p_bar) / d
    g5 = (1.0 + 2.0 * n * p2 / d) / e1
    g6 = 2.0 * agg / (d * e1)
    g8 = n * r2 / (d * e1) + k.eta0 / e1
    return g1, g2, g3, g4, g5, g6, g6, g8


class _HomogeneousRHS:
    def __init__(self, model: MarketModel, grid: TimeGrid, p_block_only: bool = False):
        ag = model.agents[0]
        self.k = HomogeneousConstants.from_model(model)
        self.kappa = model.kappa
        self.p_block_only = p_block_only
        ts = half_step_times(grid)
        ts[-1] = 0.0
        self.theta = np.broadcast_to(model.theta(ts), ts.shape).tolist()
        self.a = np.broadcast_to(ag.a(ts), ts.shape).tolist()
        self.b = np.broadcast_to(ag.b(ts), ts.shape).tolist()
        self.zeta = np.broadcast_to(ag.zeta(ts), ts.shape).tolist()
        s0, s, rho = model.sigma0, ag.sigma, ag.rho
        n = self.k.n
        # Tr(Sigma Sigma' H) for the reduced quadratic form H
        self.tr_p1 = s0 * s0
        self.tr_p2 = 2.0 * s0 * s * rho
        self.tr_p3 = 2.0 * s0 * s * rho * (n - 1)
        self.tr_p4 = s * s
        self.tr_p7 = s * s * (n - 1)
        self.tr_p5 = s * s * rho * rho * 2.0 * (n - 1)
        self.tr_p6 = s * s * rho * rho * (n - 1) * (n - 2)

    def p_block(self, p4, p5, p6, p7):
        k = self.k
        n, c1, c2 = k.n, k.c1, k.c2
        _, g2, g3, _, _, g6, g7, _ = _g_values(k, 0.0, p4, p5, 0.0)
        h2h6 = 2.0 * p4 * g2 + 2.0 * (n - 1) * p5 * g3
        d4 = -c1 * g2 * g6 + c2 * g2 * g2 + k.c3 + h2h6
        d5 = (
            -0.5 * c1 * (g2 * g7 + g3 * g6)
            + c2 * g2 * g3
            + p4 * g3
            + p5 * g2
            + (n - 2) * p5 * g3
            + g2 * p5
            + g3 * p7
            + (n - 2) * g3 * p6
        )
        base = -c1 * g3 * g7 + c2 * g3 * g3 + 2.0 * p5 * g3
        d6 = base + 2.0 * (p6 * g2 + p7 * g3 + (n - 3) * p6 * g3)
        d7 = base + 2.0 * (p7 * g2 + (n - 2) * p6 * g3)
        return d4, d5, d6, d7

    def __call__(self, j: int, y: np.ndarray) -> np.ndarray:
        if self.p_block_only:
            return np.array(self.p_block(*y.tolist()))
        p1, p2, p3, p4, p5, p6, p7, r1, r2, r3, u = y.tolist()
        k = self.k
        n, c1, c2, c3, pbar, kappa = k.n, k.c1, k.c2, k.c3, k.p_bar, self.kappa
        theta, a, b, zeta = self.theta[j], self.a[j], self.b[j], self.zeta[j]
        g1, g2, g3, g4, g5, g6, g7, g8 = _g_values(k, p2, p4, p5, r2)
        m = n - 1
        # inner products of the h-vectors
        h1h5 = (2.0 * p2 + 2.0 * m * p3) * (g1 + b)
        h1h6 = 2.0 * p2 * g2 + 2.0 * m * p3 * g3
        h2h5 = (2.0 * p4 + 2.0 * m * p5) * (g1 + b)
        h1h8 = (2.0 * p2 + 2.0 * m * p3) * (g4 + a)
        h4h5 = (r2 + m * r3) * (g1 + b)
        h2h8 = (2.0 * p4 + 2.0 * m * p5) * (g4 + a)
        h4h6 = r2 * g2 + m * r3 * g3
        h4h8 = (r2 + m * r3) * (g4 + a)

        d1 = -c1 * g1 * g5 + c2 * g1 * g1 - 2.0 * kappa * p1 + h1h5
        d2 = -0.5 * c1 * (g1 * g6 + g2 * g5) + c2 * g1 * g2 - kappa * p2 + 0.5 * h1h6 + 0.5 * h2h5
        d3 = (
            -0.5 * c1 * (g1 * g7 + g3 * g5)
            + c2 * g1 * g3
            - kappa * p3
            + p2 * g3
            + p3 * g2
            + (n - 2) * p3 * g3
            + (g1 + b) * (p5 + p7 + (n - 2) * p6)
        )
        d4, d5, d6, d7 = self.p_block(p4, p5, p6, p7)
        e1 = pbar * g1 - c1 * (g4 * g5 + g1 * g8) + 2.0 * c2 * g1 * g4 + 2.0 * kappa * p1 * theta - kappa * r1 + h1h8 + h4h5
        e2 = (
            pbar * g2
            - c1 * (g4 * g6 + g2 * g8)
            + 2.0 * c2 * g2 * g4
            - 2.0 * c3 * zeta
            + 2.0 * kappa * p2 * theta
            + h2h8
            + h4h6
        )
        e3 = (
            pbar * g3
            - c1 * (g4 * g7 + g3 * g8)
            + 2.0 * c2 * g3 * g4
            + 2.0 * kappa * p3 * theta
            + r2 * g3
            + r3 * g2
            + (n - 2) * r3 * g3
            + (g4 + a) * (2.0 * p5 + 2.0 * p7 + 2.0 * (n - 2) * p6)
        )
        trace = (
            self.tr_p1 * p1
            + self.tr_p2 * p2
            + self.tr_p3 * p3
            + self.tr_p4 * p4
            + self.tr_p7 * p7
            + self.tr_p5 * p5
            + self.tr_p6 * p6
        )
        du = pbar * g4 - c1 * g4 * g8 + c2 * g4 * g4 + c3 * zeta * zeta + kappa * theta * r1 + h4h8 + trace
        return np.array([d1, d2, d3, d4, d5, d6, d7, e1, e2, e3, du])


def require_homogeneous(model: MarketModel) -> None:
    if not model.is_homogeneous:
        raise NotHomogeneousError("homogeneous solver requires identical agents")


def terminal_state(model: MarketModel) -> np.ndarray:
    ag = model.agents[0]
    zt = float(ag.zeta(model.horizon))
    y = np.zeros(len(COEFF_NAMES))
    y[3] = ag.c4
    y[8] = -2.0 * ag.c4 * zt
    y[10] = ag.c4 * zt * zt
    return y


@dataclass(frozen=True, eq=False)
class HomogeneousSolution:
    """The eleven reduced coefficients on the storage grid ``t``."""

    model: MarketModel
    grid: TimeGrid
    constants: HomogeneousConstants
    t: np.ndarray
    values: np.ndarray  # (n_t, 11) in COEFF_NAMES order
    stride: int

    def __getattr__(self, name):
        if name in COEFF_NAMES:
            return self.values[:, COEFF_NAMES.index(name)]
        raise AttributeError(name)

    @property
    def d(self) -> float:
        return self.constants.d

    @property
    def eta0(self) -> float:
        return self.constants.eta0

    @property
    def eta1(self) -> float:
        return self.constants.eta1

    @property
    def t_step(self) -> float:
        return self.t[1] - self.t[0]

    def coefficients_at(self, t: float) -> dict:
        _check_time(self.model, t)
        row = interp_rows(self.values, t, 0.0, self.t_step)
        return dict(zip(COEFF_NAMES, row.tolist()))

    def g_table(self) -> np.ndarray:
        """g1..g8 at every stored node, shape (n_t, 8)."""
        v = self.values
        return np.stack(_g_values(self.constants, v[:, 1], v[:, 3], v[:, 4], v[:, 8]), axis=1)

    def to_rows(self):
        """Yield ``(t, name, value)`` for the eleven coefficients and g1..g8."""
        g = self.g_table()
        for k, tk in enumerate(self.t):
            for j, name in enumerate(COEFF_NAMES):
                yield tk, name, self.values[k, j]
            for j, name in enumerate(G_NAMES):
                yield tk, name, g[k, j]


def _check_time(model: MarketModel, t: float) -> None:
    if not (-1e-12 <= t <= model.horizon + 1e-12):
        from .errors import DomainError

        raise DomainError(f"t={t} outside [0, {model.horizon}]")


def g_functions(sol: HomogeneousSolution, t: float) -> GCoeffs:
    c = sol.coefficients_at(t)
    return GCoeffs(*_g_values(sol.constants, c["p2"], c["p4"], c["p5"], c["r2"]))


def _blowup_check(every: int = 50):
    counter = {"k": 0}

    def check(t, y):
        counter["k"] += 1
        if counter["k"] % every and t > 0:
            return
        bad = ~np.isfinite(y)
        if bad.any():
            raise RiccatiBlowUpError(t, COEFF_NAMES[int(np.argmax(bad))])

    return check


def solve_homogeneous(
    model: MarketModel,
    grid: TimeGrid | None = None,
    store_every: int = 1,
) -> HomogeneousSolution:
    """Integrate the eleven reduced ODEs backward from their terminal values."""
    validate_market(model)
    require_homogeneous(model)
    if grid is None:
        grid = TimeGrid.with_step(model.horizon, DEFAULT_DT)
    if abs(grid.horizon - model.horizon) > 1e-12:
        raise ValueError("grid horizon must match the model horizon")
    rhs = _HomogeneousRHS(model, grid)
    stride = compatible_stride(grid.n_steps, store_every)
    t, ys = integrate_backward(rhs, terminal_state(model), grid, store_every=stride, check=_blowup_check())
    return HomogeneousSolution(model, grid, rhs.k, t, ys, stride)


def solve_p_block(model: MarketModel, grid: TimeGrid | None = None, store_every: int = 1):
    """Integrate (p4, p5, p6, p7) alone; returns ``(t, values)`` with values (n_t, 4)."""
    validate_market(model)
    require_homogeneous(model)
    if grid is None:
        grid = TimeGrid.with_step(model.horizon, DEFAULT_DT)
    rhs = _HomogeneousRHS(model, grid, p_block_only=True)
    y0 = np.array([model.agents[0].c4, 0.0, 0.0, 0.0])
    return integrate_backward(rhs, y0, grid, store_every=compatible_stride(grid.n_steps, store_every))


# --------------------------------------------------------------------------
# Well-posedness
# --------------------------------------------------------------------------


def reduced_quadratic_forms(n: int, c1: float, c2: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric 3x3 matrices M1, M2, M3 with d/dtau (p4, p5, p6) = (x'M_k x)_k + (c3, 0, 0)."""
    d = c1 + 2.0 * c2
    e = 1.0 + n * (c1 / d)
    s = c1 + c2
    m = n - 1
    d2e, d3e, d4e2 = d * d * e, d**3 * e, d**4 * e * e
    m1 = np.zeros((3, 3))
    m1[0, 0] = -4.0 * s / d**2 + 4.0 * c1 / d2e + 4.0 * c1 * c1 * c2 / d4e2
    m1[0, 1] = m1[1, 0] = m * ((6.0 * c1 * c1 + 8.0 * c1 * c2) / d3e - (4.0 * c1**3 + 4.0 * c1 * c1 * c2) / d4e2)
    m1[1, 1] = -m * 4.0 * s / d2e - m * m * (2.0 * c1**3 + 2.0 * c1 * c1 * c2) / d4e2
    m2 = np.zeros((3, 3))
    m2[0, 0] = (4.0 * c1 * c1 + 4.0 * c1 * c2) / d3e - (4.0 * c1**3 + 4.0 * c1 * c1 * c2) / d4e2
    m2[0, 1] = m2[1, 0] = -4.0 * s / d2e - 4.0 * m * (c1**3 + c1 * c1 * c2) / d4e2
    m2[1, 1] = (
        -4.0 * n * n * s * c1 / (d**3 * e * e)
        + 4.0 * n * s * (3.0 * c1 * c1 + 2.0 * c1 * c2 - 4.0 * c2 * c2) / d4e2
        + 4.0 * s * (6.0 * c1 * c2 + 8.0 * c2 * c2) / d4e2
    )
    m2[0, 2] = m2[2, 0] = m * c1 / d2e
    m2[1, 2] = m2[2, 1] = -2.0 * m * s / d2e
    m3 = np.zeros((3, 3))
    m3[0, 0] = -(4.0 * c1**3 + 4.0 * c1 * c1 * c2) / d4e2
    m3[0, 1] = m3[1, 0] = 8.0 * c1 * s * s / d4e2
    m3[1, 1] = -16.0 * s**3 / d4e2
    m3[0, 2] = m3[2, 0] = -4.0 * s / d2e
    m3[1, 2] = m3[2, 1] = -2.0 * n / (d * e) + (6.0 * c1 + 8.0 * c2) / d2e
    return m1, m2, m3


def wellposedness_bound_homogeneous(model: MarketModel) -> WellposednessBound:
    """Sufficient horizon from the comparison argument on the closed (p4, p5, p6) block."""
    require_homogeneous(model)
    ag = model.agents[0]
    mats = reduced_quadratic_forms(model.n_agents, ag.c1, ag.c2)
    beta = math.sqrt(sum(np.linalg.norm(m, 2) ** 2 for m in mats))
    if ag.c3 == 0.0:
        return WellposednessBound(math.inf, beta, "c3 = 0: the comparison bound degenerates; no finite limit")
    root = math.sqrt(beta * ag.c3)
    t_max = (math.pi - 2.0 * math.atan(math.sqrt(beta) * ag.c4 / math.sqrt(ag.c3))) / (2.0 * root)
    return WellposednessBound(t_max, beta)


def lambda_n(n: int, c1: float, c2: float) -> float:
    return -1.0 / (c1 + c2) - 4.0 * n * c1**3 / ((c1 + 2.0 * c2) ** 2 * ((n + 1) * c1 + 2.0 * c2) ** 2)


@dataclass(frozen=True)
class RegionReport:
    inside: bool
    worst_margin: float
    lambda_N: float
    x1_cap: float


def region_margins(x: np.ndarray, n: int, c1: float, c2: float, c3: float, c4: float) -> tuple[np.ndarray, float, float]:
    """Signed distances to the six faces of the invariant box for points ``x`` (..., 3)."""
    lam = lambda_n(n, c1, c2)
    cap = max(c4, math.sqrt(c3 / -lam)) if c3 > 0 else c4
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    margins = np.stack(
        [
            x1,
            cap - x1,
            x2,
            c1 / (2.0 * (c1 + c2)) * x1 - x2,
            -x3,
            x3 + c1 / (n * c1 + 2.0 * c2) * x2,
        ],
        axis=-1,
    )
    return margins, lam, cap


def invariant_region_check(sol: HomogeneousSolution, model: MarketModel | None = None, tol: float = 0.0) -> RegionReport:
    """Check that reversed (p4, p5, p6) stays in the invariant box for N >= 5."""
    model = model or sol.model
    n = model.n_agents
    if n < 5:
        raise ValueError("invariant region argument not applicable for N < 5")
    ag = model.agents[0]
    if not (ag.c1 > 0 and ag.c4 > 0):
        raise ValueError("invariant region argument needs c1 > 0 and c4 > 0")
    x = sol.values[::-1, 3:6]
    margins, lam, cap = region_margins(x, n, ag.c1, ag.c2, ag.c3, ag.c4)
    worst = float(margins.min())
    return RegionReport(worst >= -tol, worst, lam, cap)
