"""Large-market expansion of the identical-agent equilibrium in eps = 1/N.

Leading-order coefficients have closed forms or reduce to one-dimensional
quadratures. The first-order pair (p4_1, p5_1) is integrated by RK4 on the
same grid as the exact Riccati solve so that the two can be compared node
by node.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from ._numerics import simpson_cumulative, solve_linear_ode
from .model import Constant, MarketModel, TimeGrid
from .riccati_homogeneous import DEFAULT_DT, require_homogeneous, solve_homogeneous

ZERO_AT_LEADING_ORDER = ("p3", "p5", "p6", "p7", "r3")
ZERO_AT_FIRST_ORDER = ("p6", "p7")


@dataclass(frozen=True, eq=False)
class ExpansionCoeffs:
    """Expansion coefficients on a uniform grid.

    ``zero_terms`` lists the coefficients that vanish identically at leading
    order, ``zero_terms_first`` those that vanish at first order; both are
    checked empirically by :func:`fit_leading_order`.
    """

    t: np.ndarray
    p2_0: np.ndarray
    p4_0: np.ndarray
    r2_0: np.ndarray
    p4_1: np.ndarray
    p5_1: np.ndarray
    c1: float
    c2: float
    c3: float
    c4: float
    p_bar: float
    horizon: float
    zero_terms: tuple = ZERO_AT_LEADING_ORDER
    zero_terms_first: tuple = ZERO_AT_FIRST_ORDER

    @property
    def d(self) -> float:
        return self.c1 + 2.0 * self.c2

    def epsilon(self, n: int) -> float:
        return 1.0 / n

    def marginal_storage_value(self) -> np.ndarray:
        """c3 (T - t) + c4, which equals p4_0 + p5_1 identically."""
        return self.c3 * (self.horizon - self.t) + self.c4

    def at(self, t: float) -> dict:
        k = int(round(t / (self.t[1] - self.t[0])))
        if k < 0 or k >= len(self.t) or abs(self.t[k] - t) > 1e-9:
            out = {}
            for name in ("p2_0", "p4_0", "r2_0", "p4_1", "p5_1"):
                out[name] = float(np.interp(t, self.t, getattr(self, name)))
            return out
        return {name: float(getattr(self, name)[k]) for name in ("p2_0", "p4_0", "r2_0", "p4_1", "p5_1")}

    def rows(self):
        for k, tk in enumerate(self.t):
            for name in ("p2_0", "p4_0", "r2_0", "p4_1", "p5_1"):
                yield float(tk), name, float(getattr(self, name)[k])


def riccati_rate(c1: float, c2: float) -> float:
    """Quadratic coefficient (4d - 4c2)/d^2 of the leading-order p4 equation."""
    d = c1 + 2.0 * c2
    rate = (4.0 * d - 4.0 * c2) / (d * d)
    assert rate > 0.0, "4d - 4c2 must be positive"
    return rate


def p4_leading(tau, c1: float, c2: float, c3: float, c4: float) -> np.ndarray:
    """Closed-form leading-order p4 at time-to-go ``tau = T - t``.

    Written with tanh so it stays finite for long horizons and well
    conditioned for small c3.
    """
    tau = np.asarray(tau, dtype=float)
    A = riccati_rate(c1, c2)
    if c3 == 0.0:
        return c4 / (1.0 + c4 * A * tau)
    k = math.sqrt(c3 / A)
    x = math.sqrt(A * c3) * tau
    th = np.tanh(x)
    # tanh(x) / x, finite as c3 -> 0 where the solution tends to the separable one
    ratio = np.divide(th, x, out=np.ones_like(x), where=x > 0)
    return (c4 + k * th) / (1.0 + c4 * A * tau * ratio)


def first_order_pair(grid: TimeGrid, c1: float, c2: float, c3: float, c4: float, layer_tol: float = 2e-3):
    """RK4 for the first-order corrections (p4_1, p5_1) on the nodes of ``grid``.

    The self-term of p4_1 enters with a negative sign (it is the
    linearisation of -A p4^2). Each grid step is split into substeps so that
    A p4_0 times the substep stays below ``layer_tol``, which resolves the stiff
    layer next to T where p4_0 falls from c4 to its plateau.
    """
    d = c1 + 2.0 * c2
    A = riccati_rate(c1, c2)
    A8, A12, A4 = 2.0 * A, 12.0 / d - 8.0 * c2 / (d * d), A

    def f(tau, y4, y5):
        p = float(p4_leading(tau, c1, c2, c3, c4))
        return A8 * p * p + A12 * p * y5 - A8 * p * y4, A4 * p * p

    n, h = grid.n_steps, grid.dt
    out = np.zeros((n + 1, 2))
    y4 = y5 = 0.0
    tau = 0.0
    for k in range(n):
        m = max(1, math.ceil(A * float(p4_leading(tau, c1, c2, c3, c4)) * h / layer_tol))
        s = h / m
        for _ in range(m):
            k1 = f(tau, y4, y5)
            k2 = f(tau + 0.5 * s, y4 + 0.5 * s * k1[0], y5 + 0.5 * s * k1[1])
            k3 = f(tau + 0.5 * s, y4 + 0.5 * s * k2[0], y5 + 0.5 * s * k2[1])
            k4 = f(tau + s, y4 + s * k3[0], y5 + s * k3[1])
            y4 += s / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            y5 += s / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            tau += s
        tau = (k + 1) * h
        out[n - 1 - k] = (y4, y5)
    return out[:, 0], out[:, 1]


def _agent_curves(model: MarketModel, t: np.ndarray):
    ag = model.agents[0]
    f = lambda c: np.broadcast_to(np.asarray(c(t), dtype=float), t.shape)  # noqa: E731
    return ag, f(ag.a), f(ag.b), f(ag.zeta), f(model.theta)


def expansion_coeffs(model: MarketModel, grid: TimeGrid | None = None) -> ExpansionCoeffs:
    """Leading- and first-order expansion coefficients for the per-agent parameters of ``model``.

    Only the common agent block and the market curves matter; N does not enter.
    """
    require_homogeneous(model)
    grid = grid or TimeGrid.with_step(model.horizon, DEFAULT_DT)
    t = grid.nodes
    h = grid.dt
    T = grid.horizon
    ag, a, b, zeta, theta = _agent_curves(model, t)
    c1, c2, c3, c4 = ag.c1, ag.c2, ag.c3, ag.c4
    lam = c3 * (T - t) + c4

    p4_0 = p4_leading(T - t, c1, c2, c3, c4)
    # p2_0' = kappa p2_0 - lam b, p2_0(T) = 0
    p2_0 = solve_linear_ode(np.full_like(t, model.kappa), -lam * b, 0.0, h, backward=True)
    # r2_0(t) = -2 c4 zeta(T) + 2 int_t^T [lam a - c3 zeta + kappa theta p2_0] ds
    inner = lam * a - c3 * zeta + model.kappa * theta * p2_0
    cum = simpson_cumulative(inner, h)
    r2_0 = -2.0 * c4 * zeta[-1] + 2.0 * (cum[-1] - cum)

    p4_1, p5_1 = first_order_pair(grid, c1, c2, c3, c4)
    return ExpansionCoeffs(
        t=t,
        p2_0=p2_0,
        p4_0=p4_0,
        r2_0=r2_0,
        p4_1=p4_1,
        p5_1=p5_1,
        c1=c1,
        c2=c2,
        c3=c3,
        c4=c4,
        p_bar=ag.p_bar,
        horizon=T,
    )


def _sum_others_coeff(c: ExpansionCoeffs) -> np.ndarray:
    d = c.d
    return 2.0 / d * c.p4_1 - 2.0 * (c.c1 + d) / (d * c.c1) * c.p5_1 - 2.0 / c.c1 * c.p4_0


def expansion_gains(coeffs: ExpansionCoeffs, n: int, order: int = 2):
    """Affine gains ``(q1, own, cross, const)`` of the truncated expansion.

    ``order`` 0 keeps the leading relative-SOC term, 1 adds the eps bracket and
    2 adds the eps^2 term on the other agents' SOC.
    """
    eps = 1.0 / n
    c = coeffs
    lead = 2.0 / c.d * c.p4_0
    own = -lead * (1.0 - eps)
    cross = lead * eps
    q1 = np.zeros_like(c.t)
    const = np.zeros_like(c.t)
    if order >= 1:
        own = own + eps * 2.0 / c.d * (c.p5_1 - c.p4_1)
        q1 = eps * (1.0 - 2.0 * c.p2_0 / c.c1)
        const = -eps * (c.r2_0 + c.p_bar) / c.c1
    if order >= 2:
        cross = cross + eps * eps * _sum_others_coeff(c)
    return q1, own, cross, const


def control_expansion(coeffs: ExpansionCoeffs, t: float, q: float, s_i: float, s_bar: float, sum_others: float, n: int) -> float:
    """Expanded control of one agent, including the eps^2 term on the others' SOC."""
    v = coeffs.at(t)
    eps = 1.0 / n
    d, c1 = coeffs.d, coeffs.c1
    out = 2.0 / d * v["p4_0"] * (s_bar - s_i)
    out += eps * (
        (1.0 - 2.0 * v["p2_0"] / c1) * q + 2.0 / d * (v["p5_1"] - v["p4_1"]) * s_i - (v["r2_0"] + coeffs.p_bar) / c1
    )
    k = 2.0 / d * v["p4_1"] - 2.0 * (c1 + d) / (d * c1) * v["p5_1"] - 2.0 / c1 * v["p4_0"]
    return float(out + eps * eps * k * sum_others)


def aggregate_control_expansion(coeffs: ExpansionCoeffs, t: float, q: float, s_bar: float, use_identity: bool = True) -> float:
    """Leading-order sum of all controls.

    With ``use_identity`` the SOC loading is c3 (T - t) + c4; otherwise the
    unsimplified p4_0 + p5_1 is used.
    """
    v = coeffs.at(t)
    c1 = coeffs.c1
    lam = coeffs.c3 * (coeffs.horizon - t) + coeffs.c4 if use_identity else v["p4_0"] + v["p5_1"]
    return float((1.0 - 2.0 * v["p2_0"] / c1) * q - 2.0 / c1 * lam * s_bar - (v["r2_0"] + coeffs.p_bar) / c1)


def price_expansion(coeffs: ExpansionCoeffs, t: float, q: float, s_bar: float) -> float:
    """Leading-order equilibrium price."""
    v = coeffs.at(t)
    lam = coeffs.c3 * (coeffs.horizon - t) + coeffs.c4
    return float(-2.0 * v["p2_0"] * q - 2.0 * lam * s_bar - v["r2_0"])


# --------------------------------------------------------------------------
# Empirical checks against the exact solver
# --------------------------------------------------------------------------


def with_size(model: MarketModel, n: int) -> MarketModel:
    return model.with_agents((model.agents[0],) * n)


def arbitrageur_family(model: MarketModel) -> MarketModel:
    """Same costs and noise with the self-generation removed."""
    ag = replace(model.agents[0], a=Constant(0.0), b=Constant(0.0))
    return model.with_agents((ag,) * model.n_agents)


@dataclass(frozen=True)
class RichardsonReport:
    n: int
    t: np.ndarray
    scaled_gap: np.ndarray  # (p4(t; N) - p4_0(t)) N
    p4_1: np.ndarray
    rel_error: float  # sup-norm error relative to sup |p4_1|


def richardson_check(model: MarketModel, n: int = 400, grid: TimeGrid | None = None, coeffs: ExpansionCoeffs | None = None):
    """Compare N (p4(.; N) - p4_0) with the first-order correction p4_1."""
    grid = grid or TimeGrid.with_step(model.horizon, DEFAULT_DT)
    coeffs = coeffs or expansion_coeffs(model, grid)
    sol = solve_homogeneous(with_size(model, n), grid)
    gap = (sol.p4 - coeffs.p4_0) * n
    err = float(np.max(np.abs(gap - coeffs.p4_1)) / np.max(np.abs(coeffs.p4_1)))
    return RichardsonReport(n, sol.t, gap, coeffs.p4_1, err)


def fit_leading_order(model: MarketModel, n_values=(50, 100, 200, 400), names=("p3", "p5", "p6", "p7", "r3"), grid=None):
    """Least-squares fit x(t; N) = x0(t) + x1(t)/N + x2(t)/N^2 at every node.

    Returns ``{name: (x0, scale)}`` where ``scale`` is sup |x(t; N)| over the
    largest N, the yardstick for calling x0 zero.
    """
    grid = grid or TimeGrid.with_step(model.horizon, DEFAULT_DT)
    sols = [solve_homogeneous(with_size(model, n), grid) for n in n_values]
    eps = np.array([1.0 / n for n in n_values])
    design = np.vander(eps, 3, increasing=True)
    out = {}
    for name in names:
        ys = np.stack([getattr(s, name) for s in sols])
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
        scale = float(np.max(np.abs(ys)))
        out[name] = (coef[0], scale)
    return out


@dataclass(frozen=True)
class LimitRow:
    n: int
    l2_gap: float
    stderr: float


@dataclass(frozen=True)
class LimitReport:
    rows: tuple
    slope: float
    intercept: float


def loglog_slope(ns, values) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)
    return float(slope), float(intercept)


def barS_limit_check(model: MarketModel, grid=None, n_values=(8, 16, 32, 64), n_paths: int = 2000, seed: int = 0, workers=None):
    """E|S_bar_T - S_bar*_T|^2 under the exact equilibrium for each N.

    S_bar* drops the aggregate dispatch and the idiosyncratic noise and is
    driven by the same common Brownian path, so each path couples the two.
    """
    from .equilibrium import FeedbackPolicy
    from .simulate import simulate_paths

    rows = []
    for n in n_values:
        m = with_size(model, n)
        sol = solve_homogeneous(m, grid)
        ens = simulate_paths(m, FeedbackPolicy.from_homogeneous(sol), n_paths=n_paths, seed=seed, workers=workers)
        T = m.horizon
        gap = (ens.metric("S_bar_T", T) - ens.metric("S_bar_star_T", T)) ** 2
        rows.append(LimitRow(n, float(gap.mean()), float(gap.std(ddof=1) / math.sqrt(len(gap)))))
    slope, icpt = loglog_slope([r.n for r in rows], [r.l2_gap for r in rows])
    return LimitReport(tuple(rows), slope, icpt)


def write_expansion_csv(coeffs: ExpansionCoeffs, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "coefficient", "value"])
        w.writerows(coeffs.rows())


def write_convergence_csv(report: LimitReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "l2_gap", "stderr"])
        for r in report.rows:
            w.writerow([r.n, r.l2_gap, r.stderr])
