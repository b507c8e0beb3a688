"""Coupled Riccati system for a market of heterogeneous agents.

Agent i's value function is the quadratic form

    V^i(t, q, s) = [q, s]^T [[p0_i, p_i^T], [p_i, P_i]] [q, s] + [r0_i, r_i]^T [q, s] + u_i

and the equilibrium feedback is affine, ``alpha = k1 q - K2 s - k3``.
All N agents are integrated together as one state vector of length
N^3 + 2N^2 + 3N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._numerics import compatible_stride, half_step_times, integrate_backward, interp_rows
from .errors import InteractionSingularError, RiccatiBlowUpError
from .model import MarketModel, TimeGrid, build_noise, validate_market

DEFAULT_DT = 1e-3
# Cap on stored reals (~240 MB of float64) before the storage grid is thinned.
MAX_STORED_REALS = 30_000_000


def system_dimension(n: int) -> int:
    return n**3 + 2 * n**2 + 3 * n


@dataclass(frozen=True)
class InteractionData:
    d: np.ndarray  # w_ii c1_i + 2 c2_i
    m_matrix: np.ndarray  # (I + diag(d)^-1 diag(c1) W)^-1
    c1: np.ndarray
    weights: np.ndarray

    @property
    def wm(self) -> np.ndarray:
        return self.weights @ self.m_matrix


def build_interaction(model: MarketModel, cond_limit: float = 1e12) -> InteractionData:
    """Solve the simultaneous first-order conditions once, as a matrix inverse."""
    c1 = model.vector("c1")
    c2 = model.vector("c2")
    w = model.W
    d = np.diag(w) * c1 + 2.0 * c2
    a = np.eye(model.n_agents) + (c1 / d)[:, None] * w
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] == 0.0 or sv[0] / sv[-1] > cond_limit:
        raise InteractionSingularError(
            f"interaction matrix not invertible (smallest singular value {sv[-1]:.3e})"
        )
    m = np.linalg.inv(a)
    return InteractionData(d=d, m_matrix=m, c1=c1, weights=w.copy())


@dataclass(frozen=True)
class Intermediates:
    k1: np.ndarray
    K2: np.ndarray
    k3: np.ndarray
    k4: np.ndarray
    K5: np.ndarray
    k6: np.ndarray


def compute_intermediates(
    P: np.ndarray, p: np.ndarray, r: np.ndarray, model: MarketModel, inter: InteractionData
) -> Intermediates:
    """Feedback intermediates from one coefficient snapshot.

    ``P`` has shape (N, N, N) indexed ``[agent, row, col]``; ``p`` and ``r`` are (N, N).
    """
    n = model.n_agents
    idx = np.arange(n)
    d = inter.d
    mm = inter.m_matrix
    w = inter.weights
    k1 = mm @ ((inter.c1 - 2.0 * p[idx, idx]) / d)
    K2 = mm @ (2.0 * P[idx, idx, :] / d[:, None])
    k3 = mm @ ((r[idx, idx] + model.vector("p_bar")) / d)
    return Intermediates(k1=k1, K2=K2, k3=k3, k4=1.0 - w @ k1, K5=w @ K2, k6=w @ k3)


class _Layout:
    """Views into the flat state vector."""

    def __init__(self, n: int):
        self.n = n
        sizes = [n**3, n * n, n * n, n, n, n]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.size = int(self.offsets[-1])
        self.names = ("P", "p", "r", "p0", "r0", "u")
        self.shapes = ((n, n, n), (n, n), (n, n), (n,), (n,), (n,))

    def split(self, y: np.ndarray):
        lead = y.shape[:-1]
        return [
            y[..., self.offsets[k] : self.offsets[k + 1]].reshape(lead + self.shapes[k]) for k in range(6)
        ]

    def block_of(self, flat_index: int) -> str:
        k = int(np.searchsorted(self.offsets, flat_index, side="right")) - 1
        return self.names[k]


def _mv(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product over the trailing axes."""
    return (a @ x[..., None])[..., 0]


class _GeneralRHS:
    """Right-hand side F of ``-dy/dt = F(j, y)`` for B markets with the same N.

    The state has shape (B, D). Forcing curves are tabulated on the RK4
    half-step times of ``grid`` so no curve is evaluated inside the sweep.
    """

    def __init__(self, models, inters, grid: TimeGrid, p_only: bool = False):
        self.n = n = models[0].n_agents
        self.B = len(models)
        self.layout = _Layout(n)
        self.p_only = p_only

        def stack(f, axis=0):
            return np.stack([np.asarray(f(m), dtype=float) for m in models], axis=axis)

        self.c1 = stack(lambda m: m.vector("c1"))
        self.c2 = stack(lambda m: m.vector("c2"))
        self.c3 = stack(lambda m: m.vector("c3"))
        self.pbar = stack(lambda m: m.vector("p_bar"))
        self.kappa = stack(lambda m: [m.kappa])  # (B, 1)
        self.cov = stack(lambda m: build_noise(m) @ build_noise(m).T)
        self.idx = np.arange(n)
        self.mm_over_d = np.stack([i.m_matrix / i.d[None, :] for i in inters])
        self.w = np.stack([i.weights for i in inters])
        ts = half_step_times(grid)
        ts[-1] = 0.0
        self.theta = stack(lambda m: np.broadcast_to(m.theta(ts), ts.shape), axis=1)[..., None]  # (J, B, 1)
        self.a = stack(lambda m: m.curves_at("a", ts), axis=1)  # (J, B, N)
        self.b = stack(lambda m: m.curves_at("b", ts), axis=1)
        self.zeta = stack(lambda m: m.curves_at("zeta", ts), axis=1)
        self._bounds = [(int(o0), int(o1)) for o0, o1 in zip(self.layout.offsets[:-1], self.layout.offsets[1:])]

    def rhs_P(self, P):
        idx = self.idx
        K2 = self.mm_over_d @ (2.0 * P[:, idx, idx, :])
        K5 = self.w @ K2
        cross = (0.5 * self.c1)[:, :, None, None] * (K2[:, :, :, None] * K5[:, :, None, :])
        cross += (0.5 * self.c2)[:, :, None, None] * (K2[:, :, :, None] * K2[:, :, None, :])
        cross -= P @ K2[:, None]  # P K2; P symmetric so K2^T P is its transpose
        dP = cross + np.swapaxes(cross, -1, -2)
        dP[:, idx, idx, idx] += self.c3
        return dP, K2, K5

    def __call__(self, j: int, y: np.ndarray) -> np.ndarray:
        n, idx, B = self.n, self.idx, self.B
        (o0, o1), (o1_, o2), (o2_, o3), (o3_, o4), (o4_, o5), (o5_, o6) = self._bounds
        P = y[:, o0:o1].reshape(B, n, n, n)
        dP, K2, K5 = self.rhs_P(P)
        if self.p_only:
            return dP.reshape(B, -1)
        p = y[:, o1:o2].reshape(B, n, n)
        r = y[:, o2:o3].reshape(B, n, n)
        p0, r0 = y[:, o3:o4], y[:, o4:o5]
        c1, c2, c3, kappa, pbar = self.c1, self.c2, self.c3, self.kappa, self.pbar
        k1 = _mv(self.mm_over_d, c1 - 2.0 * p[:, idx, idx])
        k3 = _mv(self.mm_over_d, r[:, idx, idx] + pbar)
        k4 = 1.0 - _mv(self.w, k1)
        k6 = _mv(self.w, k3)
        theta = self.theta[j]
        zeta = self.zeta[j]
        k1b = k1 + self.b[j]
        k3a = k3 - self.a[j]

        dp = (
            (-0.5 * c1 * k1)[..., None] * K5
            + (0.5 * c1 * k4 - c2 * k1)[..., None] * K2
            - kappa[..., None] * p
            + _mv(P, k1b[:, None, :])
            - p @ K2
        )
        dr = (
            (c1 * k6 + 2.0 * c2 * k3 - pbar)[..., None] * K2
            + (c1 * k3)[..., None] * K5
            + (2.0 * kappa * theta)[..., None] * p
            - r @ K2
            - 2.0 * _mv(P, k3a[:, None, :])
        )
        dr[:, idx, idx] -= 2.0 * c3 * zeta
        pk3a = _mv(p, k3a)
        dp0 = -c1 * k1 * k4 + c2 * k1**2 - 2.0 * kappa * p0 + 2.0 * _mv(p, k1b)
        dr0 = (
            pbar * k1
            + c1 * (k3 * k4 - k1 * k6)  # sign derived from the HJB expansion
            - 2.0 * c2 * k1 * k3
            + kappa * (2.0 * theta * p0 - r0)
            + _mv(r, k1b)
            - 2.0 * pk3a
        )
        cov = self.cov
        trace = (
            cov[:, :1, 0] * p0
            + 2.0 * _mv(p, cov[:, 1:, 0])
            + _mv(P.reshape(B, n, n * n), cov[:, 1:, 1:].reshape(B, n * n))
        )
        du = (
            -pbar * k3
            + c1 * k3 * k6
            + c2 * k3**2
            + c3 * zeta**2
            + kappa * theta * r0
            - _mv(r, k3a)
            + trace
        )
        return np.concatenate([dP.reshape(B, -1), dp.reshape(B, -1), dr.reshape(B, -1), dp0, dr0, du], axis=1)


def _symmetrize_P(n: int):
    m = n**3

    def project(y):
        # stage states are fresh arrays, so overwrite in place
        P = y[:, :m].reshape(-1, n, n, n)
        y[:, :m] = (0.5 * (P + np.swapaxes(P, -1, -2))).reshape(y.shape[0], m)
        return y

    return project


def terminal_state(model: MarketModel) -> np.ndarray:
    n = model.n_agents
    lay = _Layout(n)
    y = np.zeros(lay.size)
    P, p, r, p0, r0, u = lay.split(y)
    c4 = model.vector("c4")
    zT = model.curves_at("zeta", model.horizon)
    idx = np.arange(n)
    P[idx, idx, idx] = c4
    r[idx, idx] = -2.0 * c4 * zT
    u[:] = c4 * zT**2
    return y


def _default_stride(n: int, n_steps: int, n_models: int = 1) -> int:
    """Storage thinning: every node up to N=16, every 10th beyond, more if memory demands."""
    stride = 1 if n <= 16 else 10
    dim = system_dimension(n) * n_models
    while stride < n_steps and (n_steps % stride or (n_steps // stride + 1) * dim > MAX_STORED_REALS):
        stride += 1
    return stride


@dataclass(frozen=True, eq=False)
class GeneralSolution:
    """Coefficient trajectories on the (possibly thinned) storage grid ``t``."""

    model: MarketModel
    grid: TimeGrid
    interaction: InteractionData
    t: np.ndarray
    P: np.ndarray  # (n_t, N, N, N)
    p: np.ndarray  # (n_t, N, N)
    r: np.ndarray
    p0: np.ndarray  # (n_t, N)
    r0: np.ndarray
    u: np.ndarray
    stride: int

    @property
    def n_agents(self) -> int:
        return self.model.n_agents

    @property
    def dimension(self) -> int:
        return system_dimension(self.n_agents)

    @property
    def t_step(self) -> float:
        return self.t[1] - self.t[0]

    def _interp(self, arr, t):
        return interp_rows(arr, t, 0.0, self.t_step)

    def coefficients_at(self, t: float) -> dict:
        return {name: self._interp(getattr(self, name), t) for name in ("P", "p", "r", "p0", "r0", "u")}

    def intermediates_at(self, t: float) -> Intermediates:
        c = self.coefficients_at(t)
        return compute_intermediates(c["P"], c["p"], c["r"], self.model, self.interaction)

    def gain_tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Feedback gains (k1, K2, k3) at every stored node, so that alpha = k1 q - K2 s - k3."""
        n = self.n_agents
        idx = np.arange(n)
        inter = self.interaction
        mm = inter.m_matrix
        k1 = ((self.model.vector("c1") - 2.0 * self.p[:, idx, idx]) / inter.d) @ mm.T
        K2 = np.einsum("ij,tjk->tik", mm, 2.0 * self.P[:, idx, idx, :] / inter.d[None, :, None])
        k3 = ((self.r[:, idx, idx] + self.model.vector("p_bar")) / inter.d) @ mm.T
        return k1, K2, k3

    def to_rows(self):
        """Yield ``(t, agent, block, row, col, value)`` rows; agents are 1-based."""
        n = self.n_agents
        for k, tk in enumerate(self.t):
            for i in range(n):
                for rr in range(n):
                    for cc in range(n):
                        yield tk, i + 1, "P", rr, cc, self.P[k, i, rr, cc]
                for rr in range(n):
                    yield tk, i + 1, "p", rr, 0, self.p[k, i, rr]
                for rr in range(n):
                    yield tk, i + 1, "r", rr, 0, self.r[k, i, rr]
                yield tk, i + 1, "p0", 0, 0, self.p0[k, i]
                yield tk, i + 1, "r0", 0, 0, self.r0[k, i]
                yield tk, i + 1, "u", 0, 0, self.u[k, i]


def _blowup_checker(layout: _Layout, every: int = 50):
    counter = {"k": 0}

    def check(t, y):
        counter["k"] += 1
        if counter["k"] % every and t > 0:
            return
        bad = ~np.isfinite(y)
        if bad.any():
            flat = int(np.argmax(bad.reshape(-1))) % layout.size
            raise RiccatiBlowUpError(t, layout.block_of(flat))

    return check


def _prepare(model: MarketModel, grid: TimeGrid | None) -> TimeGrid:
    validate_market(model)
    if grid is None:
        grid = TimeGrid.with_step(model.horizon, DEFAULT_DT)
    if abs(grid.horizon - model.horizon) > 1e-12:
        raise ValueError("grid horizon must match the model horizon")
    return grid


def solve_general_batch(
    models,
    grid: TimeGrid | None = None,
    store_every: int | None = None,
) -> list[GeneralSolution]:
    """Solve several markets with the same agent count in one vectorized sweep.

    Every market is integrated exactly as :func:`solve_general` would, so the
    results match single solves up to floating-point reassociation. Batching
    amortizes per-step interpreter overhead, which dominates for small N.
    """
    models = list(models)
    if not models:
        return []
    n = models[0].n_agents
    if any(m.n_agents != n for m in models):
        raise ValueError("batched markets must share the agent count")
    horizon = models[0].horizon
    if any(abs(m.horizon - horizon) > 1e-12 for m in models):
        raise ValueError("batched markets must share the horizon")
    grid = _prepare(models[0], grid)
    for m in models[1:]:
        validate_market(m)
    inters = [build_interaction(m) for m in models]
    rhs = _GeneralRHS(models, inters, grid)
    if store_every is None:
        stride = _default_stride(n, grid.n_steps, len(models))
    else:
        stride = compatible_stride(grid.n_steps, store_every)
    y0 = np.stack([terminal_state(m) for m in models])
    t, ys = integrate_backward(
        rhs,
        y0,
        grid,
        store_every=stride,
        project=_symmetrize_P(n),
        check=_blowup_checker(rhs.layout),
    )
    out = []
    for b, (m, inter) in enumerate(zip(models, inters)):
        # copy so each solution owns its memory
        P, p, r, p0, r0, u = (np.ascontiguousarray(x) for x in rhs.layout.split(ys[:, b]))
        out.append(GeneralSolution(m, grid, inter, t, P, p, r, p0, r0, u, stride))
    return out


def solve_general(
    model: MarketModel,
    grid: TimeGrid | None = None,
    store_every: int | None = None,
) -> GeneralSolution:
    """Integrate the coupled system backward from its terminal condition.

    The terminal node is assigned, not integrated, so it matches the terminal
    conditions bit for bit.
    """
    grid = _prepare(model, grid)
    stride = None if store_every is None else store_every
    if stride is None:
        stride = _default_stride(model.n_agents, grid.n_steps)
    return solve_general_batch([model], grid, stride)[0]


def solve_P_subsystem(model: MarketModel, grid: TimeGrid, store_every: int = 1):
    """Integrate only the quadratic blocks P^i; they form a closed subsystem."""
    grid = _prepare(model, grid)
    inter = build_interaction(model)
    n = model.n_agents
    rhs = _GeneralRHS([model], [inter], grid, p_only=True)
    y0 = terminal_state(model)[None, : n**3]
    t, ys = integrate_backward(rhs, y0, grid, store_every=store_every, project=_symmetrize_P(n))
    return t, ys.reshape(len(t), n, n, n)


# --------------------------------------------------------------------------
# Well-posedness bound
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WellposednessBound:
    t_max: float
    beta: float
    note: str = ""

    def covers(self, horizon: float) -> bool:
        return horizon < self.t_max


def _bmatrices(inter: InteractionData, c2: np.ndarray) -> np.ndarray:
    d, mm, wm, c1 = inter.d, inter.m_matrix, inter.wm, inter.c1
    dd = np.outer(d, d)
    # B[i, j, l]
    term1 = mm[:, :, None] * wm[None, :, :] + wm[:, :, None] * mm[:, None, :]
    B = (2.0 * c1[:, None, None] / dd[None]) * term1
    B += (4.0 * c2[:, None, None] / dd[None]) * (mm[:, :, None] * mm[:, None, :])
    return B


def wellposedness_bound_general(model: MarketModel, norm: str = "2") -> WellposednessBound:
    """Sufficient horizon for existence of the quadratic-block subsystem.

    ``norm`` selects the induced matrix norm: ``"2"`` (default) or ``"inf"``.
    """
    validate_market(model)
    inter = build_interaction(model)
    n = model.n_agents
    c2 = model.vector("c2")
    c3n = float(np.max(model.vector("c3")))
    c4n = float(np.max(model.vector("c4")))
    col = inter.m_matrix * (2.0 / inter.d)[None, :]  # column i of block i of the S operator
    if norm == "2":
        s_norm = s_t_norm = float(np.max(np.linalg.norm(col, axis=0)))
        ord_ = 2
    elif norm == "inf":
        s_norm = float(np.max(np.max(np.abs(col), axis=0)))
        s_t_norm = float(np.max(np.sum(np.abs(col), axis=0)))
        ord_ = np.inf
    else:
        raise ValueError("norm must be '2' or 'inf'")
    B = _bmatrices(inter, c2)
    b_norm = max(float(np.linalg.norm(B[i], ord=ord_)) for i in range(n))
    beta = s_norm + s_t_norm + b_norm
    if c3n == 0.0:
        return WellposednessBound(math.inf, beta, "c3 = 0 for every agent; the bound degenerates")
    t_max = (math.pi - 2.0 * math.atan(n * math.sqrt(beta) * c4n / math.sqrt(c3n))) / (
        2.0 * n * math.sqrt(c3n * beta)
    )
    return WellposednessBound(t_max, beta)
