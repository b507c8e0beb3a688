"""Fixed-step RK4 for terminal-value problems and local cubic interpolation."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import TimeGrid


def compatible_stride(n_steps: int, stride: int) -> int:
    """Largest divisor of ``n_steps`` that does not exceed ``stride``."""
    stride = max(1, min(int(stride), n_steps))
    while n_steps % stride:
        stride -= 1
    return stride


def half_step_times(grid: TimeGrid) -> np.ndarray:
    """Times ``T - j h/2`` for ``j = 0..2n``: every RK4 stage time of a backward sweep."""
    return grid.horizon - 0.5 * grid.dt * np.arange(2 * grid.n_steps + 1)


def integrate_backward(
    rhs: Callable[[int, np.ndarray], np.ndarray],
    y_terminal: np.ndarray,
    grid: TimeGrid,
    store_every: int = 1,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    check: Callable[[float, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``-dy/dt = rhs(j, y)`` from ``y(T) = y_terminal`` down to ``t = 0``.

    The problem is solved as the forward initial-value problem in reversed
    time ``tau = T - t`` with classical RK4. ``rhs`` receives the half-step
    index ``j`` of the stage time ``T - j h/2`` (see :func:`half_step_times`),
    so time-dependent forcing can be tabulated once. ``project`` is applied to
    every stage state (used to keep matrix blocks symmetric).

    Returns ``(t_store, y_store)`` ordered by increasing time; row ``-1`` is the
    terminal value exactly as given.
    """
    n = grid.n_steps
    h = grid.dt
    T = grid.horizon
    stride = compatible_stride(n, store_every)
    n_store = n // stride + 1
    y = np.array(y_terminal, dtype=float)
    out = np.empty((n_store,) + y.shape)
    out[-1] = y
    proj = project if project is not None else (lambda v: v)
    h2, h6 = 0.5 * h, h / 6.0
    for k in range(n):
        j = 2 * k
        f1 = rhs(j, y)
        f2 = rhs(j + 1, proj(y + h2 * f1))
        f3 = rhs(j + 1, proj(y + h2 * f2))
        f4 = rhs(j + 2, proj(y + h * f3))
        f2 += f3
        f2 *= 2.0
        f1 += f2
        f1 += f4
        y = proj(y + h6 * f1)
        if check is not None:
            check(T - (k + 1) * h, y)
        if (k + 1) % stride == 0:
            out[n_store - 1 - (k + 1) // stride] = y
    t_store = np.linspace(0.0, T, n_store)
    return t_store, out


def cubic_weights(t: float, t0: float, h: float, n_nodes: int) -> tuple[int, np.ndarray]:
    """Start index and weights of a 4-point Lagrange stencil on a uniform grid.

    Exact grid nodes get a one-hot weight so stored values come back untouched.
    """
    x = (t - t0) / h
    k = int(round(x))
    if abs(x - k) < 1e-9 and 0 <= k < n_nodes:
        return k, np.ones(1)
    if n_nodes < 4:
        j0 = min(max(int(np.floor(x)), 0), n_nodes - 2)
        u = x - j0
        return j0, np.array([1.0 - u, u])
    j0 = min(max(int(np.floor(x)) - 1, 0), n_nodes - 4)
    u = x - j0
    w = np.array(
        [
            -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
            u * (u - 2.0) * (u - 3.0) / 2.0,
            -u * (u - 1.0) * (u - 3.0) / 2.0,
            u * (u - 1.0) * (u - 2.0) / 6.0,
        ]
    )
    return j0, w


def interp_rows(values: np.ndarray, t: float, t0: float, h: float) -> np.ndarray:
    """Cubic interpolation of ``values[k]`` (sampled at ``t0 + k h``) at time ``t``."""
    j0, w = cubic_weights(t, t0, h, values.shape[0])
    return np.tensordot(w, values[j0 : j0 + len(w)], axes=(0, 0))


def simpson_cumulative(y: np.ndarray, h: float) -> np.ndarray:
    """Cumulative integral ``F[k] = int_0^{t_k} y`` on a uniform grid, fourth-order accurate.

    Even nodes use composite Simpson; odd nodes add a cubic-corrected first panel
    so every node carries the same order of accuracy.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    out = np.zeros_like(y)
    if n == 1:
        return out
    if n == 2:
        out[1] = 0.5 * h * (y[0] + y[1])
        return out
    # panel-pair integrals over [t_{2j}, t_{2j+2}]
    pair = h / 3.0 * (y[0:-2:2] + 4.0 * y[1:-1:2] + y[2::2])
    out[2::2] = np.cumsum(pair, axis=0)
    # odd nodes: integral over [t_{2j}, t_{2j+1}] from the quadratic through three nodes
    idx = np.arange(1, n, 2)
    left = idx - 1
    right = np.minimum(idx + 1, n - 1)
    half = np.where(
        (idx + 1 <= n - 1)[(...,) + (None,) * (y.ndim - 1)],
        h / 12.0 * (5.0 * y[left] + 8.0 * y[idx] - y[right]),
        # last odd node with no right neighbour: quadratic through idx-2, idx-1, idx
        h / 12.0 * (-y[np.maximum(idx - 2, 0)] + 8.0 * y[left] + 5.0 * y[idx]),
    )
    out[idx] = out[left] + half
    return out


def solve_linear_ode(rate, forcing, x0: float, h: float, backward: bool = False, max_exponent: float = 30.0) -> np.ndarray:
    """Solve x' = rate x + forcing on a uniform grid by integrating factors.

    ``x0`` is the value at the first node, or at the last node when
    ``backward``. Backward problems are integrated in reversed time so the
    weights never cancel. The grid is cut into chunks over which
    int |rate| stays below ``max_exponent`` to keep the factors in range.
    """
    rate = np.asarray(rate, dtype=float)
    forcing = np.broadcast_to(np.asarray(forcing, dtype=float), rate.shape)
    if backward:
        return solve_linear_ode(-rate[::-1], -forcing[::-1], x0, h, False, max_exponent)[::-1].copy()
    n = rate.shape[0]
    out = np.empty(n)
    out[0] = x0
    budget = np.concatenate(([0.0], np.cumsum(0.5 * h * (np.abs(rate[1:]) + np.abs(rate[:-1])))))
    k0 = 0
    while k0 < n - 1:
        k1 = int(np.searchsorted(budget, budget[k0] + max_exponent, side="right")) - 1
        k1 = min(max(k1, k0 + 2), n - 1)
        if n - 1 - k1 < 2:
            # never leave a one-panel tail, which would fall back to the trapezoid rule
            k1 = n - 1
        sl = slice(k0, k1 + 1)
        R = simpson_cumulative(rate[sl], h)
        out[sl] = np.exp(R) * (out[k0] + simpson_cumulative(np.exp(-R) * forcing[sl], h))
        k0 = k1
    return out
