"""Monte Carlo simulation of the equilibrium market and the daily statistics.

Paths are advanced by Euler-Maruyama. Path ``p`` draws its Brownian
increments from its own generator seeded with ``(seed, p)``, so a path is
the same whichever batch or worker produced it. Node-wise means and
variances are accumulated batch by batch (merged in batch order), and the
per-path daily metrics are kept for every path, so large ensembles never
hold full trajectories unless asked to.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import FeedbackPolicy, price
from .model import MarketModel, TimeGrid, build_noise, validate_market

SIM_DT = 0.01
DEFAULT_CUTOFF = 21.0
WORKERS_ENV = "BESSGAME_WORKERS"
# Largest number of Gaussian draws held per batch.
_BATCH_DRAWS = 4_000_000
TRACKED = ("Q", "S_bar", "alpha_sum", "price_sys", "S_1", "alpha_1", "price_1")
SUMMARY_LEVELS = (0.05, 0.10, 0.20, 0.80, 0.90, 0.95)


def default_grid(horizon: float) -> TimeGrid:
    return TimeGrid.with_step(horizon, SIM_DT)


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def path_rng(seed: int, path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(path)]))


# --------------------------------------------------------------------------
# Statistics on individual paths
# --------------------------------------------------------------------------


def _cutoff_weights(times: np.ndarray, cutoff: float) -> np.ndarray:
    """Trapezoid weights for int_0^cutoff on ``times``, with a partial last panel."""
    w = np.zeros_like(times)
    if cutoff <= times[0]:
        return w
    k = int(np.searchsorted(times, cutoff, side="right")) - 1
    k = min(k, len(times) - 1)
    h = np.diff(times[: k + 1])
    w[:k] += 0.5 * h
    w[1 : k + 1] += 0.5 * h
    if k < len(times) - 1 and cutoff > times[k]:
        # linear interpolation of the integrand over the partial panel
        frac = (cutoff - times[k]) / (times[k + 1] - times[k])
        hp = cutoff - times[k]
        w[k] += hp * (1.0 - 0.5 * frac)
        w[k + 1] += hp * 0.5 * frac
    return w


def _cutoff_index(times: np.ndarray, cutoff: float) -> int:
    """Number of grid nodes with t <= cutoff."""
    return int(np.searchsorted(times, cutoff + 1e-9, side="right"))


def path_TC(times, alpha, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """int_0^cutoff |alpha_t| dt along the time axis 0 of ``alpha``."""
    w = _cutoff_weights(np.asarray(times, dtype=float), cutoff)
    return np.tensordot(w, np.abs(np.asarray(alpha, dtype=float)), axes=(0, 0))


def path_range(times, values, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """max - min over grid nodes with t <= cutoff (time on axis 0)."""
    k = _cutoff_index(np.asarray(times, dtype=float), cutoff)
    v = np.asarray(values, dtype=float)[:k]
    return v.max(axis=0) - v.min(axis=0)


def deterministic_TB(model: MarketModel, cutoff: float | None = None, step: float = 1.0 / 60.0) -> float:
    """Top-to-bottom range of the no-storage price P_bar - c1 theta(t) on a uniform grid."""
    cutoff = model.horizon if cutoff is None else cutoff
    ag = model.agents[0]
    t = np.linspace(0.0, model.horizon, int(round(model.horizon / step)) + 1)
    p = ag.p_bar - ag.c1 * np.broadcast_to(model.theta(t), t.shape)
    return float(path_range(t, p, cutoff))


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PnL:
    """Per-agent profit decomposition in $ over the horizon."""

    revenue: np.ndarray
    dispatch_cost: np.ndarray
    soc_cost: np.ndarray
    terminal_cost: np.ndarray

    @property
    def total_cost(self):
        return self.dispatch_cost + self.soc_cost + self.terminal_cost

    @property
    def net(self):
        return self.revenue - self.total_cost

    @property
    def objective(self):
        """The agent's cost functional J = -revenue + costs."""
        return -self.net


@dataclass(frozen=True, eq=False)
class Path:
    times: np.ndarray
    Q: np.ndarray  # (n_t,)
    S: np.ndarray  # (n_t, N)
    alpha: np.ndarray
    prices: np.ndarray
    increments: np.ndarray  # (n_t - 1, N): S[k+1] = S[k] + increments[k]


@dataclass(frozen=True, eq=False)
class Ensemble:
    model: MarketModel
    grid: TimeGrid
    n_paths: int
    seed: int
    antithetic: bool
    times: np.ndarray
    mean: dict
    var: dict
    tracked: dict | None
    metrics: dict
    pnl: PnL  # arrays (n_paths, N)
    paths: dict | None = None
    cutoffs: tuple = field(default=())

    def std(self, name: str) -> np.ndarray:
        return np.sqrt(self.var[name])

    def stderr(self, name: str) -> np.ndarray:
        return np.sqrt(self.var[name] / self.n_paths)

    def path(self, p: int) -> Path:
        if self.paths is None:
            raise ValueError("ensemble was simulated without keep_paths=True")
        P = self.paths
        return Path(self.times, P["Q"][p], P["S"][p], P["alpha"][p], P["price"][p], P["incr"][p])

    def metric(self, name: str, cutoff: float) -> np.ndarray:
        key = (name, round(float(cutoff), 9))
        if key not in self.metrics:
            raise KeyError(f"metric {name!r} was not recorded for cutoff {cutoff}; pass it in cutoffs=")
        return self.metrics[key]


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


class _Welford:
    """Per-node mean and sum of squared deviations, merged batch by batch."""

    def __init__(self):
        self.n = 0
        self.mean = {}
        self.m2 = {}

    def merge(self, n_b: int, means: dict, m2s: dict):
        for k, mb in means.items():
            m2b = m2s[k]
            if self.n == 0:
                self.mean[k], self.m2[k] = mb, m2b
                continue
            delta = mb - self.mean[k]
            tot = self.n + n_b
            self.mean[k] = self.mean[k] + delta * (n_b / tot)
            self.m2[k] = self.m2[k] + m2b + delta**2 * (self.n * n_b / tot)
        self.n += n_b

    def variance(self):
        denom = max(self.n - 1, 1)
        return {k: v / denom for k, v in self.m2.items()}


def _batch_size(n_steps: int, n: int) -> int:
    return max(1, min(512, _BATCH_DRAWS // (n_steps * (n + 1))))


def _draws(seed: int, path_ids: np.ndarray, n_steps: int, dim: int, antithetic: bool) -> np.ndarray:
    out = np.empty((len(path_ids), n_steps, dim))
    for j, p in enumerate(path_ids):
        if antithetic:
            out[j] = path_rng(seed, p // 2).standard_normal((n_steps, dim))
            if p % 2:
                out[j] *= -1.0
        else:
            out[j] = path_rng(seed, p).standard_normal((n_steps, dim))
    return out


_SCALARS = ("Q", "S_bar", "alpha_sum", "price_sys")
_VECTORS = ("S", "alpha", "price")


def _run_batch(ctx: dict, path_ids: np.ndarray) -> dict:
    model: MarketModel = ctx["model"]
    gp = ctx["policy"]
    times = ctx["times"]
    dt = ctx["dt"]
    n = model.n_agents
    n_t = len(times)
    B = len(path_ids)
    if ctx["normals"] is None:
        dW = _draws(ctx["seed"], path_ids, n_t - 1, n + 1, ctx["antithetic"])
    else:
        dW = np.array(ctx["normals"][path_ids], dtype=float)
    dW *= math.sqrt(dt)
    noise = dW @ ctx["sigma"].T  # (B, n_steps, N+1)
    theta, a, b, zeta = ctx["theta"], ctx["a"], ctx["b"], ctx["zeta"]
    kappa = model.kappa
    ag = model.agents[0]
    c2, c3, c4 = ctx["c2"], ctx["c3"], ctx["c4"]

    Q = np.full(B, float(model.q0))
    S = np.broadcast_to(ctx["s0"], (B, n)).copy()
    keep = ctx["keep_paths"]
    track = ctx["track"]
    means = {k: np.empty(n_t) for k in _SCALARS}
    means.update({k: np.empty((n_t, n)) for k in _VECTORS})
    m2s = {k: np.empty_like(v) for k, v in means.items()}
    series = {k: np.empty((B, n_t)) for k in TRACKED} if track else None
    full = {k: np.empty((B, n_t, n)) for k in _VECTORS} if keep else None
    q_full = np.empty((B, n_t)) if keep else None
    incr_log = np.empty((B, n_t - 1, n)) if keep else None
    cut_idx = ctx["cut_idx"]
    w_cut = ctx["w_cut"]
    tc = {c: np.zeros((B, n)) for c in cut_idx}
    hi = {c: {} for c in cut_idx}
    lo = {c: {} for c in cut_idx}
    revenue = np.zeros((B, n))
    disp = np.zeros((B, n))
    soc = np.zeros((B, n))
    w_full = ctx["w_full"]
    q_sum = np.zeros(B)  # sum of Q over steps 0..n_t-2 weighted by b, for the mean-field limit
    b_bar, a_bar = ctx["b_bar"], ctx["a_bar"]

    for k in range(n_t):
        alpha = gp.control(k, Q, S)
        pr = price(model, Q, alpha)
        asum = alpha.sum(axis=1)
        values = {
            "Q": Q,
            "S_bar": S.mean(axis=1),
            "alpha_sum": asum,
            "price_sys": ag.p_bar - ag.c1 * (Q - asum),
            "S": S,
            "alpha": alpha,
            "price": pr,
            "nobess": ag.p_bar - ag.c1 * Q,
        }
        for name in _SCALARS + _VECTORS:
            v = values[name]
            mv = v.mean(axis=0)
            means[name][k] = mv
            m2s[name][k] = ((v - mv) ** 2).sum(axis=0)
        if track:
            series["Q"][:, k] = Q
            series["S_bar"][:, k] = values["S_bar"]
            series["alpha_sum"][:, k] = asum
            series["price_sys"][:, k] = values["price_sys"]
            series["S_1"][:, k] = S[:, 0]
            series["alpha_1"][:, k] = alpha[:, 0]
            series["price_1"][:, k] = pr[:, 0]
        if keep:
            q_full[:, k] = Q
            full["S"][:, k] = S
            full["alpha"][:, k] = alpha
            full["price"][:, k] = pr
        absa = np.abs(alpha)
        for c, kc in cut_idx.items():
            wc = w_cut[c][k]
            if wc:
                tc[c] += wc * absa
            if k < kc:
                for name, v in (("S", S), ("price", pr), ("price_sys", values["price_sys"]), ("nobess", values["nobess"]), ("absa", absa)):
                    if k == 0:
                        hi[c][name] = v.copy()
                        lo[c][name] = v.copy()
                    else:
                        np.maximum(hi[c][name], v, out=hi[c][name])
                        np.minimum(lo[c][name], v, out=lo[c][name])
        wk = w_full[k]
        revenue -= wk * pr * alpha
        disp += wk * c2 * alpha * alpha
        dev = S - zeta[k]
        soc += wk * c3 * dev * dev
        if k == n_t - 1:
            break
        q_sum += b_bar[k] * Q
        incr = (a[k] + b[k] * Q[:, None] + alpha) * dt + noise[:, k, 1:]
        if keep:
            incr_log[:, k] = incr
        Q = Q + kappa * (theta[k] - Q) * dt + noise[:, k, 0]
        S = S + incr

    terminal = c4 * (S - zeta[-1]) ** 2
    metrics = {}
    for c in cut_idx:
        metrics[("TC", c)] = tc[c]
        metrics[("TS", c)] = hi[c]["S"] - lo[c]["S"]
        metrics[("TB", c)] = hi[c]["price"] - lo[c]["price"]
        metrics[("TB_sys", c)] = hi[c]["price_sys"] - lo[c]["price_sys"]
        metrics[("TB_nobess", c)] = hi[c]["nobess"] - lo[c]["nobess"]
        metrics[("max_dispatch", c)] = hi[c]["absa"]
    T = round(float(model.horizon), 9)
    metrics[("S_T", T)] = S
    metrics[("S_bar_T", T)] = S.mean(axis=1)
    # mean-field limit of the average SOC, driven by the same common noise
    metrics[("S_bar_star_T", T)] = (
        ctx["s0"].mean() + a_bar[:-1].sum() * dt + q_sum * dt + ctx["sigma_rho"] * dW[:, :, 0].sum(axis=1)
    )
    out = {"n": B, "means": means, "m2s": m2s, "pnl": (revenue, disp, soc, terminal), "metrics": metrics}
    if track:
        out["tracked"] = series
    if keep:
        out["paths"] = {"Q": q_full, "S": full["S"], "alpha": full["alpha"], "price": full["price"], "incr": incr_log}
    return out


def simulate_paths(
    model: MarketModel,
    policy: FeedbackPolicy,
    grid: TimeGrid | None = None,
    n_paths: int = 1000,
    seed: int = 0,
    *,
    antithetic: bool = False,
    cutoffs=(DEFAULT_CUTOFF,),
    keep_paths: bool = False,
    track: bool | None = None,
    workers: int | None = None,
    normals: np.ndarray | None = None,
) -> Ensemble:
    """Simulate ``n_paths`` equilibrium paths.

    ``cutoffs`` lists the hours T° for which per-path TC/TS/TB metrics are
    recorded. ``track`` keeps the seven scalar series in ``TRACKED`` for
    quantile bands (default: when they fit in about 400 MB). ``normals``
    replaces the seeded draws with given standard normals of shape
    (n_paths, n_steps, N + 1), e.g. to couple grids of different resolution.
    """
    validate_market(model)
    if policy.n_agents != model.n_agents:
        raise ValueError(f"policy has {policy.n_agents} agents but the model has {model.n_agents}")
    if grid is None:
        grid = default_grid(model.horizon)
    if abs(grid.horizon - model.horizon) > 1e-12:
        raise ValueError("simulation grid must span the model horizon")
    if antithetic and n_paths % 2:
        raise ValueError("antithetic sampling needs an even number of paths")
    times = grid.nodes
    n = model.n_agents
    if normals is not None and np.shape(normals) != (n_paths, grid.n_steps, n + 1):
        raise ValueError(f"normals must have shape {(n_paths, grid.n_steps, n + 1)}")
    if track is None:
        track = n_paths * len(times) * len(TRACKED) <= 50_000_000
    cutoffs = tuple(sorted({round(float(c), 9) for c in cutoffs if c <= model.horizon + 1e-12}))
    sig = build_noise(model)
    ctx = {
        "model": model,
        "policy": policy.on_grid(times),
        "times": times,
        "dt": grid.dt,
        "seed": seed,
        "antithetic": antithetic,
        "sigma": sig,
        "theta": np.broadcast_to(model.theta(times), times.shape).astype(float),
        "a": model.curves_at("a", times),
        "b": model.curves_at("b", times),
        "zeta": model.curves_at("zeta", times),
        "c2": model.vector("c2"),
        "c3": model.vector("c3"),
        "c4": model.vector("c4"),
        "s0": model.vector("s0"),
        "keep_paths": keep_paths,
        "normals": normals,
        "track": track,
        "cut_idx": {c: _cutoff_index(times, c) for c in cutoffs},
        "w_cut": {c: _cutoff_weights(times, c) for c in cutoffs},
        "w_full": _cutoff_weights(times, model.horizon),
        "sigma_rho": float(np.mean(model.vector("sigma") * model.vector("rho"))),
    }
    ctx["a_bar"] = ctx["a"].mean(axis=1)
    ctx["b_bar"] = ctx["b"].mean(axis=1)

    bs = _batch_size(grid.n_steps, n)
    batches = [np.arange(s, min(s + bs, n_paths)) for s in range(0, n_paths, bs)]
    nw = worker_count(workers)
    acc = _Welford()
    metrics: dict = {}
    pnl_parts = []
    tracked_parts = []
    path_parts = []

    def consume(res):
        acc.merge(res["n"], res["means"], res["m2s"])
        for k, v in res["metrics"].items():
            metrics.setdefault(k, []).append(v)
        pnl_parts.append(res["pnl"])
        if track:
            tracked_parts.append(res["tracked"])
        if keep_paths:
            path_parts.append(res["paths"])

    if nw == 1 or len(batches) == 1:
        for ids in batches:
            consume(_run_batch(ctx, ids))
    else:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            # map preserves batch order, so merging is independent of nw
            for res in ex.map(lambda ids: _run_batch(ctx, ids), batches):
                consume(res)

    metrics = {k: np.concatenate(v, axis=0) for k, v in metrics.items()}
    pnl = PnL(*(np.concatenate([p[j] for p in pnl_parts], axis=0) for j in range(4)))
    tracked = {k: np.concatenate([t[k] for t in tracked_parts], axis=0) for k in TRACKED} if track else None
    paths = {k: np.concatenate([p[k] for p in path_parts], axis=0) for k in path_parts[0]} if keep_paths else None
    return Ensemble(
        model, grid, n_paths, seed, antithetic, times, acc.mean, acc.variance(), tracked, metrics, pnl, paths, cutoffs
    )


# --------------------------------------------------------------------------
# Ensemble statistics
# --------------------------------------------------------------------------


def _metric(ens: Ensemble, name: str, cutoff: float) -> np.ndarray:
    try:
        return ens.metric(name, cutoff)
    except KeyError:
        if ens.paths is None:
            raise
    P = ens.paths
    t = ens.times
    if name == "TC":
        return path_TC(t, np.moveaxis(P["alpha"], 1, 0), cutoff)
    if name == "TS":
        return path_range(t, np.moveaxis(P["S"], 1, 0), cutoff)
    if name == "TB":
        return path_range(t, np.moveaxis(P["price"], 1, 0), cutoff)
    raise


def stat_TC(ens: Ensemble, t_cutoff: float = DEFAULT_CUTOFF, agent: int | None = None) -> float:
    """Average total charge/discharge E[int_0^T° |alpha|], over paths and agents (or one agent)."""
    v = _metric(ens, "TC", t_cutoff)
    return float(v.mean() if agent is None else v[:, agent].mean())


def stat_TS(ens: Ensemble, t_cutoff: float = DEFAULT_CUTOFF, agent: int | None = None) -> float:
    """Average storage utilization E[max S - min S] on [0, T°]."""
    v = _metric(ens, "TS", t_cutoff)
    return float(v.mean() if agent is None else v[:, agent].mean())


def stat_TB(ens: Ensemble, t_cutoff: float = DEFAULT_CUTOFF, which: str = "agent", agent: int | None = None) -> float:
    """Average top-to-bottom price range on [0, T°].

    ``which`` selects the agent prices ("agent"), the all-ones system price
    ("system") or the price the same supply paths give without storage
    ("nobess").
    """
    if which == "agent":
        v = _metric(ens, "TB", t_cutoff)
        return float(v.mean() if agent is None else v[:, agent].mean())
    key = {"system": "TB_sys", "nobess": "TB_nobess"}[which]
    return float(ens.metric(key, t_cutoff).mean())


def stat_TB_mean(ens: Ensemble, t_cutoff: float = DEFAULT_CUTOFF, which: str = "agent", agent: int = 0) -> float:
    """Top-to-bottom range of the ensemble-mean price curve on [0, T°].

    This is the spread of the expected daily price profile, as opposed to
    :func:`stat_TB` which averages the per-path spreads.
    """
    if which == "agent":
        curve = ens.mean["price"][:, agent]
    elif which == "system":
        curve = ens.mean["price_sys"]
    elif which == "nobess":
        ag = ens.model.agents[agent]
        curve = ag.p_bar - ag.c1 * ens.mean["Q"]
    else:
        raise ValueError(f"unknown price selector {which!r}")
    return float(path_range(ens.times, curve, t_cutoff))


def pnl(path: Path, model: MarketModel, i: int) -> PnL:
    """Profit decomposition of agent ``i`` (0-based) along one path, by trapezoid."""
    t = path.times
    w = _cutoff_weights(t, t[-1])
    ag = model.agents[i]
    a = path.alpha[:, i]
    s = path.S[:, i]
    zeta = np.broadcast_to(ag.zeta(t), t.shape)
    revenue = -float(w @ (path.prices[:, i] * a))
    disp = float(w @ (ag.c2 * a * a))
    soc = float(w @ (ag.c3 * (s - zeta) ** 2))
    term = float(ag.c4 * (s[-1] - zeta[-1]) ** 2)
    return PnL(np.float64(revenue), np.float64(disp), np.float64(soc), np.float64(term))


@dataclass(frozen=True)
class Bands:
    levels: tuple
    lower: dict  # level -> array
    upper: dict
    median: np.ndarray


def _bands_from(values: np.ndarray, levels) -> Bands:
    values = np.asarray(values, dtype=float)
    lower, upper = {}, {}
    for p in levels:
        lo, hi = np.quantile(values, [(1.0 - p) / 2.0, (1.0 + p) / 2.0], axis=0)
        lower[p], upper[p] = lo, hi
    return Bands(tuple(levels), lower, upper, np.quantile(values, 0.5, axis=0))


def quantile_bands(ens, levels=(0.6, 0.8, 0.9, 0.95), variable: str = "price_sys") -> Bands:
    """Symmetric central bands per node; ``ens`` may be an Ensemble or an array (paths, nodes)."""
    if isinstance(ens, Ensemble):
        if ens.tracked is None:
            raise ValueError("ensemble did not track series; simulate with track=True")
        return _bands_from(ens.tracked[variable], levels)
    return _bands_from(ens, levels)


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------


def write_paths_csv(ens: Ensemble, path: str, max_paths: int | None = None) -> None:
    if ens.paths is None:
        raise ValueError("ensemble was simulated without keep_paths=True")
    n = ens.model.n_agents
    head = ["path_id", "t", "Q"] + [f"S_{i+1}" for i in range(n)] + [f"alpha_{i+1}" for i in range(n)] + [f"P_{i+1}" for i in range(n)]
    P = ens.paths
    m = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for p in range(m):
            for k, t in enumerate(ens.times):
                w.writerow([p, f"{t:.6g}", repr(float(P["Q"][p, k]))] + P["S"][p, k].tolist() + P["alpha"][p, k].tolist() + P["price"][p, k].tolist())


def summary_rows(ens: Ensemble):
    """Rows (t, variable, mean, std, q05, q10, q20, q80, q90, q95)."""
    for name in ("Q", "S_bar", "alpha_sum", "price_sys"):
        mean, std = ens.mean[name], ens.std(name)
        qs = np.quantile(ens.tracked[name], SUMMARY_LEVELS, axis=0) if ens.tracked is not None else None
        for k, t in enumerate(ens.times):
            q = qs[:, k].tolist() if qs is not None else [""] * len(SUMMARY_LEVELS)
            yield [t, name, mean[k], std[k]] + q
    n = ens.model.n_agents
    for name in ("S", "alpha", "price"):
        mean, std = ens.mean[name], ens.std(name)
        for i in range(n):
            qs = None
            if ens.tracked is not None and i == 0:
                qs = np.quantile(ens.tracked[f"{name}_1"], SUMMARY_LEVELS, axis=0)
            for k, t in enumerate(ens.times):
                q = qs[:, k].tolist() if qs is not None else [""] * len(SUMMARY_LEVELS)
                yield [t, f"{name}_{i+1}", mean[k, i], std[k, i]] + q


def write_summary_csv(ens: Ensemble, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "variable", "mean", "std", "q05", "q10", "q20", "q80", "q90", "q95"])
        w.writerows(summary_rows(ens))
