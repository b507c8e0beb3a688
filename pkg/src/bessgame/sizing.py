"""Markets where operators control blocks of identical storage units.

A block of ``size`` units is one agent whose SOC is the sum of its units'
SOCs. Cost coefficients are divided by the size so that a block following
the same per-unit dispatch as ``size`` independent units pays the same cost,
and the idiosyncratic volatility grows like sqrt(size).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .model import AgentParams, Constant, MarketModel
from .scenarios import arbitrageur_agent, baseline_market
from .simulate import DEFAULT_CUTOFF, Ensemble, simulate_paths

DEFAULT_PATHS = 2000


@dataclass(frozen=True)
class BlockSpec:
    size: int  # units per operator
    count: int  # operators of this size

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise DomainError("block size must be a positive integer")
        if int(self.count) != self.count or self.count < 0:
            raise DomainError("block count must be a non-negative integer")


def total_units(blocks) -> int:
    return sum(b.size * b.count for b in blocks)


def major_minor_blocks(M: int, m: int, N: int) -> list[BlockSpec]:
    """One Major operator of size M and (N - M)/m Minor operators of size m."""
    if M > N or M < 1 or m < 1:
        raise DomainError("need 1 <= M <= N and m >= 1")
    rest = N - M
    if rest % m:
        raise DomainError(f"N - M = {rest} is not a multiple of m = {m}")
    blocks = [BlockSpec(M, 1)]
    if rest:
        blocks.append(BlockSpec(m, rest // m))
    return blocks


def _is_arbitrageur(ag: AgentParams) -> bool:
    zero = Constant(0.0)
    return ag.a == zero and ag.b == zero


NOISE_SCALINGS = ("sqrt", "linear")


def scale_agent(base: AgentParams, size: int, noise_scaling: str = "sqrt") -> AgentParams:
    """The agent standing for a block of ``size`` units of ``base``.

    ``noise_scaling`` "sqrt" treats the units' shocks as independent;
    "linear" treats them as perfectly correlated.
    """
    if noise_scaling not in NOISE_SCALINGS:
        raise DomainError(f"noise_scaling must be one of {NOISE_SCALINGS}")
    vol = math.sqrt(size) if noise_scaling == "sqrt" else float(size)
    z = base.zeta
    zeta = Constant(size * z.value) if isinstance(z, Constant) else _ScaledCurve(z, float(size))
    return replace(
        base,
        c2=base.c2 / size,
        c3=base.c3 / size,
        c4=base.c4 / size,
        zeta=zeta,
        sigma=base.sigma * vol,
        s0=base.s0 * size,
    )


@dataclass(frozen=True)
class _ScaledCurve:
    inner: object
    factor: float

    def __call__(self, t):
        return self.factor * np.asarray(self.inner(t), dtype=float)

    def to_dict(self):
        raise DomainError("scaled SOC targets are only serialisable for constant zeta")


def build_block_market(
    base: AgentParams | None = None,
    blocks=(),
    template: MarketModel | None = None,
    n_units: int | None = None,
    noise_scaling: str = "sqrt",
) -> MarketModel:
    """One agent per operator, ordered as listed in ``blocks``.

    ``template`` supplies the supply process and horizon (default: the
    reference market). ``base`` must be a unit-size arbitrageur with zero
    noise correlation.
    """
    base = base if base is not None else arbitrageur_agent(rho=0.0)
    if not _is_arbitrageur(base):
        raise DomainError("block markets require arbitrageur units (a = b = 0)")
    if base.rho != 0.0:
        raise DomainError("block markets require rho = 0")
    blocks = [b for b in blocks if b.count > 0]
    if not blocks:
        raise DomainError("at least one operator is required")
    if n_units is not None and total_units(blocks) != n_units:
        raise DomainError(f"blocks cover {total_units(blocks)} units, expected {n_units}")
    template = template or baseline_market(1)
    agents = []
    for b in blocks:
        ag = base if b.size == 1 else scale_agent(base, b.size, noise_scaling)
        agents.extend([ag] * b.count)
    return template.with_agents(agents)


def operator_sizes(blocks) -> np.ndarray:
    return np.concatenate([np.full(b.count, b.size) for b in blocks if b.count > 0])


@dataclass(frozen=True)
class OperatorRow:
    kind: str  # "major", "minor" or "unit"
    size: int
    count: int
    dispatch: float  # E[max |alpha|] of one operator
    dispatch_ratio: float
    share: float  # share of the summed operator dispatch held by this block
    per_unit_revenue: float
    per_unit_cost: float
    per_unit_net: float


@dataclass(frozen=True)
class DispatchReport:
    rows: tuple
    baseline: float
    aggregate_ratio: float  # sum over operators of E[max|alpha|] / (N * baseline)
    n_units: int

    def row(self, kind: str) -> OperatorRow:
        for r in self.rows:
            if r.kind == kind:
                return r
        raise KeyError(kind)


def unit_baseline(n_units: int, base: AgentParams | None = None, template: MarketModel | None = None, n_paths: int = DEFAULT_PATHS, seed: int = 0, grid=None, workers=None, t_cutoff: float = DEFAULT_CUTOFF) -> float:
    """E[max_{t <= T°} |alpha|] of one unit in the market of ``n_units`` unit operators."""
    from .equilibrium import equilibrium_policy

    m = build_block_market(base, [BlockSpec(1, n_units)], template)
    ens = simulate_paths(m, equilibrium_policy(m, grid), n_paths=n_paths, seed=seed, workers=workers, cutoffs=(t_cutoff,))
    return float(ens.metric("max_dispatch", t_cutoff).mean())


def dispatch_metrics(ens: Ensemble, blocks, baseline_ref: float, t_cutoff: float = DEFAULT_CUTOFF) -> DispatchReport:
    """Per-operator dispatch ratios, dispatch shares and per-unit profit and loss."""
    blocks = [b for b in blocks if b.count > 0]
    sizes = operator_sizes(blocks)
    if len(sizes) != ens.model.n_agents:
        raise DomainError("blocks do not match the simulated market")
    peak = ens.metric("max_dispatch", t_cutoff).mean(axis=0)  # per operator
    pnl = ens.pnl
    rev = pnl.revenue.mean(axis=0) / sizes
    cost = pnl.total_cost.mean(axis=0) / sizes
    total = float(peak.sum())
    rows = []
    start = 0
    kinds = _block_kinds(blocks)
    for b, kind in zip(blocks, kinds):
        sl = slice(start, start + b.count)
        start += b.count
        d = float(peak[sl].mean())
        rows.append(
            OperatorRow(
                kind, b.size, b.count, d, d / baseline_ref, float(peak[sl].sum()) / total,
                float(rev[sl].mean()), float(cost[sl].mean()), float((rev[sl] - cost[sl]).mean()),
            )
        )
    n_units = total_units(blocks)
    return DispatchReport(tuple(rows), baseline_ref, total / (n_units * baseline_ref), n_units)


def _block_kinds(blocks) -> list[str]:
    if len(blocks) == 1:
        return ["unit" if blocks[0].size == 1 else "major"]
    return ["major"] + ["minor"] * (len(blocks) - 1)


def run_block_market(
    blocks,
    base=None,
    template=None,
    baseline_ref=None,
    n_paths: int = DEFAULT_PATHS,
    seed: int = 0,
    grid=None,
    workers=None,
    t_cutoff: float = DEFAULT_CUTOFF,
    noise_scaling: str = "sqrt",
) -> DispatchReport:
    """Build, solve and simulate one block market, then report its metrics."""
    from .equilibrium import equilibrium_policy

    model = build_block_market(base, blocks, template, noise_scaling=noise_scaling)
    if baseline_ref is None:
        baseline_ref = unit_baseline(total_units(blocks), base, template, n_paths, seed, grid, workers, t_cutoff)
    ens = simulate_paths(model, equilibrium_policy(model, grid), n_paths=n_paths, seed=seed, workers=workers, cutoffs=(t_cutoff,))
    return dispatch_metrics(ens, blocks, baseline_ref, t_cutoff)


def write_report_csv(entries, path: str) -> None:
    """``entries`` is an iterable of ``(M, m, DispatchReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "m", "operator_type", "dispatch_ratio", "per_unit_revenue", "per_unit_cost", "per_unit_net"])
        for M, m, rep in entries:
            for r in rep.rows:
                w.writerow([M, m, r.kind, r.dispatch_ratio, r.per_unit_revenue, r.per_unit_cost, r.per_unit_net])
