"""Study drivers shared by the command line and the acceptance suite.

Each driver returns plain dataclasses; formatting and file output live in
the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RiccatiBlowUpError
from .equilibrium import FeedbackPolicy, equilibrium_policy
from .model import MarketModel, TimeGrid
from .riccati_general import DEFAULT_DT, solve_general_batch
from .scenarios import sample_heterogeneous_market, sample_theta_market, two_class_market
from .simulate import DEFAULT_CUTOFF, SIM_DT, simulate_paths, stat_TB_mean

MAX_BATCH = 10


def mean_ensemble(model: MarketModel, policy: FeedbackPolicy, seed: int = 0, cutoffs=(DEFAULT_CUTOFF,)):
    """One antithetic pair. The state is linear Gaussian and the policy affine,
    so the pair average is the exact mean of the Euler scheme."""
    return simulate_paths(model, policy, n_paths=2, seed=seed, antithetic=True, cutoffs=cutoffs, workers=1)


@dataclass(frozen=True)
class TBReduction:
    tb_with: float  # TB of the expected system price
    tb_without: float  # TB of the expected price with no storage
    reduction: float  # 1 - tb_with / tb_without


def tb_reduction(ens, t_cutoff: float = DEFAULT_CUTOFF) -> TBReduction:
    with_ = stat_TB_mean(ens, t_cutoff, "system")
    without = stat_TB_mean(ens, t_cutoff, "nobess")
    return TBReduction(with_, without, 1.0 - with_ / without)


def _riccati_grid(horizon: float, dt: float) -> tuple[TimeGrid, int]:
    grid = TimeGrid.with_step(horizon, dt)
    stride = max(1, int(round(SIM_DT / dt)))
    return grid, stride


def _solve_chunk(chunk, dt: float, min_dt: float):
    # explicit RK4 loses stability as N grows; halve the step on blow-up
    while True:
        grid, stride = _riccati_grid(chunk[0].horizon, dt)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return solve_general_batch(chunk, grid, store_every=stride)
        except RiccatiBlowUpError:
            if dt / 2 < min_dt:
                raise
            dt /= 2


def batched_policies(models, dt: float = 2 * DEFAULT_DT, batch: int = MAX_BATCH, min_dt: float = DEFAULT_DT / 4):
    """General solves of same-size markets in batches; yields one policy per model in order."""
    models = list(models)
    for i in range(0, len(models), batch):
        for sol in _solve_chunk(models[i : i + batch], dt, min_dt):
            yield FeedbackPolicy.from_general(sol)


GENERATORS = {"heterogeneous": sample_heterogeneous_market, "theta": sample_theta_market}


def randomized_tb_study(kind: str, seeds, n: int = 10, dt: float = 2 * DEFAULT_DT, t_cutoff: float = DEFAULT_CUTOFF):
    """Percent TB reduction for each randomly drawn market of one family."""
    gen = GENERATORS[kind]
    models = [gen(int(s), n) for s in seeds]
    out = []
    for m, pol in zip(models, batched_policies(models, dt)):
        out.append(tb_reduction(mean_ensemble(m, pol, cutoffs=(t_cutoff,)), t_cutoff))
    return out


@dataclass(frozen=True)
class CompetitionRow:
    n: int
    n_hybrid: int
    mean_price: float  # (1/T) int_0^T E[P_t] dt
    times: np.ndarray
    price_curve: np.ndarray


def competition_study(n_values=(4, 8, 12, 16, 20, 24), n_hybrid: int = 4, grid=None):
    """Time-averaged expected price with ``n_hybrid`` hybrids and N - n_hybrid arbitrageurs."""
    rows = []
    for n in n_values:
        m = two_class_market(n_hybrid, n - n_hybrid)
        ens = mean_ensemble(m, equilibrium_policy(m, grid))
        curve = ens.mean["price_sys"]
        avg = float(np.trapezoid(curve, ens.times) / m.horizon)
        rows.append(CompetitionRow(n, n_hybrid, avg, ens.times, curve))
    return rows


def relative_decline(rows) -> float:
    """Relative drop of the time-averaged price from the first to the last row."""
    return 1.0 - rows[-1].mean_price / rows[0].mean_price
