"""Market model: time curves, agent parameters, noise structure and JSON configs.

All times are in hours. Curves are small symbolic objects rather than
closures so that a market can be written to and read back from JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from .errors import DomainError, ModelValidationError

ArrayLike = Union[float, np.ndarray]


# --------------------------------------------------------------------------
# Curves
# --------------------------------------------------------------------------


class Curve:
    """Deterministic function of time. Subclasses are frozen dataclasses."""

    kind: str = ""

    def __call__(self, t: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def scaled(self, factor: float) -> "Curve":
        """Return ``factor * self`` as a curve of the same family."""
        raise NotImplementedError

    def is_zero(self) -> bool:
        return False


def _as_float_array(t):
    return np.asarray(t, dtype=float)


@dataclass(frozen=True)
class Constant(Curve):
    value: float
    kind = "constant"

    def __call__(self, t):
        t = _as_float_array(t)
        out = np.full(t.shape, float(self.value))
        return out if out.ndim else float(out)

    def to_dict(self):
        return {"type": self.kind, "value": float(self.value)}

    def scaled(self, factor):
        return Constant(self.value * factor)

    def is_zero(self):
        return self.value == 0.0


@dataclass(frozen=True)
class PiecewiseLinear(Curve):
    """Linear interpolation between ``(time, value)`` knots, flat outside them."""

    knots: tuple[tuple[float, float], ...]
    kind = "piecewise_linear"

    def __post_init__(self):
        knots = tuple((float(a), float(b)) for a, b in self.knots)
        if len(knots) < 1:
            raise ValueError("piecewise-linear curve needs at least one knot")
        times = [k[0] for k in knots]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("piecewise-linear knots must be strictly increasing in time")
        object.__setattr__(self, "knots", knots)

    def __call__(self, t):
        t = _as_float_array(t)
        xs = np.array([k[0] for k in self.knots])
        ys = np.array([k[1] for k in self.knots])
        out = np.interp(t, xs, ys)
        return out if np.ndim(out) else float(out)

    def to_dict(self):
        return {"type": self.kind, "knots": [list(k) for k in self.knots]}

    def scaled(self, factor):
        return PiecewiseLinear(tuple((a, b * factor) for a, b in self.knots))

    def is_zero(self):
        return all(v == 0.0 for _, v in self.knots)


@dataclass(frozen=True)
class SinusoidSum(Curve):
    """``offset + sum(amp * sin(freq * t + phase))``."""

    offset: float
    terms: tuple[tuple[float, float, float], ...] = ()
    kind = "sinusoid_sum"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(tuple(float(x) for x in term) for term in self.terms))

    def __call__(self, t):
        t = _as_float_array(t)
        out = np.full(t.shape, float(self.offset))
        for amp, freq, phase in self.terms:
            out = out + amp * np.sin(freq * t + phase)
        return out if out.ndim else float(out)

    def to_dict(self):
        return {
            "type": self.kind,
            "offset": self.offset,
            "terms": [{"amp": a, "freq": f, "phase": p} for a, f, p in self.terms],
        }

    def scaled(self, factor):
        return SinusoidSum(self.offset * factor, tuple((a * factor, f, p) for a, f, p in self.terms))

    def is_zero(self):
        return self.offset == 0.0 and all(a == 0.0 for a, _, _ in self.terms)


@dataclass(frozen=True)
class ClampedSinusoid(Curve):
    """``max(floor, amplitude * sin(freq * t + phase))``."""

    amplitude: float
    freq: float
    phase: float
    floor: float = 0.0
    kind = "clamped_sinusoid"

    def __call__(self, t):
        t = _as_float_array(t)
        out = np.maximum(self.floor, self.amplitude * np.sin(self.freq * t + self.phase))
        return out if np.ndim(out) else float(out)

    def to_dict(self):
        return {
            "type": self.kind,
            "amplitude": self.amplitude,
            "freq": self.freq,
            "phase": self.phase,
            "floor": self.floor,
        }

    def scaled(self, factor):
        if factor < 0:
            raise ValueError("clamped sinusoid can only be scaled by a non-negative factor")
        return ClampedSinusoid(self.amplitude * factor, self.freq, self.phase, self.floor * factor)

    def is_zero(self):
        return self.amplitude == 0.0 and self.floor == 0.0


@dataclass(frozen=True)
class Table(Curve):
    """Samples on the uniform grid ``t0 + k * dt`` with linear interpolation."""

    t0: float
    dt: float
    values: tuple[float, ...]
    kind = "table"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("table curve needs a positive spacing")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __call__(self, t):
        t = _as_float_array(t)
        xs = self.t0 + self.dt * np.arange(len(self.values))
        out = np.interp(t, xs, np.asarray(self.values))
        return out if np.ndim(out) else float(out)

    def to_dict(self):
        return {"type": self.kind, "t0": self.t0, "dt": self.dt, "values": list(self.values)}

    def scaled(self, factor):
        return Table(self.t0, self.dt, tuple(v * factor for v in self.values))

    def is_zero(self):
        return all(v == 0.0 for v in self.values)


def curve_from_dict(data: Any) -> Curve:
    """Parse a tagged-union curve description; bare numbers become constants."""
    if isinstance(data, (int, float)):
        return Constant(float(data))
    kind = data.get("type")
    if kind == "constant":
        return Constant(float(data["value"]))
    if kind == "piecewise_linear":
        return PiecewiseLinear(tuple(tuple(k) for k in data["knots"]))
    if kind == "sinusoid_sum":
        terms = tuple((t["amp"], t["freq"], t["phase"]) for t in data.get("terms", []))
        return SinusoidSum(float(data["offset"]), terms)
    if kind == "clamped_sinusoid":
        return ClampedSinusoid(data["amplitude"], data["freq"], data["phase"], data.get("floor", 0.0))
    if kind == "table":
        return Table(data["t0"], data["dt"], tuple(data["values"]))
    raise ValueError(f"unknown curve type {kind!r}")


def eval_curve(curve: Curve, t: ArrayLike, horizon: float) -> ArrayLike:
    """Evaluate ``curve`` at ``t`` after checking ``0 <= t <= horizon``."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > horizon) or np.any(~np.isfinite(arr)):
        raise DomainError(f"time {t!r} outside [0, {horizon}]")
    return curve(t)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentParams:
    """Cost, generation and noise parameters of one battery operator."""

    a: Curve = field(default_factory=lambda: Constant(0.0))
    b: Curve = field(default_factory=lambda: Constant(0.0))
    sigma: float = 0.0
    rho: float = 0.0
    p_bar: float = 50.0
    c1: float = 1.0
    c2: float = 0.1
    c3: float = 0.25
    c4: float = 100.0
    zeta: Curve = field(default_factory=lambda: Constant(5.0))
    s0: float = 5.0

    @property
    def is_arbitrageur(self) -> bool:
        return self.a.is_zero() and self.b.is_zero()

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, Curve) else float(v)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AgentParams":
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            v = data[f.name]
            kwargs[f.name] = curve_from_dict(v) if f.name in ("a", "b", "zeta") else float(v)
        return cls(**kwargs)


def _frozen_array(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketModel:
    """An N-operator market sharing one exogenous supply process."""

    agents: tuple[AgentParams, ...]
    kappa: float = 5.0
    theta: Curve = field(default_factory=lambda: Constant(30.0))
    sigma0: float = 5.0
    q0: float = 30.0
    horizon: float = 24.0
    weights: np.ndarray | None = None  # None means every weight is one

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.weights is not None:
            w = _frozen_array(self.weights)
            n = len(self.agents)
            if w.shape == (n, n) and bool(np.all(w == 1.0)):
                w = None
            object.__setattr__(self, "weights", w)

    @property
    def W(self) -> np.ndarray:
        """The price-impact weight matrix, materialised on demand."""
        if self.weights is not None:
            return self.weights
        n = len(self.agents)
        return _frozen_array(np.ones((n, n)))

    @property
    def uniform_weights(self) -> bool:
        return self.weights is None

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def __eq__(self, other):
        if not isinstance(other, MarketModel):
            return NotImplemented
        return (
            self.agents == other.agents
            and self.kappa == other.kappa
            and self.theta == other.theta
            and self.sigma0 == other.sigma0
            and self.q0 == other.q0
            and self.horizon == other.horizon
            and self.uniform_weights == other.uniform_weights
            and (self.uniform_weights or bool(np.array_equal(self.weights, other.weights)))
        )

    __hash__ = None

    @property
    def is_homogeneous(self) -> bool:
        """True when every agent is identical and all price-impact weights are one."""
        first = self.agents[0]
        return self.uniform_weights and all(a is first or a == first for a in self.agents[1:])

    def vector(self, name: str) -> np.ndarray:
        """Stack a scalar agent parameter into a length-N array."""
        return np.array([getattr(a, name) for a in self.agents], dtype=float)

    def curves_at(self, name: str, t: ArrayLike) -> np.ndarray:
        """Evaluate an agent curve for every agent; shape ``(..., N)``."""
        return np.stack([np.asarray(getattr(a, name)(t), dtype=float) for a in self.agents], axis=-1)

    def with_agents(self, agents: Sequence[AgentParams], weights=None) -> "MarketModel":
        return replace(self, agents=tuple(agents), weights=weights)

    def to_dict(self, grid: dict | None = None) -> dict:
        out = {
            "horizon": self.horizon,
            "kappa": self.kappa,
            "theta": self.theta.to_dict(),
            "sigma0": self.sigma0,
            "q0": self.q0,
            "agents": [a.to_dict() for a in self.agents],
            "weights": None if self.uniform_weights else self.weights.tolist(),
        }
        if grid:
            out["grid"] = dict(grid)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MarketModel":
        agents_data = data["agents"]
        if isinstance(agents_data, dict):
            # {"count": n, "params": {...}} shorthand for identical agents
            agents = [AgentParams.from_dict(agents_data["params"])] * int(agents_data["count"])
        else:
            agents = [AgentParams.from_dict(a) for a in agents_data]
        weights = data.get("weights")
        return cls(
            agents=tuple(agents),
            kappa=float(data.get("kappa", 5.0)),
            theta=curve_from_dict(data.get("theta", 30.0)),
            sigma0=float(data.get("sigma0", 5.0)),
            q0=float(data.get("q0", 30.0)),
            horizon=float(data.get("horizon", 24.0)),
            weights=None if weights is None else np.array(weights, dtype=float),
        )


def load_config(path: str | Path) -> tuple[MarketModel, dict]:
    """Read a market JSON file. Returns the model and the (possibly empty) grid block."""
    text = Path(path).read_text()
    data = json.loads(text)
    return MarketModel.from_dict(data), dict(data.get("grid", {}))


def dump_config(model: MarketModel, path: str | Path, grid: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model.to_dict(grid), indent=2))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    field: str
    message: str
    agent: int | None = None  # 1-based agent index, None for market-level fields

    def __str__(self):
        where = f"agent {self.agent}, " if self.agent is not None else ""
        return f"{where}{self.field}: {self.message}"


def market_violations(model: MarketModel) -> list[Violation]:
    """Every invariant of ``model`` that does not hold."""
    out: list[Violation] = []
    n = model.n_agents
    if n < 1:
        out.append(Violation("n_agents", "market needs at least one agent"))
    if not model.kappa > 0:
        out.append(Violation("kappa", "mean reversion rate must be positive"))
    if not model.sigma0 >= 0:
        out.append(Violation("sigma0", "supply volatility must be non-negative"))
    if not model.horizon > 0:
        out.append(Violation("horizon", "horizon must be positive"))
    if not math.isfinite(model.q0):
        out.append(Violation("q0", "initial supply must be finite"))
    for i, ag in enumerate(model.agents, start=1):
        if not ag.c1 > 0:
            out.append(Violation("c1", "price sensitivity must be positive", i))
        for name in ("c2", "c3", "c4"):
            if not getattr(ag, name) >= 0:
                out.append(Violation(name, "cost coefficient must be non-negative", i))
        if not ag.sigma >= 0:
            out.append(Violation("sigma", "volatility must be non-negative", i))
        if not -1.0 <= ag.rho <= 1.0:
            out.append(Violation("rho", "correlation must lie in [-1, 1]", i))
        for name in ("p_bar", "s0"):
            if not math.isfinite(getattr(ag, name)):
                out.append(Violation(name, "must be finite", i))
    w = model.weights
    if w is None:
        return out
    if w.shape != (n, n):
        out.append(Violation("weights", f"expected shape {(n, n)}, got {w.shape}"))
    else:
        for i in range(n):
            if w[i, i] != 1.0:
                out.append(Violation("weights", f"diagonal weight must equal 1 (w_{i + 1}{i + 1}={w[i, i]})", i + 1))
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            out.append(Violation("weights", "all weights must be finite and non-negative"))
    return out


def validate_market(model: MarketModel) -> MarketModel:
    """Return ``model`` unchanged, or raise :class:`ModelValidationError` listing all violations."""
    violations = market_violations(model)
    if violations:
        raise ModelValidationError(violations)
    return model


# --------------------------------------------------------------------------
# Noise and grids
# --------------------------------------------------------------------------


def build_noise(model: MarketModel) -> np.ndarray:
    """Lower-triangular (N+1)x(N+1) loading matrix of the Brownian drivers.

    Row 0 is the supply process, row i the SOC of agent i.
    """
    n = model.n_agents
    sig = np.zeros((n + 1, n + 1))
    sig[0, 0] = model.sigma0
    for i, ag in enumerate(model.agents, start=1):
        sig[i, 0] = ag.sigma * ag.rho
        sig[i, i] = ag.sigma * math.sqrt(max(0.0, 1.0 - ag.rho**2))
    return sig


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("grid needs at least one step")
        if not self.horizon > 0:
            raise ValueError("grid horizon must be positive")

    @classmethod
    def with_step(cls, horizon: float, dt: float) -> "TimeGrid":
        return cls(horizon, max(1, int(round(horizon / dt))))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)
