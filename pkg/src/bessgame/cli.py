"""Command-line driver.

Every subcommand writes its CSV outputs and a ``manifest.json`` to
``--out-dir``. Exit codes: 0 ok, 2 configuration error, 3 numerical
failure, 4 horizon beyond the well-posedness bound under
``--strict-wellposed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import asymptotics, experiments, moments, scenarios, sizing
from .equilibrium import equilibrium_policy
from .errors import (
    BessGameError,
    DomainError,
    InteractionSingularError,
    ModelValidationError,
    NotHomogeneousError,
    RiccatiBlowUpError,
)
from .model import MarketModel, TimeGrid, dump_config, load_config, validate_market
from .riccati_general import solve_general, wellposedness_bound_general
from .riccati_homogeneous import solve_homogeneous, wellposedness_bound_homogeneous
from .simulate import DEFAULT_CUTOFF, simulate_paths, stat_TB_mean, write_paths_csv, write_summary_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_WELLPOSED = 0, 2, 3, 4

SWEEP_AGENT_PARAMS = ("c1", "c2", "c3", "c4", "rho", "sigma")
SWEEP_KEYS = SWEEP_AGENT_PARAMS + ("N", "n_hybrid", "M", "m", "seed")
LONG_HEADER = ["cell", "metric", "value", "stderr"]


class ConfigError(BessGameError):
    pass


class WellposednessViolation(BessGameError):
    pass


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------


def _read_model(args) -> tuple[MarketModel, dict]:
    if not args.config:
        return scenarios.baseline_market(8), {}
    try:
        model, grid = load_config(args.config)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    validate_market(model)
    return model, grid


def _riccati_grid(args, model: MarketModel, grid_cfg: dict) -> TimeGrid | None:
    steps = args.grid_steps or grid_cfg.get("grid_steps")
    return TimeGrid(model.horizon, int(steps)) if steps else None


def _sim_grid(args, model: MarketModel, grid_cfg: dict) -> TimeGrid | None:
    steps = args.sim_steps or grid_cfg.get("sim_steps")
    return TimeGrid(model.horizon, int(steps)) if steps else None


def _config_hash(model: MarketModel) -> str:
    blob = json.dumps(model.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "bessgame"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, model: MarketModel | None, files, extra: dict | None = None) -> Path:
    """Record everything needed to rerun the command bit for bit."""
    data = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "paths": getattr(args, "paths", None),
        "grid_steps": getattr(args, "grid_steps", None),
        "sim_steps": getattr(args, "sim_steps", None),
        "force_general": getattr(args, "force_general", False),
        "config": getattr(args, "config", None),
        "config_sha256": _config_hash(model) if model is not None else None,
        "market": model.to_dict() if model is not None else None,
        "versions": _versions(),
        "outputs": [str(Path(f).name) for f in files],
    }
    if extra:
        data.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(data, indent=2, default=float))
    return path


def _check_bound(model: MarketModel, strict: bool):
    if model.is_homogeneous:
        bound = wellposedness_bound_homogeneous(model)
    else:
        bound = wellposedness_bound_general(model)
    print(f"well-posedness bound: t_max = {bound.t_max:.6g} (beta = {bound.beta:.6g}), horizon = {model.horizon:g}")
    if bound.note:
        print(f"  {bound.note}")
    # identical agents with N >= 5 stay in the invariant region for all time
    global_ok = model.is_homogeneous and model.n_agents >= 5
    if global_ok and not bound.covers(model.horizon):
        print("  N >= 5 identical agents: the invariant region gives existence on any horizon")
    if strict and not bound.covers(model.horizon) and not global_ok:
        raise WellposednessViolation(f"horizon {model.horizon:g} exceeds the sufficient bound {bound.t_max:.6g}")
    return bound


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).ravel()
    se = float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")
    return float(x.mean()), se


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_solve(args) -> int:
    model, grid_cfg = _read_model(args)
    out = _out_dir(args)
    bound = _check_bound(model, args.strict_wellposed)
    grid = _riccati_grid(args, model, grid_cfg)
    path = out / "coefficients.csv"
    if model.is_homogeneous and not args.force_general:
        sol = solve_homogeneous(model, grid)
        _write_rows(path, ["t", "name", "value"], sol.to_rows())
        kind, dim = "homogeneous", 11
    else:
        sol = solve_general(model, grid)
        _write_rows(path, ["t", "agent", "block", "row", "col", "value"], sol.to_rows())
        kind, dim = "general", sol.dimension
    print(f"{kind} solver: {dim} ODEs, {len(sol.t)} stored nodes -> {path}")
    write_manifest(out, args, model, [path], {"solver": kind, "ode_count": dim, "t_max": bound.t_max})
    return EXIT_OK


def _override_noise(model: MarketModel, args) -> MarketModel:
    if args.sigma0 is not None:
        model = replace(model, sigma0=float(args.sigma0))
    if args.sigma is not None:
        model = model.with_agents([replace(a, sigma=float(args.sigma)) for a in model.agents], weights=model.weights)
    return model


def cmd_simulate(args) -> int:
    model, grid_cfg = _read_model(args)
    model = _override_noise(model, args)
    out = _out_dir(args)
    _check_bound(model, args.strict_wellposed)
    policy = equilibrium_policy(model, _riccati_grid(args, model, grid_cfg), force_general=args.force_general)
    cutoff = args.cutoff
    ens = simulate_paths(
        model,
        policy,
        _sim_grid(args, model, grid_cfg),
        n_paths=args.paths,
        seed=args.seed,
        antithetic=args.antithetic,
        cutoffs=(cutoff,),
        keep_paths=args.dump_paths > 0,
        workers=args.workers,
    )
    files = [out / "summary.csv"]
    write_summary_csv(ens, files[0])
    if args.dump_paths > 0:
        files.append(out / "paths.csv")
        write_paths_csv(ens, files[-1], max_paths=args.dump_paths)
    report = {}
    for name in ("TC", "TS", "TB", "TB_sys", "TB_nobess"):
        v = ens.metric(name, cutoff)
        report[name] = _mean_se(v.mean(axis=1) if v.ndim == 2 else v)
    for name, (m, se) in report.items():
        print(f"{name:>9s} = {m:.4f} +/- {se:.4f}")
    tb_with = stat_TB_mean(ens, cutoff, "system")
    tb_without = stat_TB_mean(ens, cutoff, "nobess")
    print(f"TB of the mean price: {tb_with:.4f} with storage, {tb_without:.4f} without ({1 - tb_with / tb_without:.2%} lower)")
    write_manifest(out, args, model, files, {"cutoff": cutoff, "report": {k: list(v) for k, v in report.items()}})
    return EXIT_OK


def cmd_moments(args) -> int:
    model, grid_cfg = _read_model(args)
    out = _out_dir(args)
    grid = _riccati_grid(args, model, grid_cfg)
    curves = moments.analytic_second_moments(model, solve_homogeneous(model, grid))
    files = [out / "moments.csv"]
    moments.write_moments_csv(curves, files[0])
    if args.rho_values:
        rows = moments.rho_sensitivity_report(model, args.rho_values, grid)
        files.append(out / "rho_sensitivity.csv")
        _write_rows(files[-1], ["rho", "avg_std_alpha", "avg_std_price"], [(r.rho, r.avg_std_alpha, r.avg_std_price) for r in rows])
        for r in rows:
            print(f"rho = {r.rho:.2f}: avg Std(alpha) = {r.avg_std_alpha:.5f}, avg Std(P) = {r.avg_std_price:.5f}")
    write_manifest(out, args, model, files)
    return EXIT_OK


def cmd_asymptotics(args) -> int:
    model, grid_cfg = _read_model(args)
    out = _out_dir(args)
    grid = _riccati_grid(args, model, grid_cfg)
    coeffs = asymptotics.expansion_coeffs(model, grid)
    files = [out / "expansion.csv"]
    asymptotics.write_expansion_csv(coeffs, files[0])
    extra = {}
    if args.richardson:
        rep = asymptotics.richardson_check(model, n=args.richardson, grid=grid, coeffs=coeffs)
        print(f"Richardson check at N = {args.richardson}: relative error {rep.rel_error:.4g}")
        extra["richardson_rel_error"] = rep.rel_error
    if args.limit_n:
        # the mean-field limit is defined for pure arbitrageurs only
        arb = asymptotics.arbitrageur_family(model)
        rep = asymptotics.barS_limit_check(arb, grid, n_values=tuple(args.limit_n), n_paths=args.paths, seed=args.seed, workers=args.workers)
        files.append(out / "convergence.csv")
        asymptotics.write_convergence_csv(rep, files[-1])
        print(f"L2 gap log-log slope: {rep.slope:.4f}")
        extra["l2_slope"] = rep.slope
    write_manifest(out, args, model, files, extra)
    return EXIT_OK


def cmd_sizing(args) -> int:
    out = _out_dir(args)
    base_ref = sizing.unit_baseline(args.units, n_paths=args.paths, seed=args.seed, workers=args.workers)
    print(f"unit baseline E[max|alpha|] = {base_ref:.5f}")
    entries = []
    for M in args.major:
        for m in args.minor:
            try:
                blocks = sizing.major_minor_blocks(M, m, args.units)
            except DomainError as exc:
                print(f"skip M={M}, m={m}: {exc}")
                continue
            rep = sizing.run_block_market(
                blocks, baseline_ref=base_ref, n_paths=args.paths, seed=args.seed, workers=args.workers,
                noise_scaling=args.noise_scaling,
            )
            entries.append((M, m, rep))
            parts = ", ".join(f"{r.kind} {r.dispatch_ratio:.3f}x" for r in rep.rows)
            print(f"M={M:>2d} m={m:>2d}: {parts}; aggregate {rep.aggregate_ratio:.3f}")
    path = out / "sizing.csv"
    sizing.write_report_csv(entries, path)
    write_manifest(out, args, None, [path], {"unit_baseline": base_ref, "units": args.units, "noise_scaling": args.noise_scaling})
    return EXIT_OK


def cmd_scenarios(args) -> int:
    out = _out_dir(args)
    if args.study == "market":
        model = _scenario_market(args)
        path = out / "market.json"
        dump_config(model, path)
        print(f"wrote {model.n_agents}-agent {args.kind} market to {path}")
        write_manifest(out, args, model, [path])
        return EXIT_OK
    if args.study == "competition":
        rows = experiments.competition_study(tuple(args.n_values), n_hybrid=args.n_hybrid)
        path = out / "competition.csv"
        _write_rows(path, ["N", "n_hybrid", "mean_price"], [(r.n, r.n_hybrid, r.mean_price) for r in rows])
        print(f"time-averaged mean price falls {experiments.relative_decline(rows):.3%} from N={rows[0].n} to N={rows[-1].n}")
        write_manifest(out, args, None, [path])
        return EXIT_OK
    seeds = range(args.seed, args.seed + args.count)
    res = experiments.randomized_tb_study(args.kind, seeds, n=args.n)
    path = out / "tb_reduction.csv"
    _write_rows(path, ["seed", "tb_with", "tb_without", "reduction"], [(s, r.tb_with, r.tb_without, r.reduction) for s, r in zip(seeds, res)])
    med = float(np.median([r.reduction for r in res]))
    print(f"{args.kind} markets, N={args.n}: median TB reduction {med:.2%} over {len(res)} draws")
    write_manifest(out, args, None, [path], {"median_reduction": med})
    return EXIT_OK


def _scenario_market(args) -> MarketModel:
    if args.kind == "baseline":
        return scenarios.baseline_market(args.n)
    if args.kind == "two-class":
        return scenarios.two_class_market(args.n_hybrid, args.n - args.n_hybrid)
    if args.kind == "heterogeneous":
        return scenarios.sample_heterogeneous_market(args.seed, args.n)
    return scenarios.sample_theta_market(args.seed, args.n)


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


def load_sweep_spec(path: str) -> dict:
    try:
        spec = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"sweep spec not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    grid = spec.get("grid", {})
    unknown = sorted(set(grid) - set(SWEEP_KEYS))
    if unknown:
        raise ConfigError(f"unknown sweep parameters: {', '.join(unknown)}")
    return spec


def sweep_cells(spec: dict) -> list[dict]:
    """Cartesian product of the declared values; an empty grid has no cells."""
    grid = spec.get("grid", {})
    if not grid:
        return []
    names = list(grid)
    return [dict(zip(names, vals)) for vals in itertools.product(*(grid[k] for k in names))]


def cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _cell_market(base: MarketModel, cell: dict) -> MarketModel:
    n = int(cell.get("N", base.n_agents))
    unit = base.agents[0]
    over = {k: float(cell[k]) for k in SWEEP_AGENT_PARAMS if k in cell}
    if over:
        unit = replace(unit, **over)
    one = base.with_agents([unit])
    if "n_hybrid" in cell:
        return scenarios.two_class_market(int(cell["n_hybrid"]), n - int(cell["n_hybrid"]), one)
    return one.with_agents([unit] * n)


def run_cell(job) -> list[tuple]:
    """Metrics ``(metric, value, stderr)`` for one sweep cell."""
    base_dict, cell, seed, paths, cutoff = job
    base = MarketModel.from_dict(base_dict)
    if "M" in cell:
        n_units = int(cell.get("N", 32))
        blocks = sizing.major_minor_blocks(int(cell["M"]), int(cell.get("m", 1)), n_units)
        ref = sizing.unit_baseline(n_units, n_paths=paths, seed=seed, workers=1, t_cutoff=cutoff)
        rep = sizing.run_block_market(blocks, baseline_ref=ref, n_paths=paths, seed=seed, workers=1, t_cutoff=cutoff)
        rows = [("aggregate_ratio", rep.aggregate_ratio, "")]
        for r in rep.rows:
            rows += [(f"{r.kind}_dispatch_ratio", r.dispatch_ratio, ""), (f"{r.kind}_share", r.share, "")]
        return rows
    model = _cell_market(base, cell)
    ens = simulate_paths(model, equilibrium_policy(model), n_paths=paths, seed=seed, cutoffs=(cutoff,), workers=1)
    rows = []
    for name in ("TC", "TS", "TB"):
        rows.append((name, *_mean_se(ens.metric(name, cutoff).mean(axis=1))))
    rows.append(("TB_sys", *_mean_se(ens.metric("TB_sys", cutoff))))
    red = experiments.tb_reduction(ens, cutoff)
    rows.append(("TB_mean_sys", red.tb_with, ""))
    rows.append(("TB_reduction", red.reduction, ""))
    avg = np.trapezoid(ens.mean["price_sys"], ens.times) / model.horizon
    rows.append(("mean_price", float(avg), ""))
    return rows


def cmd_sweep(args) -> int:
    spec = load_sweep_spec(args.spec)
    out = _out_dir(args)
    if args.config:
        base, _ = _read_model(args)
    else:
        base = scenarios.baseline_market(8)
    cells = sweep_cells(spec)
    paths = int(spec.get("paths", args.paths))
    cutoff = float(spec.get("cutoff", DEFAULT_CUTOFF))
    jobs = [(base.to_dict(), c, cell_seed(args.seed, k), paths, cutoff) for k, c in enumerate(cells)]
    workers = args.workers or int(os.environ.get("BESSGAME_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_cell, jobs))
    else:
        results = [run_cell(j) for j in jobs]
    files = [out / "sweep.csv", out / "cells.csv"]
    _write_rows(files[0], LONG_HEADER, [(k, *row) for k, rows in enumerate(results) for row in rows])
    _write_rows(files[1], ["cell", "parameter", "value"], [(k, p, v) for k, c in enumerate(cells) for p, v in c.items()])
    print(f"{len(cells)} cells -> {files[0]}")
    write_manifest(out, args, base, files, {"sweep": spec, "cell_seeds": [j[2] for j in jobs]})
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="market JSON file (default: the 8-agent reference market)")
    common.add_argument("--paths", type=int, default=1000)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--grid-steps", type=int, help="Riccati steps over the horizon")
    common.add_argument("--sim-steps", type=int, help="Euler steps over the horizon")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--force-general", action="store_true", help="use the N-agent solver even for identical agents")
    common.add_argument("--strict-wellposed", action="store_true", help="exit 4 when the horizon exceeds the sufficient bound")
    common.add_argument("--workers", type=int, help="worker processes (default: $BESSGAME_WORKERS or 1)")

    p = argparse.ArgumentParser(prog="bessgame", description="Nash equilibria of battery storage operators sharing a price.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("solve", parents=[common], help="integrate the Riccati system and dump coefficients")

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo equilibrium paths")
    s.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF, help="end hour of the TC/TS/TB window")
    s.add_argument("--antithetic", action="store_true")
    s.add_argument("--dump-paths", type=int, default=0, metavar="K", help="also write the first K paths")
    s.add_argument("--sigma0", type=float, help="override the supply volatility")
    s.add_argument("--sigma", type=float, help="override every agent's volatility")

    s = sub.add_parser("sweep", parents=[common], help="cartesian parameter sweep to long-format CSV")
    s.add_argument("--spec", required=True, help='JSON like {"grid": {"c2": [0.05, 0.1]}, "paths": 200}')

    s = sub.add_parser("moments", parents=[common], help="analytic means and variances (identical agents)")
    s.add_argument("--rho-values", type=float, nargs="*", default=[])

    s = sub.add_parser("asymptotics", parents=[common], help="large-N expansion coefficients")
    s.add_argument("--richardson", type=int, metavar="N", help="compare N (p4 - p4_0) with p4_1")
    s.add_argument("--limit-n", type=int, nargs="*", default=[], help="agent counts for the S_bar_T gap check")

    s = sub.add_parser("sizing", parents=[common], help="Major/Minor operator dispatch ratios")
    s.add_argument("--units", type=int, default=32)
    s.add_argument("--major", type=int, nargs="+", default=[1, 5, 16, 31, 32])
    s.add_argument("--minor", type=int, nargs="+", default=[1])
    s.add_argument("--noise-scaling", choices=sizing.NOISE_SCALINGS, default="sqrt")

    s = sub.add_parser("scenarios", parents=[common], help="generate markets or run the scenario studies")
    s.add_argument("--study", choices=("market", "competition", "randomized"), default="market")
    s.add_argument("--kind", choices=("baseline", "two-class", "heterogeneous", "theta"), default="baseline")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--n-hybrid", type=int, default=4)
    s.add_argument("--n-values", type=int, nargs="+", default=[4, 8, 12, 16, 20, 24])
    s.add_argument("--count", type=int, default=50, help="random markets in the randomized study")
    return p


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "moments": cmd_moments,
    "asymptotics": cmd_asymptotics,
    "sizing": cmd_sizing,
    "scenarios": cmd_scenarios,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scenarios" and args.study == "randomized" and args.kind not in experiments.GENERATORS:
        print("error: --study randomized needs --kind heterogeneous or theta", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except WellposednessViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WELLPOSED
    except (RiccatiBlowUpError, InteractionSingularError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelValidationError, NotHomogeneousError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
