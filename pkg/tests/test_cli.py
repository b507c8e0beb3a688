import csv
import json

import pytest

from bessgame.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_WELLPOSED, cell_seed, main, sweep_cells
from bessgame.model import dump_config
from bessgame.riccati_general import system_dimension
from bessgame.scenarios import baseline_market


@pytest.fixture
def config2(tmp_path):
    path = tmp_path / "two.json"
    dump_config(baseline_market(2), path)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_solve_homogeneous_dump(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--grid-steps", "6000", "--out-dir", str(out)]) == EXIT_OK
    r = rows(out / "coefficients.csv")
    assert r[0] == ["t", "name", "value"]
    names = {row[1] for row in r[1:]}
    assert {f"p{k}" for k in range(1, 8)} | {"r1", "r2", "r3", "u"} <= names
    assert len([n for n in names if not n.startswith("g")]) == 11
    man = json.loads((out / "manifest.json").read_text())
    assert man["solver"] == "homogeneous" and man["ode_count"] == 11
    assert man["outputs"] == ["coefficients.csv"]
    assert len(man["config_sha256"]) == 64
    assert man["versions"]["numpy"]


def test_solve_force_general_dump(tmp_path, config2):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(config2), "--force-general", "--grid-steps", "6000", "--out-dir", str(out)]) == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["solver"] == "general"
    assert man["ode_count"] == system_dimension(2)
    assert rows(out / "coefficients.csv")[0] == ["t", "agent", "block", "row", "col", "value"]


def test_general_dimension_for_eight_agents():
    assert system_dimension(8) == 664


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"agents": [\n  {"c1": 1.0,}\n]}')
    assert main(["solve", "--config", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_invalid_market_is_a_config_error(tmp_path):
    m = baseline_market(2).to_dict()
    m["agents"][0]["c2"] = -1.0
    path = tmp_path / "neg.json"
    path.write_text(json.dumps(m))
    assert main(["solve", "--config", str(path), "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_blow_up_exit_code(tmp_path):
    assert main(["solve", "--grid-steps", "40", "--out-dir", str(tmp_path)]) == EXIT_NUMERIC


def test_strict_wellposed(tmp_path, config2):
    args = ["solve", "--config", str(config2), "--grid-steps", "6000", "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert main(args + ["--strict-wellposed"]) == EXIT_WELLPOSED
    # identical agents with N >= 5 are covered on any horizon
    assert main(["solve", "--grid-steps", "6000", "--strict-wellposed", "--out-dir", str(tmp_path)]) == EXIT_OK


def test_simulate_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["simulate", "--paths", "20", "--seed", "9", "--dump-paths", "3", "--out-dir", str(out)]
        assert main(argv) == EXIT_OK
        outs.append(out)
    for f in ("summary.csv", "paths.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["seed"] == 9 and man["paths"] == 20


def test_simulate_deterministic_trace(tmp_path, capsys):
    out = tmp_path / "o"
    argv = ["simulate", "--paths", "1", "--sigma0", "0", "--sigma", "0", "--dump-paths", "1", "--out-dir", str(out)]
    assert main(argv) == EXIT_OK
    text = capsys.readouterr().out
    assert "TB" in text
    assert json.loads((out / "manifest.json").read_text())["market"]["sigma0"] == 0.0


def test_moments_command(tmp_path):
    out = tmp_path / "o"
    assert main(["moments", "--rho-values", "0", "0.9", "--out-dir", str(out)]) == EXIT_OK
    r = rows(out / "rho_sensitivity.csv")
    assert r[0] == ["rho", "avg_std_alpha", "avg_std_price"]
    assert len(r) == 3


def test_empty_sweep_writes_header_only(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": {}}))
    out = tmp_path / "o"
    assert main(["sweep", "--spec", str(spec), "--out-dir", str(out)]) == EXIT_OK
    assert rows(out / "sweep.csv") == [["cell", "metric", "value", "stderr"]]
    assert (out / "manifest.json").exists()


def test_sweep_rejects_unknown_parameter(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": {"c9": [1]}}))
    assert main(["sweep", "--spec", str(spec), "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_sweep_cells_and_seeds():
    cells = sweep_cells({"grid": {"c2": [0.05, 0.1], "N": [2, 4, 8]}})
    assert len(cells) == 6
    assert cells[0] == {"c2": 0.05, "N": 2} and cells[-1] == {"c2": 0.1, "N": 8}
    seeds = [cell_seed(7, k) for k in range(6)]
    assert len(set(seeds)) == 6
    assert seeds == [cell_seed(7, k) for k in range(6)]


def test_small_sweep_long_format(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": {"c2": [0.05, 0.2], "c3": [0.0]}, "paths": 10}))
    out = tmp_path / "o"
    assert main(["sweep", "--spec", str(spec), "--seed", "1", "--out-dir", str(out)]) == EXIT_OK
    r = rows(out / "sweep.csv")
    tc = {row[0]: float(row[2]) for row in r[1:] if row[1] == "TC"}
    assert set(tc) == {"0", "1"}
    # dearer dispatch means less of it
    assert tc["1"] < tc["0"]
    cells = rows(out / "cells.csv")
    assert cells[0] == ["cell", "parameter", "value"]


def test_scenarios_market_roundtrip(tmp_path):
    out = tmp_path / "o"
    assert main(["scenarios", "--kind", "two-class", "--n", "6", "--n-hybrid", "2", "--out-dir", str(out)]) == EXIT_OK
    data = json.loads((out / "market.json").read_text())
    assert len(data["agents"]) == 6


def test_randomized_needs_a_random_kind(tmp_path):
    assert main(["scenarios", "--study", "randomized", "--kind", "baseline", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_asymptotics_command(tmp_path, capsys):
    out = tmp_path / "o"
    argv = ["asymptotics", "--grid-steps", "6000", "--limit-n", "4", "8", "--paths", "20", "--out-dir", str(out)]
    assert main(argv) == EXIT_OK
    assert rows(out / "expansion.csv")[0][0] == "t"
    assert len(rows(out / "convergence.csv")) == 3
    assert "slope" in capsys.readouterr().out


def test_sizing_command(tmp_path):
    out = tmp_path / "o"
    argv = ["sizing", "--units", "4", "--major", "2", "3", "4", "--minor", "1", "2", "--paths", "20", "--out-dir", str(out)]
    assert main(argv) == EXIT_OK
    r = rows(out / "sizing.csv")
    # (3, 2) leaves one unit over and is skipped
    cells = {(row[0], row[1]) for row in r[1:]}
    assert ("3", "2") not in cells and ("2", "2") in cells and ("4", "1") in cells
