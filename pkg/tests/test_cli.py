import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from pgsmm.cli import main

CONFIG = {
    "seed": 7,
    "data": {"subject": "id", "time": "t", "response": "y", "fixed": ["a", "b", "c"]},
    "model": {"family": "poisson", "ell_draws": 200},
    "spline": {"degree": 2, "interior_knots": 1},
    "penalty": {"values": [0.05, 0.3, 1.0]},
    "sampler": {"n_draws": 100, "burn_in": 20},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    n, m = 40, 4
    ids = np.repeat(np.arange(n), m)
    t = np.tile(np.linspace(0.1, 0.9, m), n)
    X = rng.uniform(-1, 1, (n * m, 3))
    b = rng.normal(0, 0.3, n)[ids]
    y = rng.poisson(np.exp(0.8 * X[:, 0] - 0.8 * X[:, 1] + b + np.sin(2 * np.pi * t) * 0.5))
    pd.DataFrame({"id": ids, "t": t, "y": y, "a": X[:, 0], "b": X[:, 1], "c": X[:, 2]}).to_csv(d / "data.csv", index=False)
    (d / "cfg.yaml").write_text(yaml.safe_dump(CONFIG))
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_fit_writes_outputs(workdir):
    out = workdir / "fit.json"
    code = run("fit", "--config", workdir / "cfg.yaml", "--data", workdir / "data.csv", "--out", out,
               "--lambda", 0.3, "--no-timestamp")
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["lambda"] == 0.3 and rep["created"] == "" and rep["diagnostics"]["converged"]
    assert out.with_suffix(".csv").read_text().startswith("name,estimate,se")


def test_fit_is_byte_identical(workdir):
    outs = []
    for k in range(2):
        out = workdir / f"rep{k}.json"
        assert run("fit", "--config", workdir / "cfg.yaml", "--data", workdir / "data.csv", "--out", out,
                   "--lambda", 0.3, "--no-timestamp") == 0
        outs.append((out.read_bytes(), out.with_suffix(".csv").read_bytes()))
    assert outs[0] == outs[1]


def test_tune_writes_trace(workdir):
    out = workdir / "tuned.json"
    assert run("tune", "--config", workdir / "cfg.yaml", "--data", workdir / "data.csv", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["tuning"]["lambda_opt"] in CONFIG["penalty"]["values"]
    trace = (workdir / "tuned_gcv.csv").read_text().splitlines()
    assert trace[0].startswith("lambda,gcv") and len(trace) == 4


def test_malformed_csv_is_input_error(workdir, capsys):
    bad = workdir / "bad.csv"
    bad.write_text("id,t,y,a,b,c\n1,0.1,2,0,0,0\n1,0.2,oops,0,0,0\n")
    code = run("fit", "--config", workdir / "cfg.yaml", "--data", bad, "--out", workdir / "x.json", "--lambda", 0.1)
    assert code == 2
    assert "row 3" in capsys.readouterr().err
    assert not (workdir / "x.json").exists()


def test_missing_config_and_bad_args(workdir):
    assert run("fit", "--config", workdir / "nope.yaml", "--data", workdir / "data.csv", "--out", workdir / "y.json") == 2
    assert run("fit", "--data", workdir / "data.csv") == 2
    assert run("frobnicate") == 2


def test_non_convergence_exit_3(workdir):
    cfg = dict(CONFIG, solver={"max_outer_iterations": 1, "max_newton_steps": 1})
    (workdir / "tight.yaml").write_text(yaml.safe_dump(cfg))
    out = workdir / "nc.json"
    code = run("fit", "--config", workdir / "tight.yaml", "--data", workdir / "data.csv", "--out", out, "--lambda", 0.3)
    assert code == 3
    assert json.loads(out.read_text())["diagnostics"]["converged"] is False


def test_print_config_round_trip(workdir, capsys):
    assert run("print-config", "--config", workdir / "cfg.yaml") == 0
    text = capsys.readouterr().out
    (workdir / "full.yaml").write_text(text)
    assert run("print-config", "--config", workdir / "full.yaml") == 0
    assert capsys.readouterr().out == text
    assert yaml.safe_load(text)["data"]["subject"] == "id"


def test_list_presets(capsys):
    assert run("simulate", "--list-presets") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and sum("long-running" in ln for ln in lines) == 3


@pytest.mark.parametrize("argv", [["--preset", "table1-50x11", "--replicates", "0"],
                                  ["--preset", "nope"], []])
def test_simulate_input_errors(argv, tmp_path):
    assert run("simulate", "--out-dir", tmp_path, *argv) == 2


def test_simulate_deterministic(tmp_path):
    design = tmp_path / "d.yaml"
    design.write_text(yaml.safe_dump({"n_subjects": 15, "p": 4, "obs_per_subject": 4, "seed": 11}))
    for k in range(2):
        assert run("simulate", "--design", design, "--replicates", 2, "--grid-points", 3,
                   "--out-dir", tmp_path / f"o{k}") == 0
    for name in ("sim_report.json", "table1.csv", "table2.csv", "f_curve.csv"):
        assert (tmp_path / "o0" / name).read_bytes() == (tmp_path / "o1" / name).read_bytes()
    rep = json.loads((tmp_path / "o0" / "sim_report.json").read_text())
    assert rep["replicates"] == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "pgsmm.cli", "print-config"], capture_output=True, text=True)
    assert r.returncode == 0 and "sampler:" in r.stdout
