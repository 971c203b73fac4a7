import json
import subprocess
import sys

import numpy as np
import pytest

from hetfx.cli import run
from hetfx.data import write_dataset_csv
from hetfx.simbench import ScenarioConfig, generate_dataset


def test_reps_one_is_usage_error(capsys):
    assert run(["simulate", "--scenario", "I", "--reps", "1"]) == 64
    assert "reps" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    assert run(["simulate", "--scenario", "IX"]) == 64
    assert run(["compare", "--scenario", "I", "--methods", "psr,forest"]) == 64
    assert run(["simulate", "--scenario", "V", "--mechanism", "A"]) == 64
    assert run(["simulate", "--scenario", "I", "--p", "3"]) == 64


def test_simulate_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = run(["simulate", "--scenario", "III", "--n", "300", "--reps", "3", "--grid-size", "5", "--threads", "1", "--out", str(out), "--format", "json"])
    assert code in (0, 2)
    obj = json.loads((out / "results.json").read_text())
    assert obj["scenario"] == "III" and obj["method"] == "psr" and obj["reps"] == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["settings"]["mechanism"] == "B" and man["settings"]["seed"] == 0
    assert "threads" not in man["settings"]
    assert (out / "grid_diagnostics.csv").read_text().startswith("method,x,bias,mse,cp95,missing")


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("HETFX_SEED", "42")
    out = tmp_path / "run"
    run(["simulate", "--scenario", "I", "--n", "200", "--reps", "2", "--grid-size", "3", "--threads", "1", "--out", str(out)])
    assert json.loads((out / "manifest.json").read_text())["settings"]["seed"] == 42


def test_compare_single_method_matches_simulate(tmp_path):
    common = ["--scenario", "I", "--n", "250", "--reps", "3", "--grid-size", "4", "--threads", "1", "--seed", "3"]
    run(["simulate", *common, "--method", "ipw", "--out", str(tmp_path / "s")])
    run(["compare", *common, "--methods", "ipw", "--out", str(tmp_path / "c")])
    assert (tmp_path / "s" / "results.csv").read_text() == (tmp_path / "c" / "results.csv").read_text()


def _csv(tmp_path, with_scores=False):
    sim = generate_dataset(ScenarioConfig("III", "D", 1500, 5, seed=8))
    f = tmp_path / "data.csv"
    write_dataset_csv(sim.dataset, f, score_col="e" if with_scores else None, scores=sim.true_scores if with_scores else None)
    return f


def test_estimate_near_identity(tmp_path, capsys):
    f = _csv(tmp_path)
    out = tmp_path / "est"
    code = run(["estimate", str(f), "--xl", "xl", "--out", str(out), "--grid-size", "9"])
    assert code == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert rows[0] == "x,tau_hat,variance,ci_lo,ci_hi"
    vals = np.array([[float(v) for v in r.split(",")[:2]] for r in rows[1:]])
    assert np.max(np.abs(vals[:, 1] - vals[:, 0])) < 0.35
    plot = (out / "plot.csv").read_text().splitlines()
    assert plot[0] == "x,estimate,lo,hi,method" and plot[1].endswith(",psr")
    err = capsys.readouterr().err
    assert "score range" in err and "regularized fraction" in err


def test_estimate_with_score_column(tmp_path):
    f = _csv(tmp_path, with_scores=True)
    out = tmp_path / "est"
    assert run(["estimate", str(f), "--xl", "xl", "--score-col", "e", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["settings"]["score"] == "external"


@pytest.mark.parametrize("method", ["ipw", "aipw", "match"])
def test_estimate_baselines(tmp_path, method):
    f = _csv(tmp_path)
    out = tmp_path / method
    assert run(["estimate", str(f), "--xl", "xl", "--method", method, "--bootstrap", "10", "--out", str(out)]) == 0
    assert (out / "results.csv").exists()


def test_estimate_missing_outcome_column(tmp_path, capsys):
    f = _csv(tmp_path)
    out = tmp_path / "est"
    assert run(["estimate", str(f), "--xl", "xl", "--outcome", "nope", "--out", str(out)]) == 65
    assert "nope" in capsys.readouterr().err
    assert not out.exists()


def test_estimate_bad_treatment_row(tmp_path, capsys):
    f = _csv(tmp_path)
    lines = f.read_text().splitlines()
    lines[4] = "3" + lines[4][1:]
    f.write_text("\n".join(lines) + "\n")
    assert run(["estimate", str(f), "--xl", "xl", "--out", str(tmp_path / "e")]) == 65
    assert "row 5" in capsys.readouterr().err


def test_external_without_column_is_usage_error(tmp_path):
    f = _csv(tmp_path)
    assert run(["estimate", str(f), "--xl", "xl", "--score", "external", "--out", str(tmp_path / "e")]) == 64


def test_estimate_sparse_overlap_exit_code(tmp_path):
    rng = np.random.default_rng(0)
    n = 300
    xl = rng.uniform(-0.5, 0.5, n)
    d = (xl > 0).astype(int)
    y = rng.normal(size=n)
    f = tmp_path / "sep.csv"
    f.write_text("d,y,xl,e\n" + "\n".join(f"{d[i]},{y[i]:.5f},{xl[i]:.5f},{0.9 if d[i] else 0.1}" for i in range(n)) + "\n")
    code = run(["estimate", str(f), "--xl", "xl", "--score-col", "e", "--kernel", "epan", "--out", str(tmp_path / "o")])
    assert code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hetfx", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "hetfx" in res.stdout
