import csv
import json
import time

import numpy as np
import pytest

from tscp import cli, theory
from tscp.data import save_logits
from tscp.sweep import GuidelinePlan
from tscp.synthetic import make_table


@pytest.fixture(scope="module")
def logits_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "logits.csv"
    save_logits(make_table(3000, 20, 2.0, seed=11), path, "csv")
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_calibrate_happy_path(logits_csv, tmp_path, capsys):
    assert run("calibrate", "--input", logits_csv, "--out-dir", tmp_path) == 0
    res = json.loads((tmp_path / "calibration.json").read_text())
    assert res["objective"] == "ece"
    assert len(read_csv(tmp_path / "reliability.csv")) == 10
    assert "T* =" in capsys.readouterr().out


def test_calibrate_objectives_agree(logits_csv, tmp_path):
    t = {}
    for obj in ("ece", "nll"):
        d = tmp_path / obj
        assert run("calibrate", "--input", logits_csv, "--objective", obj, "--out-dir", d) == 0
        t[obj] = json.loads((d / "calibration.json").read_text())["t_star"]
    assert abs(t["ece"] - t["nll"]) <= 0.15


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert run("calibrate", "--input", missing, "--out-dir", tmp_path) == 2
    assert str(missing) in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_malformed_input(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("z0,z1,label\n0.1,0.2,0\n0.3,oops,1\n")
    assert run("fit", "--input", bad, "--out-dir", tmp_path / "o") == 2
    assert f"{bad}:3" in capsys.readouterr().err


def test_fit_then_eval(logits_csv, tmp_path):
    assert run("fit", "--input", logits_csv, "--method", "raps", "--randomized", "--temperature",
               1.5, "--out-dir", tmp_path) == 0
    model = json.loads((tmp_path / "cp_model.json").read_text())
    assert model["method"] == "raps" and model["randomized"] and model["temperature"] == 1.5
    assert run("eval", "--input", logits_csv, "--model", tmp_path / "cp_model.json",
               "--out-dir", tmp_path) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert m["mar_cov_gap"] < 0.05


def test_eval_trials(logits_csv, tmp_path):
    assert run("eval", "--input", logits_csv, "--method", "lac", "--trials", 5,
               "--out-dir", tmp_path) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert m["num_trials"] == 5


def test_sweep_outputs(logits_csv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("sweep", "--input", logits_csv, "--method", "lac", "--method", "aps",
                   "--randomized", "--seed", 3, "--out-dir", d) == 0
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    assert (a / "sweep.json").read_bytes() == (b / "sweep.json").read_bytes()
    rows = read_csv(a / "sweep.csv")
    assert list(rows[0]) == cli.SWEEP_HEADER
    meta = json.loads((a / "sweep.json").read_text())
    for name in ("lac-rand", "aps-rand"):
        mine = [r for r in rows if r["method"] == name]
        assert len(mine) == 46
    aps = [r for r in rows if r["method"] == "aps-rand"]
    peak = max(aps, key=lambda r: float(r["avg_size"]))
    assert float(peak["T"]) == meta["t_c_empirical"]["aps-rand"]


def test_sweep_floor_is_enforced(logits_csv, tmp_path):
    assert run("sweep", "--input", logits_csv, "--t-min", 0.1, "--out-dir", tmp_path) == 2
    assert list(tmp_path.iterdir()) == []
    assert run("sweep", "--input", logits_csv, "--method", "lac", "--t-min", 0.1, "--t-max", 0.3,
               "--allow-below-floor", "--out-dir", tmp_path) == 0


def test_guideline(logits_csv, tmp_path):
    assert run("guideline", "--input", logits_csv, "--randomized", "--out-dir", tmp_path) == 0
    text = (tmp_path / "plan.json").read_text()
    d = json.loads(text)
    plan = GuidelinePlan.from_dict(d)
    assert plan.t_hat in plan.approximated_curve.temperatures
    assert plan.selection_rule == "min_top_cov_gap"
    assert cli._json_text(plan.to_dict()) == text


def test_guideline_fixed(logits_csv, tmp_path):
    assert run("guideline", "--input", logits_csv, "--rule", "fixed", "--t-hat", 1.3,
               "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "plan.json").read_text())["t_hat"] == 1.3
    assert run("guideline", "--input", logits_csv, "--rule", "fixed", "--out-dir",
               tmp_path / "x") == 2


def test_verify_theory_small(tmp_path, capsys):
    t0 = time.perf_counter()
    assert run("verify-theory", "--cases", 10, "--out-dir", tmp_path) == 0
    assert time.perf_counter() - t0 < 1.0
    assert "violations: 0" in capsys.readouterr().out
    lines = (tmp_path / "theory.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["summary"]["violations"] == 0


def test_verify_theory_mutation(tmp_path, monkeypatch, capsys):
    real = theory._grad_rows
    monkeypatch.setattr(theory, "_grad_rows", lambda z, t, m: -real(z, t, m))
    assert run("verify-theory", "--cases", 200, "--out-dir", tmp_path) == 1
    out = capsys.readouterr().out
    assert "violations: 0" not in out


def test_mondrian_compare(logits_csv, tmp_path):
    args = ("mondrian-compare", "--input", logits_csv, "--randomized", "--trials", 3,
            "--t-step", 0.5, "--cp-fraction", 0.2)
    assert run(*args, "--out-dir", tmp_path / "a") == 0
    assert run(*args, "--out-dir", tmp_path / "b") == 0
    rows = read_csv(tmp_path / "a" / "mondrian_compare.csv")
    assert {(r["approach"], r["metric"]) for r in rows} == {
        (a, m) for a in ("mondrian", "ts_t_hat") for m in ("avg_size", "mar_cov_gap", "top_cov_gap")}
    assert (tmp_path / "a" / "mondrian_compare.csv").read_bytes() == \
        (tmp_path / "b" / "mondrian_compare.csv").read_bytes()


def test_config_file_and_override(logits_csv, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"input": str(logits_csv), "method": "raps", "lambda": 0.3,
                               "alpha": 0.2}))
    assert run("fit", "--config", cfg, "--alpha", 0.05, "--out-dir", tmp_path) == 0
    model = json.loads((tmp_path / "cp_model.json").read_text())
    assert model["lambda"] == 0.3 and model["alpha"] == 0.05


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"alpah": 0.1}))
    assert run("fit", "--config", cfg, "--out-dir", tmp_path / "o") == 2
    assert "alpah" in capsys.readouterr().err


def test_bad_alpha_leaves_nothing(logits_csv, tmp_path):
    out = tmp_path / "o"
    assert run("fit", "--input", logits_csv, "--alpha", 1.5, "--out-dir", out) == 2
    assert not out.exists() or list(out.iterdir()) == []


def test_failed_run_leaves_no_partial_output(logits_csv, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ValueError("late failure")
    monkeypatch.setattr(cli, "reliability_diagram", boom)
    assert run("calibrate", "--input", logits_csv, "--out-dir", tmp_path) == 2
    assert list(tmp_path.iterdir()) == []
