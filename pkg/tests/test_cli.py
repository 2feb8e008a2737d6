import json
import os
import subprocess
import sys

import numpy as np
import pytest

from smoothfix import cli
from smoothfix.errors import ConfigError

GEOMETRIC = {"kind": "RandomCountFixedWeight", "weight": 0.5, "count": {"geometric": 0.5}}
TWO_POINT = {"kind": "CommonRandomWeight", "count": 2, "atoms": [["4/3", "9/34"], ["1/5", "25/34"]]}

SCENARIOS = {
    "criteria": {"command": "criteria", "model": GEOMETRIC, "budgets": {"mc_budget": 5000}},
    "iterate-lst": {"command": "iterate-lst", "model": GEOMETRIC, "budgets": {"iterations": 40},
                    "parameters": {"seed_law": {"name": "point", "at": 1.0},
                                   "reference": {"name": "exponential"}, "tol": 1e-7}},
    "simulate": {"command": "simulate", "model": GEOMETRIC, "budgets": {"replicas": 2000},
                 "parameters": {"gamma": 1.0, "n": 6, "reference": {"name": "exponential"}}},
    "spine": {"command": "spine", "model": GEOMETRIC, "budgets": {"replicas": 5000},
              "parameters": {"beta": 1.0, "depth": 30}},
    "tails": {"command": "tails", "model": TWO_POINT,
              "budgets": {"replicas": 50000, "pool_size": 5000, "pool_iterations": 15, "mc_budget": 20000},
              "parameters": {"p": 2.0, "b": 2.0, "hill_k_fraction": 0.01, "top_count": 200}},
    "stable": {"command": "stable", "budgets": {"replicas": 20000},
               "parameters": {"alpha": 0.5, "base": {"name": "point", "at": 1.0}}},
    "pitman-yor": {"command": "pitman-yor", "budgets": {"replicas": 20000, "iterations": 8,
                                                        "verify_replicas": 20000},
                   "parameters": {"problem": {"nu": "Uniform(0,1)"}, "threshold": 0.03}},
}

EXPECTED_FILES = {
    "criteria": ["t_curve.csv"],
    "iterate-lst": ["lst.csv", "trace.csv"],
    "simulate": ["samples.csv"],
    "spine": ["spine.csv"],
    "tails": ["cb_grid.csv", "plateau.csv"],
    "stable": ["stable_lst.csv"],
    "pitman-yor": ["h.csv", "h_inverse.csv", "samples.csv"],
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cfg(tmp_path, cfg, seed=1, out="out", workers=None):
    code = cli.run(write_config(tmp_path, cfg), seed=seed, out=str(tmp_path / out), workers=workers,
                   stream=open(os.devnull, "w"))
    return code, tmp_path / out


def report(out):
    return json.loads((out / "report.json").read_text())


def write_samples(path, x):
    path.write_text("x\n" + "\n".join(repr(float(v)) for v in x) + "\n")
    return str(path)


class TestCommands:
    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_runs(self, tmp_path, name):
        code, out = run_cfg(tmp_path, SCENARIOS[name])
        assert code == 0
        rep = report(out)
        assert rep["status"] == "ok" and rep["command"] == name and rep["seed"] == 1
        assert rep["files"] == sorted(EXPECTED_FILES[name])
        for f in rep["files"]:
            assert (out / f).stat().st_size > 0

    def test_criteria_results(self, tmp_path):
        rep = report(run_cfg(tmp_path, SCENARIOS["criteria"])[1])["results"]
        assert rep["theorem2_case"] == "a" and rep["exists"] is True

    def test_iterate_converges(self, tmp_path):
        _, out = run_cfg(tmp_path, SCENARIOS["iterate-lst"])
        data = np.loadtxt(out / "lst.csv", delimiter=",", skiprows=1)
        assert np.max(np.abs(data[:, 1] - 1.0 / (1.0 + data[:, 0]))) < 1e-3

    def test_csv_has_plain_floats(self, tmp_path):
        _, out = run_cfg(tmp_path, SCENARIOS["spine"])
        assert "np.float64" not in (out / "spine.csv").read_text()

    def test_seed_from_config(self, tmp_path):
        cfg = dict(SCENARIOS["criteria"], seed=5)
        code, out = run_cfg(tmp_path, cfg, seed=None)
        assert code == 0 and report(out)["seed"] == 5

    def test_output_from_config(self, tmp_path):
        cfg = dict(SCENARIOS["criteria"], output=str(tmp_path / "from-config"))
        assert cli.run(write_config(tmp_path, cfg), seed=2, stream=open(os.devnull, "w")) == 0
        assert (tmp_path / "from-config" / "report.json").exists()


class TestExitCodes:
    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert cli.run(str(path), seed=1, out=str(tmp_path / "o"), stream=open(os.devnull, "w")) == 2
        assert not (tmp_path / "o").exists()

    def test_missing_seed(self, tmp_path):
        code, out = run_cfg(tmp_path, SCENARIOS["criteria"], seed=None)
        assert code == 2 and not out.exists()

    def test_unknown_command(self, tmp_path):
        assert run_cfg(tmp_path, {"command": "nope"})[0] == 2

    def test_bad_budget(self, tmp_path):
        cfg = dict(SCENARIOS["simulate"], budgets={"replicas": -3})
        assert run_cfg(tmp_path, cfg)[0] == 2

    def test_missing_model(self, tmp_path):
        assert run_cfg(tmp_path, {"command": "simulate"})[0] == 2

    def test_verdict_failure(self, tmp_path):
        cfg = {"command": "pitman-yor", "parameters": {"problem": {"nu": {"atoms": [[2, 0.5], [0.5, 0.5]]}}}}
        code, out = run_cfg(tmp_path, cfg)
        assert code == 1
        rep = report(out)
        assert rep["status"] == "verdict-failure"
        assert rep["error"]["type"] == "NoNontrivialSolution"
        assert sorted(os.listdir(out)) == ["report.json"]

    def test_parse_scenario_rejects_negative_seed(self):
        with pytest.raises(ConfigError):
            cli.parse_scenario({"command": "stable", "output": "x"}, seed=-1)


class TestReport:
    def test_identical(self, tmp_path):
        x = np.random.default_rng(0).exponential(size=500)
        a = write_samples(tmp_path / "a.csv", x)
        assert cli.compare_samples(a, a)["ks"].value == 0.0

    def test_disjoint(self, tmp_path):
        a = write_samples(tmp_path / "a.csv", np.zeros(20))
        b = write_samples(tmp_path / "b.csv", np.ones(20))
        res = cli.compare_samples(a, b)
        assert res["ks"].value == 1.0
        assert res["files"]["a"]["hill"] is None

    def test_exp_vs_gamma(self, tmp_path):
        g = np.random.default_rng(1)
        a = write_samples(tmp_path / "a.csv", g.exponential(1.0, 100_000))
        b = write_samples(tmp_path / "b.csv", g.gamma(2.0, 1.0, 100_000))
        assert cli.compare_samples(a, b)["ks"].value == pytest.approx(1 / np.e, abs=0.015)

    def test_missing_file(self, tmp_path):
        assert cli.main(["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 2

    def test_report_out(self, tmp_path, capsys):
        a = write_samples(tmp_path / "a.csv", np.arange(1.0, 50.0))
        assert cli.main(["report", a, a, "--out", str(tmp_path / "r")]) == 0
        assert json.loads(capsys.readouterr().out)["ks"]["value"] == 0.0
        assert (tmp_path / "r" / "report.json").exists()


class TestDeterminism:
    @pytest.mark.parametrize("name", ["criteria", "simulate", "tails"])
    def test_workers_byte_identical(self, tmp_path, name):
        _, one = run_cfg(tmp_path, SCENARIOS[name], seed=9, out="w1", workers=1)
        _, eight = run_cfg(tmp_path, SCENARIOS[name], seed=9, out="w8", workers=8)
        assert sorted(os.listdir(one)) == sorted(os.listdir(eight))
        for f in os.listdir(one):
            assert (one / f).read_bytes() == (eight / f).read_bytes(), f

    def test_same_seed_same_output(self, tmp_path):
        _, a = run_cfg(tmp_path, SCENARIOS["simulate"], seed=3, out="a")
        _, b = run_cfg(tmp_path, SCENARIOS["simulate"], seed=3, out="b")
        assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()


def test_module_entry_point(tmp_path):
    path = write_config(tmp_path, SCENARIOS["criteria"])
    proc = subprocess.run([sys.executable, "-m", "smoothfix", "run", path, "--seed", "4",
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert report(tmp_path / "m")["status"] == "ok"
