import csv
import json
import math
import subprocess
import sys

import pytest

from dpdme.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestAccountant:
    def test_gaussian_value(self, tmp_path):
        out = tmp_path / "g.json"
        code = run("accountant", "gaussian", "--delta2", 2, "--sigma", 4, "--delta", 1e-6, "--out", out)
        rec = read_json(out)
        assert rec["epsilon"] == pytest.approx(2.6494, abs=1e-4)
        # sigma is below the classical requirement, so the result is flagged.
        assert code == 2 and not rec["conditions_ok"]

    def test_gaussian_condition_ok(self, tmp_path):
        out = tmp_path / "g.json"
        assert run("accountant", "gaussian", "--delta2", 1, "--sigma", 20, "--delta", 1e-6, "--out", out) == 0

    def test_binomial_condition_failure(self, tmp_path, capsys):
        code = run("accountant", "binomial", "--N", 10, "--p", 0.5, "--s", 1, "--d", 1000, "--delta", 1e-6)
        rec = json.loads(capsys.readouterr().out)
        assert code == 2
        assert any(not c["ok"] and "23 log" in c["name"] for c in rec["conditions"])

    def test_binomial_reference(self, capsys):
        code = run("accountant", "binomial", "--N", 10000, "--d", 1, "--delta", 1e-3, "--delta1", 1, "--delta2", 1, "--delta-inf", 1)
        rec = json.loads(capsys.readouterr().out)
        assert code == 0
        assert rec["epsilon"] == pytest.approx(0.104893028, rel=1e-8)

    def test_bad_probability_is_usage_error(self):
        assert run("accountant", "binomial", "--N", 10, "--p", 1.5, "--d", 3, "--delta", 1e-6) == 1

    def test_missing_flag_is_usage_error(self):
        assert run("accountant", "gaussian", "--sigma", 1) == 1
        assert run("nonsense") == 1

    def test_compose(self, capsys):
        assert run("accountant", "compose", "--epsilon", 0.1, "--delta", 1e-9, "--T", 100, "--delta-slack", 1e-6) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["advanced"]["epsilon"] == pytest.approx(6.308230951, rel=1e-9)


class TestSweep:
    def test_row_count(self, tmp_path):
        out = tmp_path / "s.csv"
        assert run("sweep", "--eps", "0.5,1,2", "--scales", "geom:0.25:0.0625:2", "--d", 64, "--out", out) == 0
        rows = read_csv(out)
        assert len(rows) == 3 * (1 + 2)
        with open(out) as fh:
            assert len(fh.read().splitlines()) == len(rows) + 1

    def test_single_point_matches_accountant(self, tmp_path):
        out = tmp_path / "s.csv"
        run("sweep", "--eps", 1.0, "--d", 16, "--delta", 1e-6, "--out", out)
        (row,) = read_csv(out)
        acc = tmp_path / "a.json"
        run("accountant", "gaussian", "--delta2", 1, "--sigma", row["sigma"], "--delta", 1e-6, "--out", acc)
        assert float(row["epsilon"]) == pytest.approx(read_json(acc)["epsilon"], rel=1e-12)

    def test_shrinking_scale_approaches_gaussian(self, tmp_path):
        out = tmp_path / "s.csv"
        run("sweep", "--eps", 1.0, "--scales", "geom:1:0.001:4", "--d", 256, "--delta", 1e-6, "--out", out)
        rows = read_csv(out)
        gauss = float(rows[0]["error"])
        binom = [float(r["error"]) for r in rows[1:]]
        assert [float(r["scale"]) for r in rows[1:]] == sorted((float(r["scale"]) for r in rows[1:]), reverse=True)
        assert all(a > b for a, b in zip(binom, binom[1:]))
        assert all(b > gauss for b in binom)
        assert binom[-1] / gauss < 1.1

    def test_bad_grid(self):
        assert run("sweep", "--eps", "") == 1
        assert run("sweep", "--eps", "geom:1:2") == 1

    def test_unwritable_output(self, tmp_path):
        assert run("sweep", "--eps", 1, "--out", tmp_path / "missing" / "x.csv") == 1


class TestDme:
    def test_fine_grid_no_noise(self, tmp_path):
        out = tmp_path / "d.csv"
        code = run("dme", "--m", 0, "--k", 2**20, "--d", 8, "--n", 4, "--trials", 500, "--out", out)
        (row,) = read_csv(out)
        assert code == 0
        assert float(row["mse_empirical"]) < 1e-6
        assert row["epsilon"] == "inf"

    def test_schema(self, tmp_path):
        out = tmp_path / "d.csv"
        run("dme", "--trials", 200, "--rotate", "--out", out)
        with open(out) as fh:
            header = fh.readline().strip().split(",")
        assert header == ["protocol", "n", "d", "D", "k", "m", "p", "rotate", "epsilon", "delta_total",
                          "mse_empirical", "mse_bound", "bias_empirical", "comm_bits", "trials", "seed"]

    def test_gaussian(self, tmp_path):
        out = tmp_path / "d.csv"
        assert run("dme", "--protocol", "gaussian", "--sigma", 1.0, "--n", 100, "--d", 4, "--trials", 300, "--out", out) == 0
        (row,) = read_csv(out)
        assert float(row["epsilon"]) == pytest.approx(1.2944932410, rel=1e-9)

    def test_gaussian_needs_sigma(self):
        assert run("dme", "--protocol", "gaussian") == 1

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 3, "d": 5, "k": 8, "m": 4, "trials": 100, "rotate": True}))
        out = tmp_path / "d.csv"
        assert run("dme", "--config", cfg, "--k", 16, "--out", out) == 0
        (row,) = read_csv(out)
        assert (row["n"], row["d"], row["k"], row["m"], row["rotate"]) == ("3", "5", "16", "4", "true")

    def test_config_errors_listed(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1, "p": 3.0, "protocol": "laplace"}))
        assert run("dme", "--config", cfg) == 1
        err = capsys.readouterr().err
        assert "bogus" in err and "p:" in err and "protocol" in err


class TestSelectValidate:
    def test_select_loose(self, capsys):
        assert run("select", "--epsilon", 1e6, "--delta", 1e-6, "--n", 1000, "--d", 16, "--ignore-error") == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["k"] == 2 and rec["outside_regime"]

    def test_select_infeasible_exit_code(self, capsys):
        assert run("select", "--epsilon", 1, "--delta", 1e-9, "--n", 64, "--d", 64, "--max-log2-k", 8) == 2
        assert json.loads(capsys.readouterr().out)["feasible"] is False

    def test_validate_identical(self, tmp_path):
        out = tmp_path / "v.json"
        assert run("validate", "--same", "--trials", 2000, "--out", out) == 0
        rec = read_json(out)
        assert rec["violations"] == 0 and rec["passed"]

    def test_validate_explicit_vectors(self, tmp_path):
        out = tmp_path / "v.json"
        assert run("validate", "--x", "0.5", "--x-prime", "0.3", "--k", 2, "--trials", 5000, "--out", out) == 0

    def test_validate_too_few_trials(self):
        assert run("validate", "--trials", 10) == 1


class TestSgd:
    def test_private_run(self, tmp_path):
        out = tmp_path / "log.csv"
        summary = tmp_path / "sum.json"
        code = run("sgd", "--epsilon", 2.0, "--delta", 1e-9, "--rounds", 5, "--delta-slack", 1e-6,
                   "--out", out, "--summary", summary)
        assert code == 0
        rows = read_csv(out)
        assert list(rows[0].keys()) == ["round", "loss", "grad_norm_sq", "mse_round", "comm_bits_round",
                                        "epsilon_composed_basic", "epsilon_composed_advanced", "delta_total"]
        rec = read_json(summary)
        assert rec["round_epsilon"] <= 2.0
        assert rec["round_delta"] == pytest.approx(2e-9)
        assert float(rows[0]["epsilon_composed_basic"]) == pytest.approx(rec["round_epsilon"])

    def test_gaussian_run(self, tmp_path):
        out = tmp_path / "log.csv"
        assert run("sgd", "--protocol", "gaussian", "--epsilon", 2.0, "--rounds", 3, "--out", out) == 0

    def test_logistic_needs_lr(self):
        assert run("sgd", "--model", "logistic", "--rounds", 2) == 1
        assert run("sgd", "--model", "logistic", "--rounds", 2, "--lr", 0.5, "--protocol", "none", "--out", "/dev/null") == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dpdme", "accountant", "compose", "--epsilon", "0.1",
                           "--delta", "1e-9", "--T", "10"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["basic"]["epsilon"] == pytest.approx(1.0)
    assert math.isclose(json.loads(proc.stdout)["basic"]["delta"], 1e-8)
