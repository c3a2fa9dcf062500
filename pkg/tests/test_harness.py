import csv
import io
import json
import math
import subprocess
import sys

import pytest

from sqlab import harness
from sqlab.analysts import ReconstructionProbe, SignAggregation
from sqlab.cli import main
from sqlab.config import load_experiment, parse_experiment, sign_aggregation_preset
from sqlab.errors import ConfigError
from sqlab.harness import RESULT_COLUMNS, run_experiment, sidecar_path

BASE = """
# small probe experiment
[experiment]
id = probe-small
n = 60
trials = 3
seed = 7

[population]
kind = uniform
size = 256

[mechanism]
mechanism = laplace
m = 21
epsilon = 1.0   # generous budget
tau = 0.2
beta = 0.05

[strategy]
kind = reconstruction_probe
m_probe = 20
"""


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


class TestConfig:
    def test_parse(self):
        cfg = parse_experiment(BASE)
        assert cfg.id == "probe-small" and cfg.n == 60 and cfg.trials == 3 and cfg.seed == 7
        assert cfg.mechanism.epsilon == 1.0
        assert cfg.strategy == ReconstructionProbe(20)
        assert cfg.population.build().universe.size == 256

    @pytest.mark.parametrize("old,new,field", [
        ("n = 60", "n = sixty", "experiment.n"),
        ("n = 60", "n = 0", "experiment.n"),
        ("m_probe = 20", "m_probe = 20\ncolour = red", "strategy.colour"),
        ("m = 21", "m = 5", "mechanism.m"),
        ("size = 256", "size = 100", "strategy.strict"),
        ("epsilon = 1.0", "epsilon = -1", "mechanism.epsilon"),
        ("kind = uniform", "kind = zipf", "population.kind"),
        ("[strategy]", "[strategi]", "line"),
    ])
    def test_errors_name_the_field(self, old, new, field):
        with pytest.raises(ConfigError) as info:
            parse_experiment(BASE.replace(old, new))
        assert field in str(info.value)

    def test_missing_section(self):
        text = BASE.split("[strategy]")[0]
        with pytest.raises(ConfigError, match="strategy"):
            parse_experiment(text)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_experiment(BASE.replace("seed = 7", "seed = 7\nseed = 8"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment(tmp_path / "nope.cfg")

    def test_gaussian_strategy_match(self):
        cfg = sign_aggregation_preset(d=5, n=10, trials=1)
        assert cfg.strategy == SignAggregation(5)
        with pytest.raises(ConfigError, match="strategy.d"):
            cfg.replace(strategy=SignAggregation(4))


class TestRunExperiment:
    def test_zero_trials(self, tmp_path):
        cfg = parse_experiment(BASE.replace("trials = 3", "trials = 0"))
        res = run_experiment(cfg, tmp_path / "r.csv")
        assert res.csv_path.read_text() == ",".join(RESULT_COLUMNS) + "\n"
        assert json.loads(sidecar_path(res.csv_path).read_text())["summary"]["trials"] == 0

    def test_rows_and_dialect(self, tmp_path):
        res = run_experiment(parse_experiment(BASE), tmp_path / "r.csv")
        raw = res.csv_path.read_bytes()
        assert b"\r" not in raw
        rows = list(csv.DictReader(io.StringIO(raw.decode())))
        assert [r["trial"] for r in rows] == ["0", "1", "2"]
        assert all(r["experiment_id"] == "probe-small" for r in rows)
        gap = float(rows[0]["final_query_gap[query units]"])
        assert gap == pytest.approx(abs(float(rows[0]["reported[query units]"])
                                        - float(rows[0]["true_expectation[query units]"])), abs=1e-15)

    def test_byte_identical_rerun(self, tmp_path):
        cfg = parse_experiment(BASE)
        a = run_experiment(cfg, tmp_path / "a.csv").csv_path.read_bytes()
        b = run_experiment(cfg, tmp_path / "b.csv").csv_path.read_bytes()
        c = run_experiment(cfg.replace(workers=2), tmp_path / "c.csv").csv_path.read_bytes()
        assert a == b == c

    def test_seed_changes_output(self):
        cfg = parse_experiment(BASE)
        assert run_experiment(cfg).csv_text != run_experiment(cfg.replace(seed=8)).csv_text

    def test_sidecar_contents(self, tmp_path):
        res = run_experiment(parse_experiment(BASE), tmp_path / "r.csv")
        meta = json.loads(sidecar_path(res.csv_path).read_text())
        for key in ("master_seed", "stream_ids", "per_trial_streams", "C", "log_base", "resolved_mechanism",
                    "formula_evaluations", "tool_version", "config", "wall_time_seconds"):
            assert key in meta
        assert meta["master_seed"] == 7
        assert meta["per_trial_streams"] == [[7, 0], [7, 1], [7, 2]]
        assert meta["resolved_mechanism"]["sigma"] == pytest.approx(21 / (60 * 1.0))
        assert len(meta["wall_time_seconds"]["per_trial"]) == 3

    def test_failed_write_leaves_nothing(self, tmp_path, monkeypatch):
        target = tmp_path / "r.csv"
        real_replace = harness.os.replace
        calls = []

        def flaky(src, dst):
            calls.append(dst)
            if len(calls) == 2:
                raise OSError("disk full")
            real_replace(src, dst)

        monkeypatch.setattr(harness.os, "replace", flaky)
        with pytest.raises(OSError):
            run_experiment(parse_experiment(BASE), target)
        assert not target.exists() and not sidecar_path(target).exists()
        assert [p.name for p in tmp_path.iterdir() if p.name.endswith(".tmp")] == []

    def test_validation_before_any_trial(self):
        cfg = parse_experiment(BASE)
        with pytest.raises(ConfigError):
            cfg.replace(trials=-1)

    def test_sign_aggregation_preset_small(self):
        res = run_experiment(sign_aggregation_preset(d=100, n=100, trials=30, seed=1, mc_trials=200))
        target = math.sqrt(2 / math.pi)
        assert res.checks[0].name == "sign_aggregation_mean" and res.checks[0].passed
        assert abs(res.metadata["summary"]["mean_reported_unrescaled"] - target) <= 0.1 * target
        assert "mean_truncation_discrepancy" in res.metadata["summary"]


class TestCli:
    def test_sizes_example(self):
        code, out, _ = run_cli("sizes", "--tau", "0.1", "--beta", "0.05", "--m", "10", "--C", "1",
                               "--formula", "laplace_sq")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert rows[0]["n"] == "2996"

    def test_sizes_json(self):
        code, out, _ = run_cli("--format", "json", "sizes", "--tau", "0.1", "--beta", "0.05", "--m", "10",
                               "--C", "1", "--formula", "laplace_sq")
        assert code == 0 and json.loads(out)[0]["n"] == 2996

    def test_global_flag_after_subcommand(self, tmp_path):
        out = tmp_path / "s.csv"
        code, _, _ = run_cli("sizes", "--tau", "0.1", "--beta", "0.05", "--r", "2", "--formula", "rounds",
                             "--out", str(out))
        assert code == 0 and "rounds" in out.read_text()

    def test_demo_sign_aggregation(self, tmp_path):
        code, out, _ = run_cli("demo", "appendix-a", "--d", "100", "--n", "100", "--trials", "50",
                               "--mc-trials", "200", "--out", str(tmp_path / "a.csv"))
        assert code == 0
        assert "PASS sign_aggregation_mean" in out
        mean = float(out.split("sign_aggregation_mean: ")[1].split()[0])
        assert abs(mean - math.sqrt(2 / math.pi)) <= 0.1 * math.sqrt(2 / math.pi)

    def test_verify_bounds_names_failed_check(self):
        code, out, _ = run_cli("verify", "bounds")
        assert code == 2
        assert "CHECK FAILED moment_upper_bound" in out
        assert "CHECK FAILED hoeffding" not in out

    def test_verify_moments(self):
        code, out, _ = run_cli("verify", "moments", "--trials", "20000")
        assert code == 0
        assert out.splitlines()[0] == "check_id,parameters,lhs,bound,holds,trials,violations"

    def test_verify_transfer(self):
        code, out, _ = run_cli("verify", "transfer", "--trials", "20", "--m-probe", "100")
        assert code == 0 and "transfer:laplace:ReconstructionProbe" in out

    def test_run_config(self, tmp_path):
        path = tmp_path / "e.cfg"
        path.write_text(BASE)
        out = tmp_path / "o.csv"
        code, _, _ = run_cli("run", str(path), "--out", str(out), "--trials", "2")
        assert code == 0
        assert len(out.read_text().splitlines()) == 3

    def test_attack_naive(self):
        code, out, _ = run_cli("attack", "naive", "--trials", "3", "--m-probe", "4000")
        assert code == 0 and "naive" in out

    def test_attack_check_failure(self):
        code, out, _ = run_cli("attack", "naive", "--trials", "2", "--m-probe", "10")
        assert code == 2 and "CHECK FAILED attack_succeeds" in out

    def test_unknown_flag(self):
        code, _, err = run_cli("sizes", "--tau", "0.1", "--beta", "0.05", "--bogus")
        assert code == 1 and "usage" in err

    def test_config_error_exit(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(BASE.replace("n = 60", "n = -3"))
        code, _, err = run_cli("run", str(path))
        assert code == 1 and "experiment.n" in err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "sqlab", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and "sqlab" in proc.stdout
