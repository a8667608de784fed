import csv
import json

import pytest

from lexcon.cli import main
from lexcon.config import ConfigError, load_config, parse_config
from lexcon.stub_server import StubCompletionServer


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg), encoding="utf-8")
    return str(p)


def comparison_cfg(tmp_path, **extra):
    cfg = {
        "experiment_id": "cmp",
        "backend": {"kind": "synthetic", "synthetic": {"base_coverage": 0.8}},
        "experiment": {"name": "strategy_comparison", "m": 15, "K_list": [0, 2, 4], "n_sets": 800},
        "output_dir": str(tmp_path / "runs"),
    }
    cfg.update(extra)
    return cfg


class TestConfig:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="strateggy"):
            parse_config({"strateggy": {}, "experiment": {"name": "compound"}})

    def test_nested_unknown_key(self):
        with pytest.raises(ConfigError, match=r"backend\.synthetic\.p0"):
            parse_config({"backend": {"synthetic": {"p0": 1}}, "experiment": {"name": "compound"}})

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="experiment"):
            parse_config({"experiment": {"name": "vibes"}})

    def test_missing_template(self):
        with pytest.raises(ConfigError, match="template"):
            parse_config({"strategy": {"template": "nope"}, "experiment": {"name": "compound"}})

    def test_missing_data_file(self):
        with pytest.raises(ConfigError, match="file not found"):
            parse_config({"experiment": {"name": "constraint_scaling", "source": {"path": "/no/such"}}})

    def test_shuffles_validated(self):
        with pytest.raises(ConfigError, match="shuffles"):
            parse_config({"experiment": {"name": "position_bias", "shuffles": 1}})

    def test_http_needs_url(self):
        with pytest.raises(ConfigError, match="base_url"):
            parse_config({"backend": {"kind": "http"}, "experiment": {"name": "compound"}})

    def test_defaults(self, tmp_path):
        cfg = load_config(write(tmp_path, {"experiment": {"name": "position_bias"}}))
        assert cfg.experiment.n_list == [3, 5, 7, 10, 15, 20]
        assert (cfg.experiment.sets_per_n, cfg.experiment.shuffles) == (100, 20)
        assert cfg.run_id == "position_bias"

    def test_bad_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)


class TestGen:
    def test_dnc_scripted(self, capsys):
        code = main(["gen", "--strategy", "dnc", "--max-iter", "4", "--backend", "scripted",
                     "--response", "A sunny day.", "--response", "The cat and the leaves.", "cat", "leaves", "sunny"])
        out = json.loads(capsys.readouterr().out)
        assert code == 0
        assert out["satisfied"] == [True, True, True]
        assert [s["newly_satisfied"] for s in out["trace"]] == [["sunny"], ["cat", "leaves"]]
        assert out["trace"][1]["prompt"].endswith("keywords: cat, leaves.")

    def test_no_keywords(self):
        with pytest.raises(SystemExit) as e:
            main(["gen"])
        assert e.value.code == 2

    def test_unsatisfied(self, capsys):
        assert main(["gen", "--backend", "scripted", "--response", "nope", "cat"]) == 1

    def test_dry_run(self, capsys):
        assert main(["gen", "--dry-run", "--backend", "http", "--base-url", "http://127.0.0.1:9", "a1", "b1"]) == 0
        assert capsys.readouterr().out.strip() == "Generate a sentence with the following keywords: a1, b1."

    def test_backend_error_exit_3(self, capsys):
        with StubCompletionServer(steps=[(401, "denied")]) as srv:
            code = main(["gen", "--backend", "http", "--base-url", srv.base_url, "cat"])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "AuthenticationError" and err["payload"] == "denied"

    def test_http_success(self, capsys):
        with StubCompletionServer("the cat sleeps") as srv:
            assert main(["gen", "--backend", "http", "--base-url", srv.base_url, "--model", "m1", "cat"]) == 0
        assert srv.requests[0]["model"] == "m1"

    def test_bad_template(self, capsys):
        assert main(["gen", "--template", "nope", "cat"]) == 2

    def test_synthetic_default(self, capsys):
        assert main(["gen", "--seed", "1", "alpha"]) in (0, 1)


class TestExperimentRun:
    def test_comparison_matches_oracle(self, tmp_path, capsys):
        from oracles import dnc_success, rj_success, three_sigma

        assert main(["experiment", "run", write(tmp_path, comparison_cfg(tmp_path))]) == 0
        rows = list(csv.DictReader(open(tmp_path / "runs" / "cmp" / "error_curves.csv")))
        for r in rows:
            K = int(r["K"])
            p = (rj_success if r["strategy"] == "rj" else dnc_success)(0.8, 15, K)
            assert abs(1 - float(r["error_rate"]) - p) <= three_sigma(p, 800) + 1 / 800
        assert "strategy=dnc;K=4" in capsys.readouterr().out

    def test_rerun_is_noop(self, tmp_path, capsys):
        cfg = write(tmp_path, comparison_cfg(tmp_path, experiment={"name": "strategy_comparison", "m": 5,
                                                                    "K_list": [1], "n_sets": 5}))
        assert main(["experiment", "run", cfg]) == 0
        results = tmp_path / "runs" / "cmp" / "results.jsonl"
        before = results.read_bytes()
        capsys.readouterr()
        assert main(["experiment", "run", cfg]) == 0
        assert "0 new trials" in capsys.readouterr().err
        assert results.read_bytes() == before

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        code = main(["experiment", "run", write(tmp_path, {"strateggy": {}, "experiment": {"name": "compound"}})])
        assert code == 2
        assert "strateggy" in capsys.readouterr().err

    def test_overrides_and_dry_run(self, tmp_path, capsys):
        cfg = write(tmp_path, {"backend": {"kind": "scripted"},
                               "experiment": {"name": "downstream", "task": "recipe", "n_list": [5], "n_sets": 2}})
        assert main(["experiment", "run", cfg, "--dry-run", "--output-dir", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert out.count("Generate a recipe using the following ingredients:") == 2 + 2 * 3
        assert not (tmp_path / "o").exists()

    def test_backend_failure_exit_3(self, tmp_path, capsys):
        cfg = write(tmp_path, {"backend": {"kind": "scripted", "echo": False},
                               "experiment": {"name": "constraint_scaling", "n_list": [3], "n_sets": 2},
                               "output_dir": str(tmp_path / "r")})
        assert main(["experiment", "run", cfg]) == 3


class TestEvalReport:
    @pytest.fixture
    def results(self, tmp_path, capsys):
        cfg = write(tmp_path, {"experiment_id": "s", "backend": {"kind": "synthetic"},
                               "experiment": {"name": "constraint_scaling", "n_list": [3, 5], "n_sets": 10},
                               "output_dir": str(tmp_path / "r")})
        assert main(["experiment", "run", cfg]) == 0
        capsys.readouterr()
        return tmp_path / "r" / "s" / "results.jsonl"

    def test_report_matches_summary(self, results, tmp_path):
        out = tmp_path / "rep.csv"
        assert main(["report", str(results), "-o", str(out)]) == 0
        assert out.read_text() == (results.parent / "summary.csv").read_text()

    def test_eval_clean(self, results, capsys):
        assert main(["eval", str(results)]) == 0
        assert json.loads(capsys.readouterr().err)["mismatched"] == []

    def test_eval_detects_tampering(self, results, capsys):
        lines = results.read_text().splitlines()
        rec = json.loads(lines[0])
        rec["outcome"]["final_text"] = ""
        lines[0] = json.dumps(rec)
        results.write_text("\n".join(lines) + "\n")
        assert main(["eval", str(results)]) == 1

    def test_report_missing_file(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "none.jsonl")]) == 2


def test_templates_list(capsys):
    assert main(["templates", "list"]) == 0
    assert "recipe" in capsys.readouterr().out.split()


def test_sigint_drains_and_resumes(tmp_path):
    import signal
    import subprocess
    import sys
    import time

    with StubCompletionServer("cat", delay_s=0.05) as srv:
        cfg = write(tmp_path, {
            "experiment_id": "slow",
            "backend": {"kind": "http", "base_url": srv.base_url, "model_id": "m"},
            "experiment": {"name": "constraint_scaling", "n_list": [3], "n_sets": 200},
            "output_dir": str(tmp_path / "r"),
            "parallelism": 4,
        })
        results = tmp_path / "r" / "slow" / "results.jsonl"
        proc = subprocess.Popen([sys.executable, "-m", "lexcon", "experiment", "run", cfg],
                                stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        deadline = time.time() + 30
        while time.time() < deadline and (not results.exists() or results.read_text().count("\n") < 10):
            time.sleep(0.05)
        proc.send_signal(signal.SIGINT)
        _, err = proc.communicate(timeout=30)
        assert proc.returncode == 130, err
        text = results.read_text()
        assert text.endswith("\n")
        done = [json.loads(line)["trial_index"] for line in text.splitlines()]
        assert 10 <= len(done) < 200 and len(set(done)) == len(done)

        srv.delay_s = 0
        assert main(["experiment", "run", cfg]) == 0
    final = [json.loads(line)["trial_index"] for line in results.read_text().splitlines()]
    assert sorted(final) == list(range(200))
