import csv
import io
import json

import pytest
from conftest import small_config

import lidaus.cli as cli
from lidaus.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, compare_table, main, parse_points
from lidaus.scenario import dump_scenario


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(dump_scenario(small_config()), encoding="utf-8")
    return str(p)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestRun:
    def test_writes_directory(self, scenario, tmp_path, capsys):
        assert main(["run", "--config", scenario, "--out", str(tmp_path / "a")]) == EXIT_OK
        assert "termination=" in capsys.readouterr().out
        assert (tmp_path / "a" / "runlog.jsonl").is_file()

    def test_identical_reruns(self, scenario, tmp_path):
        for name in ("a", "b"):
            assert main(["run", "--config", scenario, "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_existing_output_needs_force(self, scenario, tmp_path):
        out = str(tmp_path / "a")
        assert main(["run", "--config", scenario, "--out", out]) == EXIT_OK
        assert main(["run", "--config", scenario, "--out", out]) == EXIT_CONFIG
        assert main(["run", "--config", scenario, "--out", out, "--force"]) == EXIT_OK

    def test_output_root_env(self, scenario, tmp_path, monkeypatch):
        monkeypatch.setenv("LIDAUS_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["run", "--config", scenario, "--out", "r1"]) == EXIT_OK
        assert (tmp_path / "root" / "r1" / "report.json").is_file()

    @pytest.mark.parametrize("method", ["naive", "random"])
    def test_baselines(self, scenario, tmp_path, method):
        assert main(["run", "--config", scenario, "--method", method, "--out", str(tmp_path / method)]) == EXIT_OK
        rep = json.loads((tmp_path / method / "report.json").read_text())
        assert rep["method"] == method


class TestErrors:
    def test_bad_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("space: {width: 10}\ntargets: []\n")
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "missing key: space.depth" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_usage_error_exits_two(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["run"])
        assert e.value.code == 2

    def test_runtime_failure(self, scenario, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("simulated failure")

        monkeypatch.setattr(cli, "run_method", boom)
        assert main(["run", "--config", scenario, "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
        assert not (tmp_path / "o").exists()

    def test_unknown_compare_method(self, scenario):
        assert main(["compare", "--config", scenario, "--methods", "lidaus,magic", "--seeds", "1"]) == EXIT_CONFIG


class TestCompare:
    def test_three_method_rows(self, scenario, tmp_path):
        assert main(["compare", "--config", scenario, "--seeds", "2", "--out", str(tmp_path / "c")]) == EXIT_OK
        rows = list(csv.DictReader(io.StringIO((tmp_path / "c" / "compare.csv").read_text())))
        assert [r["method"] for r in rows] == ["lidaus", "naive", "random"]
        assert all(r["seeds"] == "2" for r in rows)
        runs = list(csv.DictReader(io.StringIO((tmp_path / "c" / "runs.csv").read_text())))
        assert len(runs) == 6

    def test_worker_count_does_not_change_results(self):
        cfg = small_config()
        one = compare_table(cfg, ["lidaus", "random"], [1, 2, 3], jobs=1)
        many = compare_table(cfg, ["lidaus", "random"], [1, 2, 3], jobs=3)
        assert one == many


class TestReplay:
    @pytest.fixture
    def logfile(self, scenario, tmp_path):
        assert main(["run", "--config", scenario, "--out", str(tmp_path / "r")]) == EXIT_OK
        return str(tmp_path / "r" / "runlog.jsonl")

    def test_verify(self, logfile, capsys):
        assert main(["replay", "--log", logfile, "--verify"]) == EXIT_OK
        assert "reproduced bit-exactly" in capsys.readouterr().out

    def test_stage_replay_matches_log(self, logfile, capsys):
        assert main(["replay", "--log", logfile, "--beacon", "T0", "--points", "stage:0"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["matches_log"] is True

    def test_step_selection(self, logfile, capsys):
        assert main(["replay", "--log", logfile, "--beacon", "T0", "--points", "0-20,25"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["points"] == 22

    def test_tampered_log(self, logfile):
        with open(logfile, "r+") as f:
            text = f.read().replace('"stage":0', '"stage":1', 1)
            f.seek(0)
            f.write(text)
            f.truncate()
        assert main(["replay", "--log", logfile, "--verify"]) == EXIT_CONFIG

    def test_needs_points(self, logfile):
        assert main(["replay", "--log", logfile, "--beacon", "T0"]) == EXIT_CONFIG

    def test_parse_points(self):
        assert parse_points("stage:2") == 2
        assert parse_points("5,1-3") == (1, 2, 3, 5)


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == EXIT_OK
    assert "paper_sec5" in capsys.readouterr().out.split()
