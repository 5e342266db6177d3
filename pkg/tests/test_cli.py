import csv
import json
import subprocess
import sys

import pytest

from modestop.bench import read_results
from modestop.cli import build_parser, main, resolve_config
from modestop.simulator import REFERENCE_GRIDS
from modestop.stopping import Rule

ROWS = [
    {"id": "p1", "question": "1+1?", "answer": "2"},
    {"id": "p2", "question": "2+2?", "answer": "4"},
    {"id": "p3", "question": "3+3?", "answer": "6"},
]


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "toy.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in ROWS))
    return path


def csv_rows(path):
    return list(csv.DictReader(l for l in path.read_text().splitlines() if not l.startswith("#")))


def header_meta(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return json.loads(first[2:])


class TestRun:
    def test_writes_results(self, tmp_path, dataset, capsys):
        out = tmp_path / "r.jsonl"
        rc = main(["run", "--dataset", str(dataset), "--policy", "sprt", "--results", str(out),
                   "--mock-p-correct", "1.0"])
        assert rc == 0
        header, results = read_results(out)
        assert header["dataset"] == "toy"
        assert [r.n_samples for r in results] == [3, 3, 3]
        assert all(r.correct for r in results)
        assert "3 problems" in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path, dataset):
        a, b = tmp_path / "a" / "r.jsonl", tmp_path / "b" / "r.jsonl"
        for path in (a, b):
            assert main(["run", "--dataset", str(dataset), "--policy", "msprt", "--seed", "9",
                         "--results", str(path), "--out-dir", str(path.parent)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_default_results_path(self, tmp_path, dataset):
        assert main(["run", "--dataset", str(dataset), "--policy", "sc", "--label", "sc40",
                     "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "results-sc40.jsonl").is_file()

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "nowhere.jsonl"
        assert main(["run", "--dataset", str(missing)]) == 1
        err = capsys.readouterr().err
        assert str(missing) in err and "error" in err

    def test_malformed_dataset_line(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x", "question": "q"}\n{oops\n')
        assert main(["run", "--dataset", str(path), "--out-dir", str(tmp_path)]) == 1
        assert ":2:" in capsys.readouterr().err

    def test_invalid_policy_value(self, dataset, tmp_path, capsys):
        assert main(["run", "--dataset", str(dataset), "--beta", "2", "--out-dir", str(tmp_path)]) == 1
        assert "beta" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, dataset):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--dataset", str(dataset), "--no-such-flag"])
        assert exc.value.code == 2

    def test_chat_needs_env_key(self, dataset, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("MODESTOP_TEST_KEY", raising=False)
        rc = main(["run", "--dataset", str(dataset), "--solver", "chat",
                   "--api-key-env", "MODESTOP_TEST_KEY", "--out-dir", str(tmp_path)])
        assert rc == 1
        assert "MODESTOP_TEST_KEY" in capsys.readouterr().err

    def test_no_api_key_flag(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--api-key", "sk-123"])

    def test_replay_fixture(self, tmp_path, capsys):
        ds = tmp_path / "aime.jsonl"
        ds.write_text(json.dumps({"id": "aime-2024-ii-8", "question": "?", "answer": "127"}) + "\n")
        out = tmp_path / "r.jsonl"
        rc = main(["run", "--dataset", str(ds), "--solver", "replay", "--pools", "builtin:aime_2024_ii_8",
                   "--replay-mode", "sequential", "--results", str(out)])
        assert rc == 0
        _, results = read_results(out)
        assert results[0].n_samples == 63 and results[0].final_answer == "127"


class TestConfig:
    def resolve(self, argv):
        args = build_parser().parse_args(argv)
        return resolve_config(args.command, args)

    def test_defaults(self):
        config = self.resolve(["sweep"])
        assert config["family"] == "msprt" and config["trials"] == 1000 and config["seed"] == 0

    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("trials = 50\nseed = 4\n# comment\n")
        config = self.resolve(["sweep", "--config", str(cfg), "--seed", "7"])
        assert config["trials"] == 50 and config["seed"] == 7

    def test_dashed_keys(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("max-samples = 12\n")
        assert self.resolve(["simulate", "--config", str(cfg)])["max_samples"] == 12

    def test_credential_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("api_key = sk-123\n")
        assert main(["sweep", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "credential" in err and "sk-123" not in err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("colour = blue\n")
        assert main(["sweep", "--config", str(cfg)]) == 1
        assert "colour" in capsys.readouterr().err

    def test_bad_value_in_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("trials = many\n")
        assert main(["sweep", "--config", str(cfg)]) == 1
        assert "trials" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["sweep", "--config", str(tmp_path / "none.ini")]) == 1
        assert "none.ini" in capsys.readouterr().err


class TestSweep:
    def test_reference_grid_msprt(self, tmp_path):
        out = tmp_path / "s.csv"
        rc = main(["sweep", "--family", "msprt", "--grid", "paper", "--trials", "3",
                   "--pools", "builtin:aime_2024_ii_8", "--out", str(out)])
        assert rc == 0
        rows = csv_rows(out)
        values = [float(r["param"]) for r in rows]
        assert min(values) == 0.94979 and max(values) == 0.94997
        assert sorted(values) == sorted(REFERENCE_GRIDS[Rule.MSPRT])
        meta = header_meta(out)
        assert meta["config"]["policy"]["beta"] == REFERENCE_GRIDS[Rule.MSPRT]
        assert meta["config"]["seed"] == 0

    def test_explicit_grid_self_consistency(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["sweep", "--family", "sc", "--grid", "1,8,40", "--trials", "2",
                     "--pools", "builtin:aime_2024_ii_8", "--out", str(out)]) == 0
        assert [float(r["avg_runs"]) for r in csv_rows(out)] == [1.0, 8.0, 40.0]

    def test_byte_identical(self, tmp_path):
        outs = [tmp_path / d / "s.csv" for d in ("a", "b")]
        for out in outs:
            assert main(["sweep", "--family", "adacons", "--grid", "0.8,0.95", "--trials", "5",
                         "--seed", "3", "--out-dir", str(out.parent)]) == 0
        assert (outs[0].parent / "sweep-adacons.csv").read_bytes() == (
            outs[1].parent / "sweep-adacons.csv").read_bytes()

    def test_bad_grid(self, tmp_path, capsys):
        assert main(["sweep", "--grid", "a,b", "--out-dir", str(tmp_path)]) == 1
        assert "--grid" in capsys.readouterr().err

    def test_grid_out_of_domain(self, tmp_path, capsys):
        assert main(["sweep", "--family", "adacons", "--grid", "1.5", "--trials", "1",
                     "--pools", "builtin:aime_2024_ii_8", "--out-dir", str(tmp_path)]) == 1
        assert "1.5" in capsys.readouterr().err

    def test_unknown_builtin(self, tmp_path, capsys):
        assert main(["sweep", "--pools", "builtin:nope", "--out-dir", str(tmp_path)]) == 1
        assert "nope" in capsys.readouterr().err


class TestSimulate:
    def test_fixture_pool(self, tmp_path):
        out = tmp_path / "sim.csv"
        assert main(["simulate", "--pools", "builtin:aime_2024_ii_8", "--policy", "sprt",
                     "--trials", "50", "--out", str(out)]) == 0
        (row,) = csv_rows(out)
        assert row["question"] == "aime-2024-ii-8" and row["trials"] == "50"
        assert 3.0 <= float(row["avg_runs"]) <= 256.0
        assert header_meta(out)["config"]["policy"]["rule"] == "sprt"

    def test_requires_pools(self, tmp_path, capsys):
        assert main(["simulate", "--out-dir", str(tmp_path)]) == 1
        assert "--pools" in capsys.readouterr().err


class TestReport:
    def test_end_to_end(self, tmp_path, dataset, capsys):
        for policy in ("sprt", "sc"):
            assert main(["run", "--dataset", str(dataset), "--policy", policy, "--mock-p-correct", "1.0",
                         "--out-dir", str(tmp_path)]) == 0
        files = sorted(str(p) for p in tmp_path.glob("results-*.jsonl"))
        report_dir = tmp_path / "rep"
        assert main(["report", *files, "--out-dir", str(report_dir)]) == 0
        rows = {r["policy"]: r for r in csv_rows(report_dir / "summary.csv")}
        assert float(rows["sprt"]["token_reduction_pct"]) == pytest.approx(92.5)
        assert float(rows["self-consistency"]["token_reduction_pct"]) == 0.0
        assert rows["sprt"]["dataset"] == "toy"
        assert "sprt" in capsys.readouterr().out

    def test_missing_baseline(self, tmp_path, dataset, capsys):
        assert main(["run", "--dataset", str(dataset), "--policy", "sprt", "--out-dir", str(tmp_path)]) == 0
        files = [str(p) for p in tmp_path.glob("results-*.jsonl")]
        assert main(["report", *files, "--out-dir", str(tmp_path / "rep")]) == 1
        assert "baseline" in capsys.readouterr().err

    def test_missing_results_file(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "gone.jsonl")]) == 1
        assert "gone.jsonl" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "modestop.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("modestop ")
