import csv
import json
import subprocess
import sys

import pytest

from moirai2.cli import main

TINY_TRAIN = ["--steps", "6", "--warmup", "2", "--batch", "4", "--ctx-patches", "8", "--patch", "4",
              "--d-model", "16", "--heads", "2", "--d-ff", "32", "--layers", "1", "--n-token", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "6", "--len", "160", "--seed", "1", "--out", str(d / "corpus.ndjson")]) == 0
    assert main(["train", "--corpus", str(d / "corpus.ndjson"), "--out", str(d / "m.mrai"), *TINY_TRAIN]) == 0
    return d


def test_synth_writes_manifest(workdir):
    manifest = json.loads((workdir / "corpus.ndjson.manifest.json").read_text())
    assert manifest["subcommand"] == "synth" and manifest["seed"] == 1
    assert manifest["result"]["n_written"] == 6
    assert len((workdir / "corpus.ndjson").read_text().splitlines()) == 6


def test_synth_reproducible(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    for p in (a, b):
        assert main(["synth", "--n", "3", "--len", "64", "--seed", "9", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_reproducible(workdir, tmp_path):
    out = tmp_path / "again.mrai"
    assert main(["train", "--corpus", str(workdir / "corpus.ndjson"), "--out", str(out), *TINY_TRAIN]) == 0
    assert out.read_bytes() == (workdir / "m.mrai").read_bytes()
    log = (workdir / "m.mrai.log.csv").read_text().splitlines()
    assert log[0] == "step,loss,lr,grad_norm" and len(log) == 7


def test_mixup(workdir, tmp_path):
    out = tmp_path / "mix.ndjson"
    assert main(["mixup", "--corpus", str(workdir / "corpus.ndjson"), "--n", "4", "--len-min", "32",
                 "--len-max", "64", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4


@pytest.mark.parametrize("decode", ["arq", "direct"])
def test_forecast(workdir, tmp_path, decode):
    out = tmp_path / "fc.ndjson"
    assert main(["forecast", "--model", str(workdir / "m.mrai"), "--corpus", str(workdir / "corpus.ndjson"),
                 "--horizon", "20", "--decode", decode, "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 6
    assert len(recs[0]["values"]) == 20 and len(recs[0]["values"][0]) == 9
    assert recs[0]["start_offset"] == 160


def test_eval_reports_aggregate(workdir, tmp_path):
    tasks = tmp_path / "tasks.ndjson"
    with open(workdir / "corpus.ndjson") as src, open(tasks, "w") as dst:
        for line in src:
            dst.write(json.dumps(json.loads(line) | {"horizon": 16}) + "\n")
    for model in (str(workdir / "m.mrai"), "seasonal-naive"):
        out = tmp_path / "report.csv"
        assert main(["eval", "--model", model, "--tasks", str(tasks), "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[-1][0] == "aggregate" and len(rows) == 8
    assert float(rows[-1][-1]) == pytest.approx(1.0)


def test_bench_kv(workdir, tmp_path):
    out = tmp_path / "bench.json"
    assert main(["bench-kv", "--model", str(workdir / "m.mrai"), "--context", "64", "--horizon", "24", "40",
                 "--repeats", "1", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert [r["horizon"] for r in res] == [24, 40]


def test_config_file_sets_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 2, "len": 40, "seed": 4}))
    out = tmp_path / "c.ndjson"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2
    assert main(["synth", "--config", str(cfg), "--n", "3", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "c.ndjson.manifest.json").read_text())
    assert manifest["config"]["n"] == 3 and manifest["seed"] == 4


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense", "--out", "x"],
    ["synth"],
    ["synth", "--out", "x", "--bogus"],
    ["forecast", "--out", "x", "--model", "m", "--corpus", "c", "--decode", "beam"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_error_exits_two(tmp_path, capsys):
    assert main(["forecast", "--model", str(tmp_path / "missing.mrai"), "--corpus", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "forecast" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "default: 2000" in out and "--mask-rate" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "moirai2", "synth", "--n", "1", "--len", "32",
                           "--out", str(tmp_path / "s.ndjson")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
