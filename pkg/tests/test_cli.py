import csv
import json
import subprocess
import sys

import pytest

from edgedem.cli import build_parser, main

CONFIG = """\
run:
  replications: 2
  seed: 1
network:
  n_ues: 8
  n_sbs: 2
  quota: 5
data:
  n_samples: 8000
train:
  rounds: 2
  local_epochs: 1
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG)
    return p


def test_help_lists_flags_and_commands():
    text = build_parser().format_help()
    for token in ("--config", "--seed", "--out-dir", "--replications", "--trace-matching", "run", "sweep",
                  "matching-bench", "cluster-snapshot"):
        assert token in text


def test_run_writes_outputs(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--config", str(config), "--out-dir", str(out), "--trace-matching", "run"]) == 0
    for name in ("rounds.csv", "rounds.jsonl", "summary.json", "matching_trace.jsonl", "clusters.jsonl",
                 "networks.jsonl", "dataset_manifest.json"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader((out / "rounds.csv").open()))
    assert len(rows) == 4
    assert json.loads((out / "summary.json").read_text())["config"]["run"]["seed"] == 1
    assert "csv:" in capsys.readouterr().out


def test_global_flags_override_config(config, tmp_path):
    out = tmp_path / "o"
    assert main(["--config", str(config), "--seed", "9", "--replications", "1", "--out-dir", str(out), "run"]) == 0
    doc = json.loads((out / "summary.json").read_text())
    assert doc["config"]["run"]["seed"] == 9 and doc["replications"] == 1


def test_run_is_deterministic(config, tmp_path):
    for d in ("a", "b"):
        assert main(["--config", str(config), "--out-dir", str(tmp_path / d), "--trace-matching", "run"]) == 0
    for name in ("rounds.csv", "rounds.jsonl", "matching_trace.jsonl", "clusters.jsonl", "networks.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # the summary echoes the config, whose out_dir differs between the two runs
    docs = [json.loads((tmp_path / d / "summary.json").read_text()) for d in ("a", "b")]
    for doc in docs:
        doc["config"]["output"].pop("out_dir")
    assert docs[0] == docs[1]


def test_print_config(config, capsys):
    assert main(["--config", str(config), "run", "--print-config"]) == 0
    assert "n_ues: 8" in capsys.readouterr().out


def test_sweep(config, tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["--config", str(config), "--out-dir", str(out), "sweep", "--n-ues", "6,8", "--n-sbs", "2"]) == 0
    doc = json.loads((out / "sweep.json").read_text())
    assert doc["n_ues"] == [6, 8] and doc["n_sbs"] == [2]
    assert len(doc["mean_delay_ms"]) == 2 and len(doc["mean_delay_ms"][0]) == 1
    assert (out / "sweep.csv").read_text().startswith("n_ues,n_sbs")


def test_matching_bench(config, tmp_path):
    out = tmp_path / "m"
    assert main(["--config", str(config), "--out-dir", str(out), "matching-bench",
                 "--schemes", "proposal,random,uniform,one_sided"]) == 0
    rows = json.loads((out / "matching_bench.json").read_text())["schemes"]
    assert [r["scheme"] for r in rows] == ["proposal", "random", "uniform", "one_sided"]
    assert all(r["replications"] == 2 for r in rows)


def test_cluster_snapshot(config, tmp_path):
    out = tmp_path / "c"
    assert main(["--config", str(config), "--out-dir", str(out), "cluster-snapshot"]) == 0
    doc = json.loads((out / "dendrogram.json").read_text())
    assert len(doc["final"]["merges"]) == 7 and len(doc["rounds"]) == 2
    assert doc["final"]["heights"] == sorted(doc["final"]["heights"])


def test_bad_config_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("network:\n  n_uez: 3\n")
    assert main(["--config", str(p), "run"]) == 2
    assert "n_uez" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.yaml"), "run"]) == 2


def test_unknown_bench_scheme(config, tmp_path):
    assert main(["--config", str(config), "--out-dir", str(tmp_path), "matching-bench", "--schemes", "nope"]) == 2


def test_failed_replication_exit_code(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("run:\n  replications: 1\nnetwork:\n  n_ues: 40\ndata:\n  n_samples: 300\n")
    assert main(["--config", str(p), "--out-dir", str(tmp_path / "o"), "run"]) == 1
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["errors"][0]["error"] == "InsufficientSamples"


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edgedem.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "cluster-snapshot" in proc.stdout
