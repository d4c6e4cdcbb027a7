import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from assoclearn.cli import main


@pytest.fixture
def config(tmp_path):
    cfg = {
        "model": {"architecture": "FC(16)->FC(8)"},
        "data": {"kind": "blobs", "per_class": 40, "test_per_class": 25},
        "sampler": {"labeled_per_class": 4, "unlabeled_batch": 30},
        "max_steps": 12,
        "eval_every": 5,
        "num_seeds": 2,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_no_arguments(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "assoclearn"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_unknown_subcommand(capsys):
    assert main(["fly", "--config", "x"]) == 1


def test_missing_config_flag(capsys):
    assert main(["train"]) == 1
    assert "--config" in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 1
    assert "--config" in capsys.readouterr().err


@pytest.mark.parametrize("override,key", [
    ("loss.bogus=1", "loss.bogus"),
    ("loss.visit=abc", "loss.visit"),
    ("max_steps=0", "max_steps"),
    ("loss.visit.x=1", "loss.visit.x"),
    ("novalue", "novalue"),
])
def test_bad_overrides_name_the_key(config, tmp_path, capsys, override, key):
    assert main(["train", "--config", str(config), "--set", override, "--out", str(tmp_path / "o")]) == 1
    assert key in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_schema_violation_in_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"sampler": {"labeled_per_class": "many"}}))
    assert main(["train", "--config", str(path)]) == 1
    assert "sampler.labeled_per_class" in capsys.readouterr().err


def test_train_with_override(config, tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--config", str(config), "--set", "loss.visit=0.25", "--seed", "3", "--out", str(out)]) == 0
    effective = json.loads((out / "config.json").read_text())
    assert effective["loss"]["visit"] == 0.25 and effective["seed"] == 3 and effective["out_dir"] == str(out)
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 12
    # every output stays under the output directory
    assert {p.name for p in tmp_path.iterdir()} == {"run.json", "o"}


def test_rerun_from_effective_config(config, tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    first = (out / "metrics.jsonl").read_bytes()
    assert main(["train", "--config", str(out / "config.json")]) == 0
    assert (out / "metrics.jsonl").read_bytes() == first


def test_runtime_failure_exit_2(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["eval", "--config", str(config), "--out", str(out)]) == 2
    assert "checkpoint.assc" in capsys.readouterr().err


def test_eval_assoc_dump_nn(config, tmp_path):
    out = tmp_path / "o"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(config), "--out", str(out)]) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert 0 <= ev["test_error_percent"] <= 100 and ev["step"] == 12
    assert main(["assoc-dump", "--config", str(config), "--out", str(out)]) == 0
    meta = json.loads((out / "assoc" / "assoc_step12.json").read_text())
    assert meta["batch_sizes"] == {"A": 16, "B": 30}
    assert main(["nn", "--config", str(config), "--out", str(out), "--k", "3", "--queries", "4"]) == 0
    rows = list(csv.DictReader(open(out / "nn.csv")))
    assert len(rows) == 12
    sims = [float(r["cosine_similarity"]) for r in rows if r["query_index"] == "0"]
    assert sims == sorted(sims, reverse=True)


def test_adapt(config, tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["adapt", "--config", str(config), "--out", str(out),
                 "--set", 'adapt.target={"kind": "blobs", "rotation": 30, "per_class": 40, "test_per_class": 25}',
                 "--set", "adapt.steps=5"])
    assert code == 0
    extra = json.loads((out / "adapt.json").read_text())
    assert set(extra) == {"source_only_error", "adapted_error", "adapted_min_error"}


def test_adapt_without_target(config, tmp_path, capsys):
    assert main(["adapt", "--config", str(config), "--out", str(tmp_path / "o")]) == 2


def read_sweep(out):
    with open(out / "sweep_visit.csv") as f:
        return list(csv.reader(f))


@pytest.mark.parametrize("parallel", [1, 2])
def test_sweep_visit(config, tmp_path, parallel):
    out = tmp_path / "o"
    assert main(["sweep-visit", "--config", str(config), "--weights", "0,0.25,0.5,1", "--out", str(out),
                 "--parallel", str(parallel)]) == 0
    table = read_sweep(out)
    assert table[0] == ["data_set", "0", "0.25", "0.5", "1"]
    assert table[1][0] == "blobs" and len(table) == 2
    runs = list(csv.DictReader(open(out / "sweep_visit_runs.csv")))
    assert len(runs) == 8
    for col, w in zip(table[1][1:], ["0", "0.25", "0.5", "1"]):
        errs = [float(r["min_test_error_percent"]) for r in runs if r["visit_weight"] == w]
        assert col == f"{np.median(errs):.2f} ({np.std(errs, ddof=1):.2f})"
    assert (out / "visit_0.25" / "seed_1" / "metrics.jsonl").exists()


def test_sweep_parallel_matches_sequential(config, tmp_path):
    for n, name in ((1, "a"), (2, "b")):
        assert main(["sweep-visit", "--config", str(config), "--weights", "0,1", "--out", str(tmp_path / name),
                     "--parallel", str(n)]) == 0
    assert read_sweep(tmp_path / "a") == read_sweep(tmp_path / "b")


def test_sweep_bad_weights(config, tmp_path, capsys):
    assert main(["sweep-visit", "--config", str(config), "--weights", "a,b", "--out", str(tmp_path / "o")]) == 1
