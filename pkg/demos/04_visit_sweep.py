"""
Sweeping the visit weight
=========================

Runs the sweep-visit subcommand on blobs and prints the resulting table:
median (std) of the min-over-training test error for each visit weight.
Point --config at an MNIST config to get the full-scale version.
"""
import json
import sys
import tempfile
from pathlib import Path

from assoclearn.cli import main

out = Path(tempfile.mkdtemp(prefix="visit_sweep_"))
config = out / "blobs.json"
config.write_text(json.dumps({
    "model": {"architecture": "FC(16)->FC(8)"},
    "sampler": {"labeled_per_class": 4, "labeled_pool_size": 16, "unlabeled_pool_size": 500},
    "max_steps": 600,
    "eval_every": 50,
}))

code = main(["sweep-visit", "--config", str(config), "--weights", "0,0.25,0.5,1", "--out", str(out)])
if code:
    sys.exit(code)
print((out / "sweep_visit.csv").read_text())
print("per-run errors in", out / "sweep_visit_runs.csv")
