"""Command-line entry point.

    python -m assoclearn train --config run.json --set loss.visit=0.25
    python -m assoclearn sweep-visit --config run.json --weights 0,0.25,0.5,1

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import association, trainer
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .data import LabeledSampler, UnlabeledSampler
from .model import load_checkpoint

log = logging.getLogger("assoclearn")

COMMANDS = ("train", "eval", "adapt", "sweep-visit", "assoc-dump", "nn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="assoclearn", description="Learning by association: semi-supervised training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--parallel", type=int, default=1, metavar="N")
        if name in ("eval", "assoc-dump", "nn"):
            p.add_argument("--checkpoint", metavar="PATH", help="default: <out>/checkpoint.assc")
        if name == "sweep-visit":
            p.add_argument("--weights", default="0,0.25,0.5,1")
            p.add_argument("--name", default=None, help="row label of the sweep table")
        if name == "nn":
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--queries", type=int, default=10)
        if name == "assoc-dump":
            p.add_argument("--step", type=int, default=None, help="label for the dump files")
    return parser


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    cfg = apply_overrides(cfg, overrides)
    if cfg.out_dir is None:
        cfg = cfg.model_copy(update={"out_dir": "out"})
    return cfg


def _checkpoint_path(args, cfg: RunConfig) -> str:
    return args.checkpoint or os.path.join(cfg.out_dir, "checkpoint.assc")


def cmd_train(args, cfg: RunConfig) -> None:
    result = trainer.run(cfg)
    print(f"min test error {result.best_error:.2f}% at step {result.best_step}; outputs in {cfg.out_dir}")


def cmd_eval(args, cfg: RunConfig) -> None:
    params, _, meta = load_checkpoint(_checkpoint_path(args, cfg))
    _, test = trainer.load_data(cfg.data)
    error, confusion = trainer.evaluate(params, test)
    os.makedirs(cfg.out_dir, exist_ok=True)
    trainer.write_confusion(confusion, os.path.join(cfg.out_dir, "confusion.csv"))
    with open(os.path.join(cfg.out_dir, "eval.json"), "w") as f:
        json.dump({"test_error_percent": error, "step": meta.get("step")}, f, indent=2)
    print(f"test error {error:.2f}%")


def cmd_adapt(args, cfg: RunConfig) -> None:
    result = trainer.adapt(cfg.model_copy(update={"mode": "adapt"}))
    print(json.dumps(result.extra, indent=2))


def _sweep_job(payload):
    cfg = RunConfig.model_validate(payload)
    return cfg.loss.visit, cfg.seed, trainer.run(cfg).best_error


def cmd_sweep_visit(args, cfg: RunConfig) -> None:
    try:
        weights = [float(w) for w in args.weights.split(",")]
    except ValueError:
        raise UsageError(f"--weights must be comma-separated numbers, got {args.weights!r}") from None
    seeds = list(range(cfg.seed, cfg.seed + cfg.num_seeds))
    jobs = []
    for w in weights:
        for s in seeds:
            out = os.path.join(cfg.out_dir, f"visit_{w:g}", f"seed_{s}")
            jobs.append(apply_overrides(cfg, [f"loss.visit={w}", f"seed={s}", f"out_dir={json.dumps(out)}"]).model_dump())
    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    with open(os.path.join(cfg.out_dir, "sweep_visit_runs.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["visit_weight", "seed", "min_test_error_percent"])
        for row in results:
            w.writerow([f"{row[0]:g}", row[1], f"{row[2]:.4f}"])
    name = args.name or cfg.data.kind
    cells = []
    for wt in weights:
        errs = [e for v, _, e in results if v == wt]
        std = float(np.std(errs, ddof=1)) if len(errs) > 1 else 0.0
        cells.append(f"{np.median(errs):.2f} ({std:.2f})")
    with open(os.path.join(cfg.out_dir, "sweep_visit.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["data_set"] + [f"{wt:g}" for wt in weights])
        w.writerow([name] + cells)
    print(f"{'data_set':<10}" + "".join(f"{wt:>16g}" for wt in weights))
    print(f"{name:<10}" + "".join(f"{c:>16}" for c in cells))


def cmd_assoc_dump(args, cfg: RunConfig) -> None:
    params, _, meta = load_checkpoint(_checkpoint_path(args, cfg))
    train, _ = trainer.load_data(cfg.data)
    streams = trainer._streams(cfg.seed)
    scfg = trainer.sampler_config(cfg)
    a = LabeledSampler(train, scfg, streams["labeled"]).sample()
    b = UnlabeledSampler(train, scfg, streams["unlabeled"]).sample()
    snap = trainer.association_snapshot(params, a, b, trainer._weights(cfg))
    step = args.step if args.step is not None else int(meta.get("step", 0))
    files = association.write_dump(snap, os.path.join(cfg.out_dir, "assoc"), step)
    print("\n".join(files))


def cmd_nn(args, cfg: RunConfig) -> None:
    params, _, _ = load_checkpoint(_checkpoint_path(args, cfg))
    train, test = trainer.load_data(cfg.data)
    query = test.subset(np.arange(min(args.queries, len(test))))
    neighbors = trainer.nearest_neighbors(params, query, train, args.k)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "nn.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_index", "rank", "corpus_index", "cosine_similarity"])
        for qi, row in enumerate(neighbors):
            for rank, (ci, sim) in enumerate(row, start=1):
                w.writerow([qi, rank, ci, f"{sim:.6f}"])
    print(path)


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "sweep-visit": cmd_sweep_visit,
    "assoc-dump": cmd_assoc_dump,
    "nn": cmd_nn,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = effective_config(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command in ("train", "adapt"):
            os.makedirs(cfg.out_dir, exist_ok=True)
        HANDLERS[args.command](args, cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
