"""Training loops, evaluation and analysis artifacts."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import association as assoc_mod
from . import data as data_mod
from . import model as model_mod
from .association import LossWeights
from .autodiff import Tape
from .config import DataConfig, RunConfig, dump_config
from .data import AugmentPolicy, Batch, Dataset, SamplerConfig
from .model import Parameters
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    step: int
    L_walker: float | None = None
    L_visit: float | None = None
    L_classification: float | None = None
    L_total: float | None = None
    correct_walk_probability: float | None = None
    test_error_percent: float | None = None
    wall_time: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class RunResult:
    records: list[MetricsRecord]
    best_error: float
    best_step: int
    confusion: np.ndarray
    params: Parameters
    state: AdamState
    out_dir: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final_error(self) -> float:
        evaluated = [r.test_error_percent for r in self.records if r.test_error_percent is not None]
        return evaluated[-1]


# single step


def train_step(params: Parameters, state: AdamState, batch_A: Batch, batch_B: Batch | None,
               weights: LossWeights, step: int = 0) -> MetricsRecord:
    """One forward/backward/Adam update.  ``params`` and ``state`` are updated in place.

    Without ``batch_B`` only the classification loss (plus L2) is optimized.
    A and B go through the network in separate passes that share weights.
    """
    dtype = params.arrays["logits/weights"].dtype
    # per-op finiteness checks are skipped; the loss and the gradients are checked instead
    tape = Tape(dtype, check_finite=False)
    fa = model_mod.forward(params, batch_A.images, tape)
    if batch_B is None:
        loss, assoc = assoc_mod.total_loss(None, None, batch_A.labels, fa.logits, weights)
        l2 = fa.l2
    else:
        fb = model_mod.forward(params, batch_B.images, tape)
        loss, assoc = assoc_mod.total_loss(fa.embeddings, fb.embeddings, batch_A.labels, fa.logits, weights)
        l2 = fa.l2  # same weights in both passes; count the penalty once
    objective = loss + l2
    if not np.isfinite(objective.item()):
        raise FloatingPointError(f"non-finite loss {objective.item()}")
    grads = tape.gradient(objective)
    adam_step(params.arrays, grads, state)
    rec = MetricsRecord(step=step, L_total=objective.item())
    if assoc is not None:
        losses = assoc.losses()
        rec.L_walker = losses["walker"]
        rec.L_visit = losses["visit"]
        rec.L_classification = losses["classification"]
        rec.correct_walk_probability = assoc_mod.correct_walk_probability(assoc.Paba, batch_A.labels)
    else:
        rec.L_classification = (loss.item() / weights.classification) if weights.classification else None
    return rec


def association_snapshot(params: Parameters, batch_A: Batch, batch_B: Batch, weights: LossWeights):
    """Association tensors for a pair of batches without updating anything."""
    tape = Tape(params.arrays["logits/weights"].dtype)
    fa = model_mod.forward(params, batch_A.images, tape)
    fb = model_mod.forward(params, batch_B.images, tape)
    _, assoc = assoc_mod.total_loss(fa.embeddings, fb.embeddings, batch_A.labels, fa.logits, weights)
    return assoc


# evaluation and analysis


def evaluate(params: Parameters, test: Dataset) -> tuple[float, np.ndarray]:
    """Test error in percent and the confusion matrix (rows: true, cols: predicted)."""
    if test.labels is None:
        raise ValueError("evaluation needs labels")
    _, logits = model_mod.predict(params, test.images)
    pred = logits.argmax(axis=1)
    K = test.num_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (test.labels, pred), 1)
    error = 100.0 * (1.0 - np.trace(confusion) / len(test))
    return float(error), confusion


def cosine_neighbors(query_emb: np.ndarray, corpus_emb: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    if k > len(corpus_emb):
        raise ValueError(f"k={k} exceeds corpus of {len(corpus_emb)}")
    qn = np.linalg.norm(query_emb, axis=1, keepdims=True)
    cn = np.linalg.norm(corpus_emb, axis=1, keepdims=True)
    sims = (query_emb @ corpus_emb.T).astype(np.float64)
    denom = qn * cn.T
    sims = np.divide(sims, denom, out=np.zeros_like(sims), where=denom > 0)
    out = []
    for row in sims:
        order = np.argsort(-row, kind="stable")[:k]
        out.append([(int(j), float(row[j])) for j in order])
    return out


def nearest_neighbors(params: Parameters, query: Dataset, corpus: Dataset, k: int):
    """Top-k corpus items per query by cosine similarity of embeddings (raw, not softmaxed)."""
    q, _ = model_mod.predict(params, query.images)
    c, _ = model_mod.predict(params, corpus.images)
    return cosine_neighbors(q, c, k)


def write_confusion(confusion: np.ndarray, path) -> None:
    np.savetxt(path, confusion, fmt="%d", delimiter=",")


# datasets from config


def load_data(dc: DataConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets described by a data config section."""
    if dc.kind == "blobs":
        train = data_mod.synth_blobs(dc.num_classes, dc.per_class, dc.dim, dc.spread, dc.seed, dc.rotation)
        test = data_mod.synth_blobs(dc.num_classes, dc.test_per_class, dc.dim, dc.spread, dc.seed + 1, dc.rotation)
    else:
        train = data_mod.load_idx_dataset(dc.train_images, dc.train_labels, dc.num_classes)
        test = data_mod.load_idx_dataset(dc.test_images, dc.test_labels, dc.num_classes)
    if dc.test_limit is not None:
        test = test.subset(np.arange(min(dc.test_limit, len(test))))
    return train, test


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.labeled_per_class, s.unlabeled_batch, s.labeled_pool_size,
                         s.unlabeled_pool_size, s.share_pool, cfg.seed)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "labeled", "unlabeled", "augment")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _weights(cfg: RunConfig, visit: float | None = None) -> LossWeights:
    visit = cfg.loss.visit if visit is None else visit
    return LossWeights(cfg.loss.walker, visit, cfg.loss.classification)


def _is_supervised(cfg: RunConfig) -> bool:
    return cfg.mode == "supervised" or cfg.sampler.unlabeled_pool_size == 0


class _Writer:
    """Everything that goes into the output directory."""

    def __init__(self, out_dir: str | None):
        self.out_dir = out_dir
        self._metrics = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._metrics = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def path(self, *parts) -> str | None:
        return os.path.join(self.out_dir, *parts) if self.out_dir else None

    def record(self, rec: MetricsRecord):
        if self._metrics:
            self._metrics.write(rec.to_json() + "\n")
            self._metrics.flush()

    def close(self):
        if self._metrics:
            self._metrics.close()


def _checkpoint(path, params: Parameters, state: AdamState, step: int):
    model_mod.save_checkpoint(path, params, state.tensors(),
                              meta={"step": step, "optimizer": state.hyperparameters()})


def _train_loop(cfg: RunConfig, params: Parameters, state: AdamState, labeled: Dataset,
                unlabeled: Dataset | None, test: Dataset, weights: LossWeights,
                first_step: int, steps: int, writer: _Writer, streams) -> RunResult:
    """Shared loop for every mode; ``unlabeled=None`` means supervised."""
    scfg = sampler_config(cfg)
    policy = AugmentPolicy(cfg.augment.max_shift, cfg.augment.noise_std, cfg.augment.max_rotation)
    lab = data_mod.LabeledSampler(labeled, scfg, streams["labeled"])
    unl = None
    if unlabeled is not None:
        pool = lab.pool if scfg.share_pool else None
        unl = data_mod.UnlabeledSampler(unlabeled, scfg, streams["unlabeled"], pool)

    def make_batches():
        a = lab.sample()
        b = unl.sample() if unl is not None else None
        if not policy.is_identity:
            a = Batch(data_mod.augment(a.images, policy, streams["augment"]), a.labels, a.indices)
            if b is not None:
                b = Batch(data_mod.augment(b.images, policy, streams["augment"]), None, b.indices)
        return a, b

    if cfg.sampler.prefetch > 0:
        source = data_mod.Prefetcher(make_batches, steps, cfg.sampler.prefetch)
    else:
        source = (make_batches() for _ in range(steps))

    records: list[MetricsRecord] = []
    best = (np.inf, -1, None)
    last = first_step + steps - 1
    t0 = time.perf_counter()
    try:
        for step, (a, b) in enumerate(source, start=first_step):
            try:
                rec = train_step(params, state, a, b, weights, step)
            except FloatingPointError as e:
                path = writer.path("checkpoint_last_good.assc")
                if path:
                    _checkpoint(path, params, state, step - 1)
                raise TrainingError(f"step {step}: {e}; last good parameters kept"
                                    + (f" in {path}" if path else "")) from e
            if step in cfg.assoc_dump_steps and b is not None and writer.out_dir:
                snap = association_snapshot(params, a, b, weights)
                assoc_mod.write_dump(snap, writer.path("assoc"), step)
            if step % cfg.eval_every == 0 or step == last:
                err, confusion = evaluate(params, test)
                rec.test_error_percent = err
                if err < best[0]:
                    best = (err, step, confusion)
            if cfg.log_wall_time:
                rec.wall_time = time.perf_counter() - t0
            records.append(rec)
            writer.record(rec)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and writer.out_dir:
                _checkpoint(writer.path("checkpoint.assc"), params, state, step)
    finally:
        if isinstance(source, data_mod.Prefetcher):
            source.close()
    return RunResult(records, best[0], best[1], best[2], params, state, writer.out_dir)


def _finish(result: RunResult, writer: _Writer, last_step: int):
    if writer.out_dir:
        write_confusion(result.confusion, writer.path("confusion.csv"))
        _checkpoint(writer.path("checkpoint.assc"), result.params, result.state, last_step)
        with open(writer.path("summary.json"), "w") as f:
            json.dump({"best_error": result.best_error, "best_step": result.best_step,
                       "final_error": result.final_error, **result.extra}, f, indent=2)
    writer.close()


def _fresh(cfg: RunConfig, input_shape, streams, num_classes: int) -> tuple[Parameters, AdamState]:
    spec = model_mod.parse_architecture(cfg.model.architecture, num_classes, cfg.model.pool_stride)
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    seed = int(streams["init"].integers(2**31))
    params = model_mod.init_parameters(spec, input_shape, seed, dtype)
    o = cfg.optimizer
    state = AdamState(o.lr, o.beta1, o.beta2, o.eps, o.decay_rate, o.decay_steps)
    return params, state


def run(cfg: RunConfig, data: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Train in supervised or semi-supervised mode; adapt mode is :func:`adapt`.

    The headline number is the minimum test error over all evaluations.
    """
    if cfg.mode == "adapt":
        return adapt(cfg)
    train, test = data if data is not None else load_data(cfg.data)
    streams = _streams(cfg.seed)
    params, state = _fresh(cfg, train.input_shape, streams, train.num_classes)
    writer = _Writer(cfg.out_dir)
    if cfg.out_dir:
        dump_config(cfg, writer.path("config.json"))
    supervised = _is_supervised(cfg)
    weights = LossWeights(0.0, 0.0, cfg.loss.classification) if supervised else _weights(cfg)
    try:
        result = _train_loop(cfg, params, state, train, None if supervised else train, test,
                             weights, 1, cfg.max_steps, writer, streams)
    except BaseException:
        writer.close()
        raise
    _finish(result, writer, cfg.max_steps)
    return result


def adapt(cfg: RunConfig, source_data: tuple[Dataset, Dataset] | None = None,
          target_data: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Train on the source domain, then keep training with the unlabeled batch
    drawn from the target domain.  Target labels are only used for testing.

    ``extra`` of the result holds source_only_error (target test error after
    the source phase), adapted_error (final), adapted_min_error and, when
    requested, target_only_error and gap_coverage_percent.
    """
    if cfg.adapt.target is None:
        raise ValueError("adaptation needs adapt.target")
    src_train, src_test = source_data if source_data is not None else load_data(cfg.data)
    tgt_train, tgt_test = target_data if target_data is not None else load_data(cfg.adapt.target)
    tgt_unlabeled = tgt_train.without_labels()
    streams = _streams(cfg.seed)
    params, state = _fresh(cfg, src_train.input_shape, streams, src_train.num_classes)
    root = cfg.out_dir
    if root:
        os.makedirs(root, exist_ok=True)
        dump_config(cfg, os.path.join(root, "config.json"))

    writer = _Writer(os.path.join(root, "source") if root else None)
    source = _train_loop(cfg, params, state, src_train, src_train, src_test, _weights(cfg),
                         1, cfg.max_steps, writer, streams)
    _finish(source, writer, cfg.max_steps)
    source_only, _ = evaluate(params, tgt_test)

    writer = _Writer(os.path.join(root, "adapt") if root else None)
    adapted = _train_loop(cfg, params, state, src_train, tgt_unlabeled, tgt_test,
                          _weights(cfg, cfg.adapt.visit), cfg.max_steps + 1, cfg.adapt.steps, writer, streams)
    extra = {
        "source_only_error": source_only,
        "adapted_error": adapted.final_error,
        "adapted_min_error": adapted.best_error,
    }
    if cfg.adapt.target_only:
        tcfg = cfg.model_copy(update={"mode": "semisup", "out_dir": os.path.join(root, "target_only") if root else None})
        target_only = run(tcfg, (tgt_train, tgt_test)).best_error
        extra["target_only_error"] = target_only
        extra["gap_coverage_percent"] = gap_coverage(source_only, adapted.final_error, target_only)
    adapted.extra = extra
    _finish(adapted, writer, cfg.max_steps + cfg.adapt.steps)
    if root:
        with open(os.path.join(root, "adapt.json"), "w") as f:
            json.dump(extra, f, indent=2)
    return adapted


def gap_coverage(source_only: float, adapted: float, target_only: float) -> float:
    """Share (%) of the source-only -> target-only error gap closed by adaptation."""
    gap = source_only - target_only
    return float("nan") if gap == 0 else 100.0 * (source_only - adapted) / gap


@dataclass
class SeedSummary:
    errors: list[float]
    results: list[RunResult]

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors, ddof=1)) if len(self.errors) > 1 else 0.0


def run_seeds(cfg: RunConfig, data=None, seeds: list[int] | None = None) -> SeedSummary:
    """Repeat a run over seeds (default: seed, seed+1, ... num_seeds of them)."""
    seeds = list(range(cfg.seed, cfg.seed + cfg.num_seeds)) if seeds is None else seeds
    results = []
    for s in seeds:
        out = os.path.join(cfg.out_dir, f"seed_{s}") if cfg.out_dir else None
        results.append(run(cfg.model_copy(update={"seed": s, "out_dir": out}), data))
    return SeedSummary([r.best_error for r in results], results)
