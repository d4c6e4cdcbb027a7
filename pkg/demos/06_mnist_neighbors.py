"""
MNIST: train briefly, then look at nearest neighbors in embedding space
======================================================================

Needs the IDX files under data/mnist (or ASSOCLEARN_MNIST).  Trains the
small conv net for a few hundred steps with 100 labels, then lists the
cosine nearest neighbors of a few test digits among the training set.
"""
import os
import sys
from pathlib import Path

import numpy as np

from assoclearn import trainer
from assoclearn.config import RunConfig, apply_overrides
from assoclearn.data import load_idx_dataset

root = Path(os.environ.get("ASSOCLEARN_MNIST", Path(__file__).resolve().parents[1] / "data" / "mnist"))
try:
    train = load_idx_dataset(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz")
    test = load_idx_dataset(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz")
except OSError as e:
    sys.exit(f"MNIST not available: {e}")

cfg = apply_overrides(RunConfig(), [
    "model.architecture=C(16,3)->P(2)->C(32,3)->P(2)->FC(64)", "data.num_classes=10",
    "sampler.labeled_pool_size=100", "sampler.unlabeled_pool_size=5000",
    "max_steps=500", "eval_every=100",
])
small_test = test.subset(np.arange(2000))
r = trainer.run(cfg, (train, small_test))
print(f"min test error on 2000 digits after 500 steps: {r.best_error:.2f}%")

corpus = train.subset(np.arange(5000))
queries = small_test.subset(np.arange(5))
for q, hits in enumerate(trainer.nearest_neighbors(r.params, queries, corpus, k=5)):
    found = " ".join(f"{corpus.labels[i]}({s:.2f})" for i, s in hits)
    print(f"query digit {queries.labels[q]}: {found}")
