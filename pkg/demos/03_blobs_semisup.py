"""
Supervised vs associative training on Gaussian blobs
====================================================

Four classes in the plane, four labels per class, 500 unlabeled points.
The same small FC net is trained with the classification loss alone and
with walker + visit losses added.  The nearest-mean classifier on the true
means gives the Bayes floor for comparison.
"""
import numpy as np

from assoclearn import trainer
from assoclearn.config import RunConfig, apply_overrides
from assoclearn.data import simplex_means

base = apply_overrides(RunConfig(), [
    "model.architecture=FC(16)->FC(8)",
    "sampler.labeled_per_class=4", "sampler.labeled_pool_size=16",
    "sampler.unlabeled_pool_size=500", "sampler.unlabeled_batch=100",
    "max_steps=1500", "eval_every=50",
])

train, test = trainer.load_data(base.data)
means = simplex_means(4, 2)
d = ((test.images.reshape(len(test), -1)[:, None] - means[None]) ** 2).sum(-1)
print(f"nearest true mean: {100 * (d.argmin(1) != test.labels).mean():.2f}% test error")

for mode in ("supervised", "semisup"):
    s = trainer.run_seeds(base.model_copy(update={"mode": mode}), (train, test), seeds=[0, 1, 2])
    print(f"{mode:10s} min test error per seed {[round(e, 2) for e in s.errors]}  median {s.median:.2f}%")

# how the walk behaves over training for one seed
r = trainer.run(base.model_copy(update={"seed": 0}), (train, test))
for rec in r.records[::300]:
    print(f"step {rec.step:5d}  walker {rec.L_walker:.3f}  visit {rec.L_visit:.3f}  "
          f"P(correct walk) {rec.correct_walk_probability:.3f}")
