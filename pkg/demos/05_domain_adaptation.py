"""
Adapting to a rotated target domain
===================================

Source: four blobs.  Target: the same blobs rotated by 30 degrees.  The
net is trained on the source, then training continues with the unlabeled
batch drawn from the target while labels still come from the source.
"""
from assoclearn import trainer
from assoclearn.config import RunConfig, apply_overrides

cfg = apply_overrides(RunConfig(), [
    "mode=adapt", "model.architecture=FC(16)->FC(8)",
    "sampler.labeled_per_class=10", "sampler.unlabeled_batch=100",
    "max_steps=1000", "eval_every=50",
    'adapt.target={"kind": "blobs", "rotation": 30, "seed": 10}',
    "adapt.steps=2000", "adapt.visit=0.5", "adapt.target_only=true",
])

for seed in range(3):
    r = trainer.adapt(cfg.model_copy(update={"seed": seed}))
    x = r.extra
    print(f"seed {seed}: target error source-only {x['source_only_error']:.2f}%  "
          f"adapted {x['adapted_error']:.2f}% (min {x['adapted_min_error']:.2f}%)  "
          f"target-only {x['target_only_error']:.2f}%  gap closed {x['gap_coverage_percent']:.0f}%")
