"""
Checking the tape against finite differences
============================================

A tiny conv net, one labeled and one unlabeled batch, all three association
losses plus the weight penalty.  Every parameter's analytic gradient is
compared with central differences at 64-bit.
"""
import numpy as np

from assoclearn import association as assoc
from assoclearn import autodiff as ad
from assoclearn import model
from assoclearn.autodiff import Tape

rng = np.random.default_rng(0)
spec = model.parse_architecture("C(4,3)->P(2)->FC(8)", num_classes=2)
params = model.init_parameters(spec, (8, 8, 1), seed=0, dtype=np.float64)
xa = rng.normal(size=(4, 8, 8, 1))
xb = rng.normal(size=(4, 8, 8, 1))
labels = [0, 0, 1, 1]


def objective(tape):
    fa = model.forward(params, xa, tape)
    fb = model.forward(params, xb, tape)
    loss, _ = assoc.total_loss(fa.embeddings, fb.embeddings, labels, fa.logits, assoc.LossWeights())
    return loss + fa.l2


tape = Tape(np.float64)
grads = tape.gradient(objective(tape))

for name, value in params.arrays.items():
    numeric = ad.numeric_gradient(lambda: objective(Tape(np.float64)).item(), value)
    err = ad.relative_error(grads[name], numeric).max()
    print(f"{name:16s} {str(value.shape):16s} max relative error {err:.1e}")
