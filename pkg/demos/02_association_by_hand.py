"""
Walking from labeled to unlabeled embeddings and back
=====================================================

Two labeled points per class and four unlabeled points.  We print the
transition matrices, the round trip, and the losses, then show what the
visit loss sees when the unlabeled points are ignored.
"""
import numpy as np

from assoclearn import association as assoc
from assoclearn.autodiff import Tape

np.set_printoptions(precision=3, suppress=True)
t = Tape(np.float64)

A = t.constant([[2.0, 0.0], [1.5, 0.2], [0.0, 2.0], [0.1, 1.5]])
labels = [0, 0, 1, 1]
B = t.constant([[1.0, 0.0], [1.2, 0.1], [0.0, 1.0], [0.1, 1.1]])

a = assoc.associate(A, B, labels)
print("P^ab (labeled -> unlabeled)\n", a.Pab.value)
print("P^ba (unlabeled -> labeled)\n", a.Pba.value)
print("round trip P^aba\n", a.Paba.value)
print("target T\n", assoc.walker_target(labels))
print("walker loss", assoc.walker_loss(a.Paba, assoc.walker_target(labels)).item())
print("visit loss ", assoc.visit_loss(a.Pab).item(), " (ln 4 =", np.log(4), ")")
print("P(correct walk)", assoc.correct_walk_probability(a.Paba.value, labels))

# now put two unlabeled points far from everything: nobody visits them
B2 = t.constant([[1.0, 0.0], [0.0, 1.0], [-3.0, -3.0], [-3.0, -2.5]])
a2 = assoc.associate(A, B2, labels)
print("\nvisit probabilities with two outliers", a2.Pvisit.value)
print("visit loss", assoc.visit_loss(a2.Pab).item())
