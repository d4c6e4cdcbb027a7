"""Association cycles between labeled and unlabeled embeddings.

A walker steps from each labeled embedding to the unlabeled batch and back,
following softmaxed dot-product similarities.  The walker loss rewards
round trips that end in the starting class; the visit loss rewards
spreading the first step evenly over the unlabeled batch.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-8


@dataclass
class LossWeights:
    walker: float = 1.0
    visit: float = 1.0
    classification: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name!r} must be finite and >= 0, got {value}")


@dataclass
class AssociationTensors:
    """Everything computed for one association step (values are Tensors)."""

    M: Tensor
    Pab: Tensor
    Pba: Tensor
    Paba: Tensor
    Pvisit: Tensor
    labels_A: np.ndarray
    walker: Tensor | None = None
    visit: Tensor | None = None
    classification: Tensor | None = None

    def losses(self) -> dict[str, float]:
        out = {}
        for name in ("walker", "visit", "classification"):
            t = getattr(self, name)
            out[name] = None if t is None else t.item()
        return out


def similarity(A: Tensor, B: Tensor) -> Tensor:
    """Raw dot products ``M[i, j] = A[i] . B[j]``."""
    if A.value.ndim != 2 or B.value.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ad.ShapeError(f"embedding dimensions differ: A {A.shape}, B {B.shape}")
    return ad.matmul(A, ad.transpose(B))


def transition_probabilities(M: Tensor) -> tuple[Tensor, Tensor]:
    """Row-softmax of M (A->B) and of its transpose (B->A)."""
    return ad.softmax_rows(M), ad.softmax_rows(ad.transpose(M))


def round_trip(Pab: Tensor, Pba: Tensor) -> Tensor:
    return ad.matmul(Pab, Pba)


def correct_walk_probability(Paba, labels_A) -> float:
    """Mean over start points of the probability of returning to the same class."""
    P = Paba.value if isinstance(Paba, Tensor) else np.asarray(Paba)
    labels = np.asarray(labels_A)
    same = labels[:, None] == labels[None, :]
    return float(P[same].sum() / P.shape[0])


def walker_target(labels_A) -> np.ndarray:
    labels = np.asarray(labels_A)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def _row_cross_entropy(target: np.ndarray, P: Tensor) -> Tensor:
    """Mean over rows of ``-sum_j target_ij log P_ij``."""
    logp = ad.clamped_log(P, LOG_FLOOR)
    rows = target.shape[0] if target.ndim == 2 else 1
    return ad.scale(ad.sum_all(ad.multiply(logp, P.tape.constant(target))), -1.0 / rows)


def walker_loss(Paba: Tensor, T: np.ndarray) -> Tensor:
    T = np.asarray(T)
    if T.shape != Paba.shape:
        raise ad.ShapeError(f"walker target {T.shape} does not match round trip {Paba.shape}")
    return _row_cross_entropy(T, Paba)


def visit_probabilities(Pab: Tensor) -> Tensor:
    return ad.mean_rows(Pab)


def visit_loss(Pab: Tensor) -> Tensor:
    """Cross-entropy between uniform visits and the mean first-step distribution."""
    nb = Pab.shape[1]
    return _row_cross_entropy(np.full(nb, 1.0 / nb), visit_probabilities(Pab))


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    labels = np.asarray(labels)
    b, K = logits.shape
    if labels.shape != (b,):
        raise ad.ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, K))
    onehot[np.arange(b), labels] = 1.0
    logp = ad.log_softmax_rows(logits)
    return ad.scale(ad.sum_all(ad.multiply(logp, logits.tape.constant(onehot))), -1.0 / b)


def associate(A: Tensor, B: Tensor, labels_A) -> AssociationTensors:
    M = similarity(A, B)
    Pab, Pba = transition_probabilities(M)
    Paba = round_trip(Pab, Pba)
    return AssociationTensors(M, Pab, Pba, Paba, visit_probabilities(Pab), np.asarray(labels_A))


def total_loss(A: Tensor | None, B: Tensor | None, labels_A, logits_A: Tensor,
               weights: LossWeights) -> tuple[Tensor, AssociationTensors | None]:
    """Weighted walker + visit + classification loss.

    With ``B=None`` only the classification term is formed and no
    association diagnostics are returned.
    """
    l_cls = classification_loss(logits_A, labels_A)
    total = ad.scale(l_cls, weights.classification)
    if B is None:
        return total, None
    assoc = associate(A, B, labels_A)
    assoc.walker = walker_loss(assoc.Paba, walker_target(labels_A))
    assoc.visit = _row_cross_entropy(np.full(B.shape[0], 1.0 / B.shape[0]), assoc.Pvisit)
    assoc.classification = l_cls
    total = ad.add(total, ad.scale(assoc.walker, weights.walker))
    total = ad.add(total, ad.scale(assoc.visit, weights.visit))
    return total, assoc


def write_dump(assoc: AssociationTensors, directory, step: int, extra: dict | None = None) -> list[str]:
    """Write M, Pab, Pba, Paba, Pvisit as CSV (9 significant digits) and a JSON sidecar."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for name in ("M", "Pab", "Pba", "Paba", "Pvisit"):
        value = np.atleast_2d(getattr(assoc, name).value)
        path = os.path.join(directory, f"{name}_step{step}.csv")
        np.savetxt(path, value, fmt="%.9g", delimiter=",")
        written.append(path)
    sidecar = {
        "step": step,
        "batch_sizes": {"A": int(assoc.M.shape[0]), "B": int(assoc.M.shape[1])},
        "losses": assoc.losses(),
        "correct_walk_probability": correct_walk_probability(assoc.Paba, assoc.labels_A),
        "labels_A": [int(v) for v in assoc.labels_A],
    }
    if extra:
        sidecar.update(extra)
    path = os.path.join(directory, f"assoc_step{step}.json")
    with open(path, "w") as f:
        json.dump(sidecar, f, indent=2)
    written.append(path)
    return written


def read_dump(directory, step: int) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for name in ("M", "Pab", "Pba", "Paba", "Pvisit"):
        arr = np.loadtxt(os.path.join(directory, f"{name}_step{step}.csv"), delimiter=",", ndmin=2)
        arrays[name] = arr[0] if name == "Pvisit" else arr
    with open(os.path.join(directory, f"assoc_step{step}.json")) as f:
        meta = json.load(f)
    return arrays, meta
