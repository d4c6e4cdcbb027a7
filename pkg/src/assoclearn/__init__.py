"""Semi-supervised training by association between labeled and unlabeled embeddings."""

from .association import (
    AssociationTensors,
    LossWeights,
    classification_loss,
    correct_walk_probability,
    round_trip,
    similarity,
    total_loss,
    transition_probabilities,
    visit_loss,
    walker_loss,
    walker_target,
)
from .autodiff import Tape, Tensor
from .config import RunConfig, apply_overrides, load_config
from .data import Dataset, SamplerConfig, parse_idx, serialize_idx, synth_blobs
from .model import ModelSpec, Parameters, forward, init_parameters, parse_architecture, render_architecture
from .optim import AdamState, adam_step
from .trainer import MetricsRecord, adapt, evaluate, nearest_neighbors, run, run_seeds, train_step

__version__ = "0.1.0"
