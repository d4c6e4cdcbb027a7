from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # optional exponential decay: lr * decay_rate ** (t / decay_steps)
    decay_rate: float | None = None
    decay_steps: int = 1000
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self) -> float:
        if self.decay_rate is None:
            return self.lr
        return self.lr * self.decay_rate ** (self.t / self.decay_steps)

    def tensors(self) -> dict[str, np.ndarray]:
        """Moments and step counter as named arrays for the checkpoint file."""
        out = {f"adam/m/{k}": v for k, v in self.m.items()}
        out.update({f"adam/v/{k}": v for k, v in self.v.items()})
        out["adam/t"] = np.array([self.t], dtype=np.float32)
        return out

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "decay_rate": self.decay_rate, "decay_steps": self.decay_steps}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], hyper: dict) -> "AdamState":
        state = cls(**hyper)
        state.t = int(tensors["adam/t"][0]) if "adam/t" in tensors else 0
        for key, value in tensors.items():
            if key.startswith("adam/m/"):
                state.m[key[len("adam/m/"):]] = value.copy()
            elif key.startswith("adam/v/"):
                state.v[key[len("adam/v/"):]] = value.copy()
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises FloatingPointError naming the first parameter whose gradient is not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    lr = state.learning_rate()
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
