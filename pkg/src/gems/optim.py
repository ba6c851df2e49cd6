"""AdamW with cosine-annealed learning rate and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, StepOutOfRange, ValidationError
from .tape import backward  # noqa: F401  re-exported: gradients come from the tape

Gradients = dict[str, np.ndarray]


def global_norm(grads: Gradients) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: Gradients, max_norm: float = 0.1) -> Gradients:
    """Scale every gradient by max_norm / g when the global L2 norm g exceeds max_norm."""
    if not max_norm > 0:
        raise ValidationError("max_norm must be positive")
    g = global_norm(grads)
    if g <= max_norm:
        return grads
    factor = max_norm / g
    return {k: v * factor for k, v in grads.items()}


def cosine_lr(step: int, total_steps: int, base_lr: float = 5e-4, min_lr: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_max_norm: float = 0.1
    min_lr: float = 0.0
    total_steps: int = 1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "clip_max_norm": self.clip_max_norm, "min_lr": self.min_lr,
                "total_steps": self.total_steps, "step": self.step}

    @classmethod
    def from_hyper(cls, d: dict) -> "OptimState":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        return cls(**d)

    def current_lr(self) -> float:
        return cosine_lr(min(self.step, self.total_steps), self.total_steps, self.lr, self.min_lr)


def adamw_step(params: dict[str, np.ndarray], grads: Gradients, state: OptimState,
               lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimState]:
    """One decoupled-weight-decay Adam update.

    ``lr`` defaults to the cosine schedule at the state's current step. The
    decay theta <- theta - lr * lambda * theta is applied before, and
    separately from, the bias-corrected adaptive step. Returns new arrays; the
    state's moments are updated in place and the state is returned.
    """
    if lr is None:
        lr = state.current_lr()
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decayed = p - lr * state.weight_decay * p
        new[name] = np.asarray(decayed - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    state.step = t
    return new, state
