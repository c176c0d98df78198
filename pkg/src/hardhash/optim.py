from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.9
    decay_every: int = 10  # epochs between learning-rate halvings; 0 disables
    decay_factor: float = 0.5
    clip_norm: float | None = 5.0  # global gradient-norm cap; None disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")

    def lr_at(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: SGDState,
    config: SGDConfig,
    lr: float | None = None,
) -> dict[str, Tensor]:
    """One SGD-with-momentum update, in place: ``v = m*v + g; p -= lr*v``.

    With ``config.clip_norm`` set, all gradients are first rescaled together
    so their joint L2 norm does not exceed it.
    """
    lr = config.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    if config.clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if norm > config.clip_norm:
            factor = config.clip_norm / norm
            grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        v = state.velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else config.momentum * v + g
        state.velocity[name] = v
        p.data -= p.dtype.type(lr) * v
    return params
