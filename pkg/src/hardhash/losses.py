"""Training objectives: contrastive pair loss, confidence-weighted pair loss,
squared-error classification loss and the L1 quantization penalty.

All loss functions accept tensors (or arrays, promoted to constants) and
return scalar :class:`~hardhash.tensor.Tensor` values so they can be
backpropagated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, maximum


@dataclass
class LossConfig:
    margin: float | None = None  # None -> 2 * hash_bits
    gamma: float = 1.0
    lam: float = 0.01
    mu: float = 1.0

    def __post_init__(self):
        if self.margin is not None and self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.gamma < 0 or self.lam < 0 or self.mu < 0:
            raise ValueError("gamma, lambda and mu must be non-negative")

    def margin_for(self, hash_bits: int) -> float:
        return 2.0 * hash_bits if self.margin is None else float(self.margin)

    def to_dict(self) -> dict:
        d = {"gamma": self.gamma, "lambda": self.lam, "mu": self.mu}
        if self.margin is not None:
            d["margin"] = self.margin
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {"gamma", "lambda", "mu", "margin"}
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(margin=d.get("margin"), gamma=d.get("gamma", 1.0), lam=d.get("lambda", 0.01), mu=d.get("mu", 1.0))


@dataclass
class PairBatch:
    """Codes and labels of ``n`` sampled pairs.

    ``conf1``/``conf2`` are each example's classifier confidence on its own
    ground-truth label(s); they only enter the loss as constant weights.
    """

    b1: Tensor  # n×k
    b2: Tensor  # n×k
    y: np.ndarray  # n, 0 similar / 1 dissimilar
    conf1: np.ndarray
    conf2: np.ndarray

    def __post_init__(self):
        self.b1 = as_tensor(self.b1)
        self.b2 = as_tensor(self.b2)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.conf1 = np.asarray(self.conf1, dtype=np.float64).reshape(-1)
        self.conf2 = np.asarray(self.conf2, dtype=np.float64).reshape(-1)
        if self.b1.shape != self.b2.shape or self.b1.data.ndim != 2:
            raise ValueError(f"pair codes must be matching n×k arrays, got {self.b1.shape} and {self.b2.shape}")
        n = self.b1.shape[0]
        if not (len(self.y) == len(self.conf1) == len(self.conf2) == n):
            raise ValueError("pair labels and confidences must have one entry per pair")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise ValueError("pair labels must be 0 (similar) or 1 (dissimilar)")

    def __len__(self) -> int:
        return self.b1.shape[0]


def _rows(x) -> Tensor:
    t = as_tensor(x)
    return t.reshape(1, t.shape[0]) if t.data.ndim == 1 else t


def _pair_terms(b1: Tensor, b2: Tensor, y: np.ndarray, margin: float) -> Tensor:
    """Per-pair contrastive loss, shape (n,)."""
    d = b1 - b2
    dist2 = (d * d).sum(axis=1)
    y = np.asarray(y, dtype=dist2.dtype).reshape(dist2.shape)
    similar = dist2 * Tensor(0.5 * (1.0 - y))
    dissimilar = maximum(margin - dist2, 0.0) * Tensor(0.5 * y)
    return similar + dissimilar


def pairwise_loss(b1, b2, y, margin: float) -> Tensor:
    """``0.5*(1-Y)*|b1-b2|^2 + 0.5*Y*max(margin - |b1-b2|^2, 0)``, summed over pairs."""
    b1, b2 = _rows(b1), _rows(b2)
    if b1.shape != b2.shape:
        raise ValueError(f"code length mismatch: {b1.shape} vs {b2.shape}")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("Y must be 0 (similar) or 1 (dissimilar)")
    return _pair_terms(b1, b2, y, margin).sum()


def classification_loss(probs, labels) -> Tensor:
    """Sum of squared errors between predicted probabilities and 0/1 labels."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=probs.dtype)
    if labels.shape != probs.shape:
        raise ValueError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("label entries must be 0 or 1")
    diff = probs - Tensor(labels)
    return (diff * diff).sum()


def hard_degree(p, y):
    """Confidence ``p`` for dissimilar pairs (Y=1), ``1 - p`` for similar ones."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("confidence must lie in [0, 1]")
    out = np.where(y == 1, p, 1.0 - p)
    return float(out) if out.ndim == 0 else out


def pair_weights(pairs: PairBatch, gamma: float) -> np.ndarray:
    w = hard_degree(pairs.conf1, pairs.y) * hard_degree(pairs.conf2, pairs.y)
    return np.power(w, gamma)  # 0**0 == 1, so gamma=0 gives unit weights


def hard_pairwise_loss(pairs: PairBatch, cfg: LossConfig, margin: float | None = None) -> Tensor:
    if len(pairs) == 0:
        raise ValueError("hard_pairwise_loss needs at least one pair")
    margin = cfg.margin_for(pairs.b1.shape[1]) if margin is None else margin
    w = pair_weights(pairs, cfg.gamma).astype(pairs.b1.dtype)
    terms = _pair_terms(pairs.b1, pairs.b2, pairs.y, margin)
    return (terms * Tensor(w)).sum()


def quantization_regularizer(b, lam: float) -> Tensor:
    """``lam * sum_j | |b_j| - 1 |``; zero exactly when every entry is +-1."""
    b = as_tensor(b)
    return (b.abs() - 1.0).abs().sum() * lam


def loss_terms(pairs: PairBatch, probs, labels, cfg: LossConfig) -> dict[str, Tensor]:
    hard = hard_pairwise_loss(pairs, cfg)
    reg = quantization_regularizer(pairs.b1, cfg.lam) + quantization_regularizer(pairs.b2, cfg.lam)
    cls = classification_loss(probs, labels)
    return {"hard_pairwise": hard, "reg": reg, "class": cls, "total": hard + reg + cls * cfg.mu}


def total_loss(pairs: PairBatch, probs, labels, cfg: LossConfig) -> Tensor:
    return loss_terms(pairs, probs, labels, cfg)["total"]


def example_confidence(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean predicted probability over each example's ground-truth labels."""
    labels = np.asarray(labels, dtype=bool)
    counts = labels.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every example needs at least one label")
    return (np.asarray(probs, dtype=np.float64) * labels).sum(axis=1) / counts
