"""Pair sampling, the training loop and dataset encoding."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .hashing import CodeDatabase
from .losses import LossConfig, PairBatch, example_confidence, loss_terms
from .network import Network, NetworkConfig
from .optim import SGDConfig, SGDState, optimizer_step
from .tensor import NumericError, Tensor, backward, take_rows

log = logging.getLogger(__name__)


def similarity(labels_a, labels_b) -> int:
    """0 when the label sets share a class, 1 otherwise."""
    a = np.asarray(labels_a, dtype=bool)
    b = np.asarray(labels_b, dtype=bool)
    if not a.any() or not b.any():
        raise ValueError("label sets must be non-empty")
    return 0 if (a & b).any() else 1


def pair_similarity(labels: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return np.where((labels[i] & labels[j]).any(axis=1), 0, 1)


def sample_pairs(batch: Sequence[int], labels: np.ndarray, n_pairs: int, rng: np.random.Generator):
    """``n_pairs`` uniform unordered pairs of distinct batch positions.

    Returns ``(i, j, y)`` with ``i < j`` indexing into ``batch`` and ``y`` the
    pair similarity labels.
    """
    n = len(batch)
    if n < 2:
        raise ValueError(f"need at least two examples to form a pair, got {n}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n - 1, n_pairs)
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    batch = np.asarray(batch)
    y = pair_similarity(np.asarray(labels, dtype=bool), batch[lo], batch[hi])
    return lo, hi, y


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    pairs_per_batch: int | None = None  # None -> 2 * batch_size
    seed: int = 0
    optimizer: SGDConfig = field(default_factory=SGDConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dtype: str = "float32"
    flip: bool = False
    checkpoint_dir: str | None = None
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.pairs_per_batch is not None and self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @property
    def n_pairs(self) -> int:
        return self.pairs_per_batch or 2 * self.batch_size

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "pairs_per_batch": self.pairs_per_batch,
            "seed": self.seed,
            "optimizer": vars(self.optimizer).copy(),
            "loss": self.loss.to_dict(),
            "network": self.network.to_dict(),
            "dtype": self.dtype,
            "flip": self.flip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = SGDConfig(**d["optimizer"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepResult:
    total: float
    hard_pairwise: float
    cls: float
    reg: float


class Trainer:
    """Holds a network, its optimizer state and the sampling RNG."""

    def __init__(self, cfg: TrainConfig, net: Network | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.net = net if net is not None else Network(cfg.network, seed=cfg.seed, dtype=self.dtype)
        self.state = SGDState()
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0

    def step(self, images: np.ndarray, labels: np.ndarray, lr: float | None = None,
             batch_index: np.ndarray | None = None) -> StepResult:
        """Forward once, sample pairs, backprop the combined loss, update."""
        cfg = self.cfg
        net = self.net
        labels = np.asarray(labels, dtype=bool)
        i, j, y = sample_pairs(np.arange(len(images)), labels, cfg.n_pairs, self.rng)
        net.zero_grad()
        out = net(Tensor(np.asarray(images, dtype=self.dtype)))
        conf = example_confidence(out.class_probs.data, labels)
        pairs = PairBatch(take_rows(out.binary_like, i), take_rows(out.binary_like, j), y, conf[i], conf[j])
        terms = loss_terms(pairs, out.class_probs, labels, cfg.loss)
        scale = 1.0 / len(pairs)
        loss = terms["total"] * scale
        values = {k: float(v.data) * scale for k, v in terms.items()}
        if not np.isfinite(values["total"]):
            raise NumericError(f"non-finite loss {values} on batch {batch_index if batch_index is not None else '?'}")
        backward(loss, net.parameters())
        grads = {name: p.grad for name, p in net.params.items()}
        optimizer_step(net.params, grads, self.state, cfg.optimizer, lr)
        return StepResult(values["total"], values["hard_pairwise"], values["class"], values["reg"])

    def _batches(self, n: int) -> list[np.ndarray]:
        order = self.rng.permutation(n)
        bs = self.cfg.batch_size
        batches = [order[s : s + bs] for s in range(0, n, bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
        return batches

    def run_epoch(self, ds: LabeledDataset) -> StepResult:
        lr = self.cfg.optimizer.lr_at(self.epoch)
        results = []
        for b in self._batches(len(ds)):
            if len(b) < 2:
                continue
            imgs = ds.images[b]
            if self.cfg.flip:
                flip = self.rng.random(len(b)) < 0.5
                imgs = imgs.copy()
                imgs[flip] = imgs[flip][..., ::-1]
            results.append(self.step(imgs, ds.labels[b], lr, batch_index=b))
        self.epoch += 1
        return StepResult(*(float(np.mean([getattr(r, f) for r in results])) for f in ("total", "hard_pairwise", "cls", "reg")))


def train_step(net: Network, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               trainer: Trainer | None = None) -> tuple[float, Network]:
    trainer = trainer or Trainer(cfg, net)
    res = trainer.step(images, labels)
    return res.total, trainer.net


def train(ds: LabeledDataset, cfg: TrainConfig, net: Network | None = None) -> tuple[Network, list[StepResult]]:
    """Train for ``cfg.epochs`` epochs; returns the network and per-epoch mean losses."""
    if len(ds) == 0:
        raise ValueError("empty training set")
    if ds.num_classes != cfg.network.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, network expects {cfg.network.num_classes}")
    trainer = Trainer(cfg, net)
    history: list[StepResult] = []
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    for epoch in range(cfg.epochs):
        res = trainer.run_epoch(ds)
        history.append(res)
        log.info("epoch %d: loss %.5f (pair %.5f, class %.5f, reg %.5f)",
                 epoch + 1, res.total, res.hard_pairwise, res.cls, res.reg)
        if ckdir and cfg.checkpoint_every_epoch:
            trainer.net.save(ckdir / f"epoch{epoch + 1:03d}.hegh")
    if ckdir:
        trainer.net.save(ckdir / "checkpoint.hegh")
    return trainer.net, history


def loss_log_csv(history: Sequence[StepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_total", "mean_hard_pairwise", "mean_class", "mean_reg"])
    for e, r in enumerate(history, start=1):
        w.writerow([e, f"{r.total:.6g}", f"{r.hard_pairwise:.6g}", f"{r.cls:.6g}", f"{r.reg:.6g}"])
    return buf.getvalue()


def encode_dataset(net: Network, ds: LabeledDataset, batch_size: int = 256) -> CodeDatabase:
    codes, _ = net.predict(ds.images, batch_size)
    return CodeDatabase.from_outputs(codes, ds.labels)
