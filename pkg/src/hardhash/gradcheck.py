"""Finite-difference checks of every differentiable piece of the toolkit.

Each :class:`Case` builds a scalar from a list of float64 leaves and knows
how to draw a random point. :func:`run_scope` checks every case of a scope
at ``points`` random points and reports the worst relative error per case.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import (
    LossConfig,
    PairBatch,
    classification_loss,
    hard_pairwise_loss,
    pairwise_loss,
    quantization_regularizer,
    total_loss,
)
from .network import CbamBlock, CbamConfig, LayerSpec, Network, NetworkConfig, channel_attention, spatial_attention
from .tensor import (
    Tensor,
    avgpool2d,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    dense,
    global_avgpool,
    global_maxpool,
    grad_check,
    maxpool2d,
    maximum,
    relu,
    sigmoid,
    take_rows,
)

SCOPES = ("primitives", "network", "loss")


@dataclass
class Case:
    name: str
    build: Callable[[list[Tensor]], Tensor]
    sample: Callable[[np.random.Generator], list[np.ndarray]]
    max_entries: int | None = None


def _normal(*shapes):
    return lambda rng: [rng.standard_normal(s) for s in shapes]


def _probe(shape, seed):
    """Fixed random weights turning a tensor output into a generic scalar."""
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def primitive_cases() -> list[Case]:
    P = _probe
    return [
        Case("conv2d", lambda t: (conv2d(t[0], t[1], t[2], stride=2, padding=1) * P((2, 4, 3, 3), 1)).sum(),
             _normal((2, 3, 5, 5), (4, 3, 3, 3), (4,))),
        Case("maxpool2d", lambda t: (maxpool2d(t[0], 2, 2) * P((2, 2, 2, 2), 2)).sum(), _normal((2, 2, 4, 4))),
        Case("avgpool2d", lambda t: (avgpool2d(t[0], 2, 2) * P((2, 2, 2, 2), 3)).sum(), _normal((2, 2, 4, 4))),
        Case("global_maxpool", lambda t: (global_maxpool(t[0]) * P((2, 3, 1, 1), 4)).sum(), _normal((2, 3, 3, 3))),
        Case("global_avgpool", lambda t: (global_avgpool(t[0]) * P((2, 3, 1, 1), 5)).sum(), _normal((2, 3, 3, 3))),
        Case("channel_max", lambda t: (channel_max(t[0]) * P((2, 1, 3, 3), 6)).sum(), _normal((2, 4, 3, 3))),
        Case("channel_mean", lambda t: (channel_mean(t[0]) * P((2, 1, 3, 3), 7)).sum(), _normal((2, 4, 3, 3))),
        Case("dense", lambda t: (dense(t[0], t[1], t[2]) * P((3, 2), 8)).sum(), _normal((3, 4), (4, 2), (2,))),
        Case("relu", lambda t: (relu(t[0]) * P((3, 4), 9)).sum(), _normal((3, 4))),
        Case("sigmoid", lambda t: (sigmoid(t[0]) * P((3, 4), 10)).sum(), _normal((3, 4))),
        Case("elementwise_add", lambda t: ((t[0] + t[1]) * P((2, 3, 4, 4), 11)).sum(),
             _normal((2, 3, 4, 4), (1, 3, 1, 1))),
        Case("elementwise_mul", lambda t: ((t[0] * t[1]) * P((2, 3, 4, 4), 12)).sum(),
             _normal((2, 3, 4, 4), (2, 1, 4, 4))),
        Case("channel_concat", lambda t: (concat_channels([t[0], t[1]]) * P((2, 3, 3, 3), 13)).sum(),
             _normal((2, 1, 3, 3), (2, 2, 3, 3))),
        Case("sum", lambda t: (t[0].sum(axis=1) * P((3,), 14)).sum(), _normal((3, 4))),
        Case("mean", lambda t: t[0].mean() * t[0].mean(), _normal((3, 4))),
        Case("abs", lambda t: (t[0].abs() * P((3, 4), 15)).sum(), _normal((3, 4))),
        Case("max_const", lambda t: (maximum(t[0], 0.3) * P((3, 4), 16)).sum(), _normal((3, 4))),
        Case("power", lambda t: ((t[0] * t[0] + 1.0) ** 1.5).sum(), _normal((3, 4))),
        Case("scale_shift", lambda t: ((t[0] * 2.5 - 1.0) * P((3, 4), 17)).sum(), _normal((3, 4))),
        Case("reshape", lambda t: (t[0].reshape(4, 3) * P((4, 3), 18)).sum(), _normal((3, 4))),
        Case("take_rows", lambda t: (take_rows(t[0], [0, 2, 2, 1]) * P((4, 4), 19)).sum(), _normal((3, 4))),
    ]


def small_network_config() -> NetworkConfig:
    """The default topology (8 convs, stacked CBAM after layer2, four shortcuts) at reduced width."""
    widths = [4, 4, 8, 8, 8, 8, 8, 8]
    layers = [LayerSpec(f"layer{i + 1}", w, 2 if i + 1 in (2, 3, 5) else 1) for i, w in enumerate(widths)]
    return NetworkConfig(layers=layers, cbam=CbamConfig(reduction_ratio=2, spatial_kernel=3, stack_count=2),
                         hash_bits=6, num_classes=3, image_size=16)


def _network_leaves(cfg: NetworkConfig, images_shape):
    names = list(Network(cfg, dtype=np.float64).params)

    def sample(rng):
        base = Network(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
        # perturb everything so zero-initialised gates carry gradient
        params = [p.data + 0.1 * rng.standard_normal(p.shape) for p in base.params.values()]
        return [rng.random(images_shape)] + params

    return names, sample


def network_cases() -> list[Case]:
    cb = CbamConfig(reduction_ratio=2, spatial_kernel=3)
    block = CbamBlock(4, cb, np.random.default_rng(0), np.float64)
    block_names = list(block.params)

    def run_block(t):
        block.params = dict(zip(block_names, t[1:]))
        return (block(t[0]) * _probe((2, 4, 5, 5), 20)).sum()

    block_shapes = [(2, 4, 5, 5)] + [p.shape for p in block.params.values()]

    cfg = small_network_config()
    net = Network(cfg, dtype=np.float64)
    names, sample = _network_leaves(cfg, (2, 3, 16, 16))

    def run_net(t):
        net.bind(dict(zip(names, t[1:])))
        out = net(t[0])
        return (out.binary_like * _probe((2, 6), 21)).sum() + (out.class_probs * _probe((2, 3), 22)).sum()

    return [
        Case("channel_attention", lambda t: (channel_attention(*t) * _probe((2, 4, 1, 1), 23)).sum(),
             _normal((2, 4, 3, 3), (4, 2), (2,), (2, 4), (4,))),
        Case("spatial_attention", lambda t: (spatial_attention(*t) * _probe((2, 1, 4, 4), 24)).sum(),
             _normal((2, 3, 4, 4), (1, 2, 3, 3), (1,))),
        Case("cbam_block", run_block, _normal(*block_shapes)),
        Case("network", run_net, sample, max_entries=3),
    ]


def loss_cases() -> list[Case]:
    y = np.array([0, 1, 1, 0, 1, 0])
    labels = np.eye(3, dtype=bool)[[0, 1, 2, 0, 1, 1, 2]]
    conf_rng = np.random.default_rng(30)
    conf = conf_rng.random(6), conf_rng.random(6)
    cfg = LossConfig(gamma=1.0, lam=0.05, mu=1.0, margin=8.0)

    def codes_and_probs(rng):
        return [rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), rng.random((7, 3))]

    net_cfg = small_network_config()
    net = Network(net_cfg, dtype=np.float64)
    names, sample = _network_leaves(net_cfg, (4, 3, 16, 16))
    batch_labels = np.eye(3, dtype=bool)[[0, 1, 1, 2]]
    lo, hi = np.array([0, 0, 1, 2, 1]), np.array([1, 2, 2, 3, 3])
    pair_y = (~(batch_labels[lo] & batch_labels[hi]).any(axis=1)).astype(int)

    frozen = {}

    def sample_with_confidence(rng):
        # the pair weights are constants for backprop, so finite differences
        # must hold them at the value taken at the unperturbed point
        point = sample(rng)
        net.bind({n: Tensor(a) for n, a in zip(names, point[1:])})
        probs = net(Tensor(point[0])).class_probs.data
        frozen["c"] = (probs * batch_labels).sum(axis=1)
        return point

    def end_to_end(t):
        net.bind(dict(zip(names, t[1:])))
        out = net(t[0])
        c = frozen["c"]
        pairs = PairBatch(take_rows(out.binary_like, lo), take_rows(out.binary_like, hi), pair_y, c[lo], c[hi])
        return total_loss(pairs, out.class_probs, batch_labels, LossConfig(lam=0.05, margin=12.0))

    return [
        Case("pairwise", lambda t: pairwise_loss(t[0], t[1], y, 8.0), codes_and_probs),
        Case("classification", lambda t: classification_loss(t[2], labels), codes_and_probs),
        Case("quantization", lambda t: quantization_regularizer(t[0], 0.05), codes_and_probs),
        Case("hard_pairwise", lambda t: hard_pairwise_loss(PairBatch(t[0], t[1], y, *conf), cfg), codes_and_probs),
        Case("total", lambda t: total_loss(PairBatch(t[0], t[1], y, *conf), t[2], labels, cfg), codes_and_probs),
        Case("total_through_network", end_to_end, sample_with_confidence, max_entries=3),
    ]


_SCOPE_CASES = {"primitives": primitive_cases, "network": network_cases, "loss": loss_cases}


def cases(scope: str) -> list[Case]:
    if scope not in _SCOPE_CASES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    return _SCOPE_CASES[scope]()


def run_case(case: Case, points: int = 20, epsilon: float = 1e-5, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, zlib.crc32(case.name.encode())])
    worst = 0.0
    for _ in range(points):
        err = grad_check(case.build, case.sample(rng), epsilon, max_entries=case.max_entries, rng=rng,
                         resample=lambda: case.sample(rng))
        worst = max(worst, err)
    return worst


def run_scope(scope: str, points: int = 20, epsilon: float = 1e-5, seed: int = 0) -> dict[str, float]:
    return {c.name: run_case(c, points, epsilon, seed) for c in cases(scope)}
