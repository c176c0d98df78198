"""CNN with stacked CBAM attention and two output heads.

The default layout has eight 3x3 conv stages (``layer1`` .. ``layer8``),
three CBAM blocks after ``layer2`` and residual shortcuts wrapping layers
3, 4, 7 and 8. The pooled features feed a linear binary-like head with
``hash_bits`` outputs and a sigmoid classification head.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .tensor import (
    Tensor,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    dense,
    global_avgpool,
    global_maxpool,
    relu,
    sigmoid,
)


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    channels: int
    stride: int = 1
    kernel: int = 3


def default_layers() -> list[LayerSpec]:
    widths = [32, 32, 64, 64, 128, 128, 128, 128]
    strides = {2: 2, 3: 2, 5: 2}
    return [LayerSpec(f"layer{i}", w, strides.get(i, 1)) for i, w in enumerate(widths, start=1)]


@dataclass
class CbamConfig:
    reduction_ratio: int = 4
    spatial_kernel: int = 7
    stack_count: int = 3
    gate_bias: float = 3.0

    def validate(self, channels: int | None = None) -> None:
        if self.reduction_ratio < 1 or self.stack_count < 1:
            raise ConfigError("reduction_ratio and stack_count must be positive")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd and positive, got {self.spatial_kernel}")
        if channels is not None and channels % self.reduction_ratio:
            raise ConfigError(
                f"reduction_ratio {self.reduction_ratio} does not divide {channels} channels"
            )


@dataclass
class NetworkConfig:
    layers: list[LayerSpec] = field(default_factory=default_layers)
    cbam_after: list[str] = field(default_factory=lambda: ["layer2"])
    cbam: CbamConfig = field(default_factory=CbamConfig)
    shortcut_at: list[str] = field(default_factory=lambda: ["layer3", "layer4", "layer7", "layer8"])
    hash_bits: int = 12
    num_classes: int = 10
    image_size: int = 32
    in_channels: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cbam_after"] = list(self.cbam_after)
        d["shortcut_at"] = sorted(self.shortcut_at, key=self._layer_order)
        return d

    def _layer_order(self, name: str) -> int:
        names = [l.name for l in self.layers]
        return names.index(name) if name in names else len(names)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "layers" in d:
            d["layers"] = [LayerSpec(**l) if isinstance(l, dict) else l for l in d["layers"]]
        if isinstance(d.get("cbam_after"), str):
            d["cbam_after"] = [d["cbam_after"]]
        if "cbam" in d and isinstance(d["cbam"], dict):
            d["cbam"] = CbamConfig(**d["cbam"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


def ablation_variants() -> dict[str, NetworkConfig]:
    """The 13 architecture variants covered by the placement, stacking and
    shortcut-removal ablations. Placement variants use a single CBAM block;
    shortcut removals start from the final architecture."""
    variants: dict[str, NetworkConfig] = {}
    for where in (["layer2"], ["layer4"], ["layer8"], ["layer2", "layer4"], ["layer4", "layer8"],
                  ["layer2", "layer4", "layer8"]):
        cfg = NetworkConfig(cbam_after=where, cbam=CbamConfig(stack_count=1))
        variants["place:" + "+".join(where)] = cfg
    for stacks in (2, 3, 4):
        variants[f"stack:{stacks}"] = NetworkConfig(cbam=CbamConfig(stack_count=stacks))
    for removed in ("layer3", "layer4", "layer7", "layer8"):
        cfg = NetworkConfig()
        cfg.shortcut_at = [s for s in cfg.shortcut_at if s != removed]
        variants[f"no-shortcut:{removed}"] = cfg
    return variants


def _conv_out(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ------------------------------------------------------------------ attention


def channel_attention(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Per-channel weights in (0, 1), shape B×C×1×1.

    A shared two-layer MLP (C -> C/r -> C) is applied to the spatial max and
    mean descriptors; their sum goes through a sigmoid.
    """
    b, c = x.shape[:2]

    def mlp(v: Tensor) -> Tensor:
        return dense(relu(dense(v.reshape(b, c), w1, b1)), w2, b2)

    att = sigmoid(mlp(global_maxpool(x)) + mlp(global_avgpool(x)))
    return att.reshape(b, c, 1, 1)


def spatial_attention(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-position weights in (0, 1), shape B×1×H×W."""
    k = w.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"spatial kernel must be odd, got {k}")
    pooled = concat_channels([channel_max(x), channel_mean(x)])
    return sigmoid(conv2d(pooled, w, bias, stride=1, padding=k // 2))


class CbamBlock:
    def __init__(self, channels: int, cfg: CbamConfig, rng: np.random.Generator, dtype=np.float32, prefix="cbam"):
        cfg.validate(channels)
        hidden = channels // cfg.reduction_ratio
        k = cfg.spatial_kernel
        self.prefix = prefix
        self.params = {
            f"{prefix}.mlp1.w": Tensor(_kaiming(rng, (channels, hidden), channels, dtype), True),
            f"{prefix}.mlp1.b": Tensor(np.zeros(hidden, dtype), True),
            f"{prefix}.mlp2.w": Tensor(np.zeros((hidden, channels), dtype), True),
            f"{prefix}.mlp2.b": Tensor(np.full(channels, cfg.gate_bias / 2, dtype), True),
            f"{prefix}.spatial.w": Tensor(np.zeros((1, 2, k, k), dtype), True),
            f"{prefix}.spatial.b": Tensor(np.full(1, cfg.gate_bias, dtype), True),
        }

    def _p(self, key: str) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def channel(self, x: Tensor) -> Tensor:
        return channel_attention(x, self._p("mlp1.w"), self._p("mlp1.b"), self._p("mlp2.w"), self._p("mlp2.b"))

    def spatial(self, x: Tensor) -> Tensor:
        return spatial_attention(x, self._p("spatial.w"), self._p("spatial.b"))

    def __call__(self, x: Tensor, hook=None) -> Tensor:
        mc = self.channel(x)
        x = mc * x
        ms = self.spatial(x)
        if hook is not None:
            hook(mc.data, ms.data)
        return ms * x


def cbam_block(features: Tensor, block: CbamBlock) -> Tensor:
    return block(features)


# -------------------------------------------------------------------- network


@dataclass
class NetworkOutput:
    binary_like: Tensor  # B×k, unbounded
    class_probs: Tensor  # B×N_c, in (0, 1)


class Network:
    """Parameters plus forward pass for a :class:`NetworkConfig`.

    Shape problems (too many downsamplings, reduction ratios that do not
    divide the channel count, shortcut names that are not layers) are raised
    here as :class:`ConfigError`, never at forward time.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config = copy.deepcopy(config) if config is not None else NetworkConfig()
        self.dtype = np.dtype(dtype)
        self._validate()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.blocks: dict[str, list[CbamBlock]] = {}
        channels = config.in_channels
        size = config.image_size
        for spec in config.layers:
            fan_in = channels * spec.kernel * spec.kernel
            self._add(f"{spec.name}.w", _kaiming(rng, (spec.channels, channels, spec.kernel, spec.kernel), fan_in, dtype))
            self._add(f"{spec.name}.b", np.zeros(spec.channels, dtype))
            new_size = _conv_out(size, spec.kernel, spec.stride)
            if spec.name in config.shortcut_at and (channels != spec.channels or spec.stride != 1):
                self._add(f"{spec.name}.proj.w", _kaiming(rng, (spec.channels, channels, 1, 1), channels, dtype))
                self._add(f"{spec.name}.proj.b", np.zeros(spec.channels, dtype))
            channels, size = spec.channels, new_size
            if spec.name in config.cbam_after:
                stack = []
                for s in range(config.cbam.stack_count):
                    block = CbamBlock(channels, config.cbam, rng, dtype, prefix=f"{spec.name}.cbam{s}")
                    self.params.update(block.params)
                    block.params = self.params  # look up through the network so rebinding reaches the block
                    stack.append(block)
                self.blocks[spec.name] = stack
        self._add("hash.w", _kaiming(rng, (channels, config.hash_bits), channels, dtype))
        self._add("hash.b", np.zeros(config.hash_bits, dtype))
        self._add("cls.w", _kaiming(rng, (channels, config.num_classes), channels, dtype))
        self._add("cls.b", np.zeros(config.num_classes, dtype))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _validate(self) -> None:
        cfg = self.config
        if cfg.hash_bits < 1 or cfg.num_classes < 1:
            raise ConfigError("hash_bits and num_classes must be positive")
        names = [l.name for l in cfg.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        for ref in list(cfg.cbam_after) + list(cfg.shortcut_at):
            if ref not in names:
                raise ConfigError(f"unknown layer {ref!r}; layers are {names}")
        cfg.cbam.validate()
        size = cfg.image_size
        if size < 1:
            raise ConfigError("image_size must be positive")
        channels = cfg.in_channels
        for spec in cfg.layers:
            if spec.kernel % 2 == 0 or spec.kernel < 1 or spec.stride < 1 or spec.channels < 1:
                raise ConfigError(f"invalid layer {spec}")
            if spec.stride > 1 and size < 2:
                raise ConfigError(f"{spec.name}: cannot downsample a {size}x{size} map; too many stride-2 layers")
            size = _conv_out(size, spec.kernel, spec.stride)
            channels = spec.channels
            if spec.name in cfg.cbam_after:
                cfg.cbam.validate(channels)

    # parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def bind(self, tensors: dict[str, Tensor]) -> None:
        """Swap in replacement parameter tensors by name (used for gradient checks)."""
        unknown = set(tensors) - set(self.params)
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)}")
        self.params.update(tensors)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"{k}: stored shape {v.shape} != expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path: str | Path, config: NetworkConfig, dtype=np.float32) -> "Network":
        net = cls(config, dtype=dtype)
        net.load_state_dict(checkpoint.load(path))
        return net

    # forward ------------------------------------------------------------

    def features(self, images: Tensor, attention_hook=None) -> Tensor:
        x = images
        cfg = self.config
        for spec in cfg.layers:
            p = self.params
            y = relu(conv2d(x, p[f"{spec.name}.w"], p[f"{spec.name}.b"], stride=spec.stride, padding=spec.kernel // 2))
            if spec.name in cfg.shortcut_at:
                proj = f"{spec.name}.proj.w"
                if proj in p:
                    shortcut = conv2d(x, p[proj], p[f"{spec.name}.proj.b"], stride=spec.stride)
                else:
                    shortcut = x
                y = y + shortcut
            for block in self.blocks.get(spec.name, ()):
                y = block(y, attention_hook)
            x = y
        return x

    def forward(self, images) -> NetworkOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.config
        if images.data.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ValueError(f"expected B×{cfg.in_channels}×H×W images, got {images.shape}")
        feats = self.features(images)
        b, c = feats.shape[:2]
        pooled = global_avgpool(feats).reshape(b, c)
        p = self.params
        codes = dense(pooled, p["hash.w"], p["hash.b"])
        probs = sigmoid(dense(pooled, p["cls.w"], p["cls.b"]))
        return NetworkOutput(codes, probs)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Forward without recording; returns ``(binary_like, class_probs)`` arrays."""
        was = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            codes, probs = [], []
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start : start + batch_size])
                codes.append(out.binary_like.data)
                probs.append(out.class_probs.data)
        finally:
            for p, r in zip(self.params.values(), was):
                p.requires_grad = r
        k, nc = self.config.hash_bits, self.config.num_classes
        if not codes:
            return np.zeros((0, k), self.dtype), np.zeros((0, nc), self.dtype)
        return np.concatenate(codes), np.concatenate(probs)


def network_forward(images, net: Network) -> NetworkOutput:
    return net.forward(images)


def all_attention_maps(net: Network, images) -> list[np.ndarray]:
    """Every channel and spatial attention map computed on ``images``."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=net.dtype))
    maps: list[np.ndarray] = []
    net.features(images, attention_hook=lambda mc, ms: maps.extend((mc, ms)))
    return maps
