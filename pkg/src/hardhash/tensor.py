"""Dense tensors with a reverse-mode tape.

Every primitive is registered in ``_REGISTRY`` as a pair of functions:
``forward(*arrays, **attrs) -> (out, cache)`` and
``backward(cache, grad) -> tuple of input grads`` (``None`` for inputs that
receive no gradient). :func:`apply` is the single entry point; the methods on
:class:`Tensor` and the functional helpers below are sugar over it.
"""

from __future__ import annotations

import enum
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class KinkError(NumericError):
    """A non-differentiable point was hit while gradient checking."""


class OpKind(str, enum.Enum):
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    AVGPOOL2D = "avgpool2d"
    GLOBAL_MAXPOOL = "global_maxpool"
    GLOBAL_AVGPOOL = "global_avgpool"
    CHANNEL_MAX = "channel_max"
    CHANNEL_MEAN = "channel_mean"
    DENSE = "dense"
    RELU = "relu"
    SIGMOID = "sigmoid"
    ADD = "elementwise_add"
    MUL = "elementwise_mul"
    CONCAT = "channel_concat"
    SUM = "sum"
    MEAN = "mean"
    ABS = "abs"
    MAX_CONST = "max_const"
    POWER = "power"
    SCALE = "scale"
    SHIFT = "shift"
    RESHAPE = "reshape"
    TAKE_ROWS = "take_rows"


_REGISTRY: dict[OpKind, tuple[Callable, Callable]] = {}

# Set by grad_check; kinked ops report their distance to a kink through it.
_kink_guard = threading.local()


def _register(kind: OpKind):
    def deco(pair_fn):
        fwd, bwd = pair_fn()
        _REGISTRY[kind] = (fwd, bwd)
        return pair_fn

    return deco


def _report_kink(distance: float) -> None:
    margin = getattr(_kink_guard, "margin", None)
    if margin is not None and distance < margin:
        raise KinkError(f"point lies within {distance:.3g} of a kink (margin {margin:.3g})")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._node = None  # (kind, backward fn, cache) for recorded results

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return apply(OpKind.ADD, [self, other])
        return apply(OpKind.SHIFT, [self], value=float(other))

    __radd__ = __add__

    def __neg__(self):
        return apply(OpKind.SCALE, [self], value=-1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return apply(OpKind.ADD, [self, -other])
        return apply(OpKind.SHIFT, [self], value=-float(other))

    def __rsub__(self, other):
        return apply(OpKind.SHIFT, [-self], value=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply(OpKind.MUL, [self, other])
        return apply(OpKind.SCALE, [self], value=float(other))

    __rmul__ = __mul__

    def __pow__(self, exponent):
        return apply(OpKind.POWER, [self], exponent=float(exponent))

    def sum(self, axis=None):
        return apply(OpKind.SUM, [self], axis=axis)

    def mean(self, axis=None):
        return apply(OpKind.MEAN, [self], axis=axis)

    def abs(self):
        return apply(OpKind.ABS, [self])

    def relu(self):
        return apply(OpKind.RELU, [self])

    def sigmoid(self):
        return apply(OpKind.SIGMOID, [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply(OpKind.RESHAPE, [self], shape=shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def apply(kind: OpKind | str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``kind`` forward and record it on the tape when needed."""
    kind = OpKind(kind)
    try:
        fwd, bwd = _REGISTRY[kind]
    except KeyError:  # pragma: no cover - every OpKind is registered below
        raise NotImplementedError(kind)
    inputs = [as_tensor(t) for t in inputs]
    out, cache = fwd(*(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind.value} produced non-finite values")
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._parents = tuple(inputs)
        result._node = (kind, bwd, cache)
    return result


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from scalar ``loss``; leaf grads accumulate into ``.grad``.

    Returns a map from every reachable leaf (or, when given, every tensor in
    ``params``) to its gradient. Requested tensors the loss does not depend on
    get a zero gradient. The tape is consumed: a second call raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node == "consumed":
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if node._node is None or node._node == "consumed":
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                    leaves[id(node)] = node
                continue
            _, bwd, cache = node._node
            if g is not None:
                in_grads = bwd(cache, g)
                for parent, pg in zip(node._parents, in_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._node = "consumed"
            node._parents = ()
    loss._node = "consumed"
    if params is None:
        return {t: t.grad for t in leaves.values()}
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(kind: OpKind, a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{kind.value}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- convolution


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """B×C×H×W -> B×C×Ho×Wo×kh×kw view."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


@_register(OpKind.CONV2D)
def _conv2d():
    def fwd(x, w, b=None, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
        kh, kw = w.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
        cols = _windows(xp, kh, kw, stride)
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B×Ho×Wo×O
        if b is not None:
            out += b
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return out, (x.shape, xp.shape, cols, w, stride, padding, b is not None)

    def bwd(cache, g):
        x_shape, xp_shape, cols, w, stride, padding, has_bias = cache
        kh, kw = w.shape[2:]
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O×C×kh×kw
        gcols = np.tensordot(g, w, axes=([1], [0]))  # B×Ho×Wo×C×kh×kw
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        ho, wo = g.shape[2:]
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + x_shape[2], padding : padding + x_shape[3]] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if has_bias else None
        return gx, gw, gb

    return fwd, bwd


# -------------------------------------------------------------------- pooling


def _pool_out(kind: OpKind, x: np.ndarray, window: int, stride: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{kind.value}: expected B×C×H×W input, got {x.shape}")
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeError(f"{kind.value}: window {window} larger than input {x.shape}")


def _top2_gap(flat: np.ndarray) -> float:
    """Smallest non-zero gap between the two largest entries along the last axis."""
    if flat.shape[-1] < 2:
        return np.inf
    part = -np.partition(-flat, 1, axis=-1)[..., :2]
    gap = part[..., 0] - part[..., 1]
    # Exact ties only come from saturated relus whose upstream gradient is already zero.
    gap = gap[gap > 0]
    return float(gap.min()) if gap.size else np.inf


@_register(OpKind.MAXPOOL2D)
def _maxpool2d():
    def fwd(x, window=2, stride=2):
        _pool_out(OpKind.MAXPOOL2D, x, window, stride)
        win = _windows(x, window, window, stride)
        b, c, ho, wo = win.shape[:4]
        flat = win.reshape(b, c, ho, wo, window * window)
        if getattr(_kink_guard, "margin", None) is not None:
            _report_kink(_top2_gap(flat))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg, window, stride)

    def bwd(cache, g):
        x_shape, arg, window, stride = cache
        gx = np.zeros(x_shape, dtype=g.dtype)
        b, c, ho, wo = g.shape
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return fwd, bwd


@_register(OpKind.AVGPOOL2D)
def _avgpool2d():
    def fwd(x, window=2, stride=2):
        _pool_out(OpKind.AVGPOOL2D, x, window, stride)
        out = _windows(x, window, window, stride).mean(axis=(4, 5))
        return out, (x.shape, window, stride)

    def bwd(cache, g):
        x_shape, window, stride = cache
        gx = np.zeros(x_shape, dtype=g.dtype)
        ho, wo = g.shape[2:]
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        return (gx,)

    return fwd, bwd


def _check4(kind, x):
    if x.ndim != 4:
        raise ShapeError(f"{kind.value}: expected B×C×H×W input, got {x.shape}")


def _max_over(kind: OpKind, axes: tuple[int, ...]):
    def fwd(x):
        _check4(kind, x)
        if getattr(_kink_guard, "margin", None) is not None:
            moved = np.moveaxis(x, axes, tuple(range(4 - len(axes), 4)))
            _report_kink(_top2_gap(moved.reshape(moved.shape[: 4 - len(axes)] + (-1,))))
        out = x.max(axis=axes, keepdims=True)
        mask = x == out
        # first maximal entry wins on exact ties
        flat = np.moveaxis(mask, axes, tuple(range(4 - len(axes), 4)))
        fshape = flat.shape
        flat = flat.reshape(fshape[: 4 - len(axes)] + (-1,))
        first = np.zeros_like(flat)
        np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
        first = np.moveaxis(first.reshape(fshape), tuple(range(4 - len(axes), 4)), axes)
        return out, first

    def bwd(mask, g):
        return (mask * g,)

    return fwd, bwd


def _mean_over(kind: OpKind, axes: tuple[int, ...]):
    def fwd(x):
        _check4(kind, x)
        count = int(np.prod([x.shape[a] for a in axes]))
        return x.mean(axis=axes, keepdims=True), (x.shape, count)

    def bwd(cache, g):
        shape, count = cache
        return (np.broadcast_to(g / count, shape).copy(),)

    return fwd, bwd


_REGISTRY[OpKind.GLOBAL_MAXPOOL] = _max_over(OpKind.GLOBAL_MAXPOOL, (2, 3))
_REGISTRY[OpKind.GLOBAL_AVGPOOL] = _mean_over(OpKind.GLOBAL_AVGPOOL, (2, 3))
_REGISTRY[OpKind.CHANNEL_MAX] = _max_over(OpKind.CHANNEL_MAX, (1,))
_REGISTRY[OpKind.CHANNEL_MEAN] = _mean_over(OpKind.CHANNEL_MEAN, (1,))


# ---------------------------------------------------------------- dense & co


@_register(OpKind.DENSE)
def _dense():
    def fwd(x, w, b=None):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} incompatible with weight {w.shape}")
        out = x @ w
        if b is not None:
            out = out + b
        return out, (x, w, b is not None)

    def bwd(cache, g):
        x, w, has_bias = cache
        return g @ w.T, x.T @ g, (g.sum(axis=0) if has_bias else None)

    return fwd, bwd


@_register(OpKind.RELU)
def _relu():
    def fwd(x):
        if getattr(_kink_guard, "margin", None) is not None and x.size:
            _report_kink(float(np.abs(x).min()))
        mask = x > 0
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask

    def bwd(mask, g):
        return (g * mask,)

    return fwd, bwd


@_register(OpKind.SIGMOID)
def _sigmoid():
    def fwd(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        # saturation would otherwise round to exactly 0 or 1
        info = np.finfo(out.dtype)
        np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
        return out, out

    def bwd(out, g):
        return (g * out * (1.0 - out),)

    return fwd, bwd


@_register(OpKind.ADD)
def _add():
    def fwd(a, b):
        _check_broadcast(OpKind.ADD, a, b)
        return a + b, (a.shape, b.shape)

    def bwd(cache, g):
        sa, sb = cache
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return fwd, bwd


@_register(OpKind.MUL)
def _mul():
    def fwd(a, b):
        _check_broadcast(OpKind.MUL, a, b)
        return a * b, (a, b)

    def bwd(cache, g):
        a, b = cache
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_register(OpKind.CONCAT)
def _concat():
    def fwd(*xs):
        lead = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(lead) or x.shape[:1] != lead[:1] or x.shape[2:] != lead[2:]:
                raise ShapeError(f"channel_concat: incompatible shapes {lead} and {x.shape}")
        sizes = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1), np.cumsum(sizes)[:-1]

    def bwd(splits, g):
        return tuple(np.split(g, splits, axis=1))

    return fwd, bwd


@_register(OpKind.SUM)
def _sum():
    def fwd(x, axis=None):
        return np.asarray(x.sum(axis=axis)), (x.shape, axis)

    def bwd(cache, g):
        shape, axis = cache
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return fwd, bwd


@_register(OpKind.MEAN)
def _mean():
    def fwd(x, axis=None):
        count = x.size if axis is None else int(np.prod(np.take(x.shape, np.atleast_1d(axis))))
        return np.asarray(x.mean(axis=axis)), (x.shape, axis, count)

    def bwd(cache, g):
        shape, axis, count = cache
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return fwd, bwd


@_register(OpKind.ABS)
def _abs():
    def fwd(x):
        if getattr(_kink_guard, "margin", None) is not None and x.size:
            _report_kink(float(np.abs(x).min()))
        return np.abs(x), np.sign(x)

    def bwd(sign, g):
        return (g * sign,)

    return fwd, bwd


@_register(OpKind.MAX_CONST)
def _max_const():
    def fwd(x, value=0.0):
        if getattr(_kink_guard, "margin", None) is not None and x.size:
            _report_kink(float(np.abs(x - value).min()))
        mask = x > value
        return np.where(mask, x, value).astype(x.dtype, copy=False), mask

    def bwd(mask, g):
        return (g * mask,)

    return fwd, bwd


@_register(OpKind.POWER)
def _power():
    def fwd(x, exponent=2.0):
        return x**exponent, (x, exponent)

    def bwd(cache, g):
        x, e = cache
        return (g * e * x ** (e - 1.0),)

    return fwd, bwd


@_register(OpKind.SCALE)
def _scale():
    def fwd(x, value=1.0):
        return x * x.dtype.type(value), value

    def bwd(value, g):
        return (g * g.dtype.type(value),)

    return fwd, bwd


@_register(OpKind.SHIFT)
def _shift():
    def fwd(x, value=0.0):
        return x + x.dtype.type(value), None

    def bwd(_, g):
        return (g,)

    return fwd, bwd


@_register(OpKind.RESHAPE)
def _reshape():
    def fwd(x, shape=()):
        try:
            return x.reshape(shape), x.shape
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def bwd(shape, g):
        return (g.reshape(shape),)

    return fwd, bwd


@_register(OpKind.TAKE_ROWS)
def _take_rows():
    def fwd(x, index=None):
        index = np.asarray(index, dtype=np.intp)
        if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
            raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
        return x[index], (x.shape, index)

    def bwd(cache, g):
        shape, index = cache
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return fwd, bwd


# ------------------------------------------------------------ functional API


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply(OpKind.CONV2D, inputs, stride=stride, padding=padding)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    return apply(OpKind.MAXPOOL2D, [x], window=window, stride=stride)


def avgpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    return apply(OpKind.AVGPOOL2D, [x], window=window, stride=stride)


def global_maxpool(x: Tensor) -> Tensor:
    return apply(OpKind.GLOBAL_MAXPOOL, [x])


def global_avgpool(x: Tensor) -> Tensor:
    return apply(OpKind.GLOBAL_AVGPOOL, [x])


def channel_max(x: Tensor) -> Tensor:
    return apply(OpKind.CHANNEL_MAX, [x])


def channel_mean(x: Tensor) -> Tensor:
    return apply(OpKind.CHANNEL_MEAN, [x])


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return apply(OpKind.DENSE, [x, w] if b is None else [x, w, b])


def relu(x: Tensor) -> Tensor:
    return apply(OpKind.RELU, [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply(OpKind.SIGMOID, [x])


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return apply(OpKind.CONCAT, list(xs))


def maximum(x: Tensor, value: float) -> Tensor:
    return apply(OpKind.MAX_CONST, [x], value=float(value))


def take_rows(x: Tensor, index) -> Tensor:
    return apply(OpKind.TAKE_ROWS, [x], index=index)


# ---------------------------------------------------------------- grad check


def grad_check(
    build: Callable[[Sequence[Tensor]], Tensor],
    point: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    *,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    resample: Callable[[], Sequence[np.ndarray]] | None = None,
    max_tries: int = 20,
) -> float:
    """Max relative error between backprop and central differences.

    ``build`` maps a list of float64 leaf tensors (initialised from ``point``)
    to a scalar. The error for each checked entry is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_entries`` limits how
    many coordinates per leaf are probed (chosen with ``rng``); ``None``
    probes all of them.

    Points within ``10 * epsilon`` of a kink (relu, abs, hinge, max ties)
    raise :class:`KinkError` unless ``resample`` supplies a new point.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    for attempt in range(max_tries):
        try:
            return _grad_check_once(build, point, epsilon, max_entries, rng)
        except KinkError:
            if resample is None or attempt == max_tries - 1:
                raise
            point = resample()
    raise AssertionError("unreachable")


def _grad_check_once(build, point, epsilon, max_entries, rng) -> float:
    base = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in base]
    _kink_guard.margin = 10.0 * epsilon
    try:
        loss = build(leaves)
    finally:
        _kink_guard.margin = None
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar computation, got {loss.shape}")
    if loss.requires_grad:
        backward(loss, leaves)
    analytic = [np.zeros_like(p) if t.grad is None else t.grad for p, t in zip(base, leaves)]

    def value(arrays):
        return float(as_tensor(build([Tensor(a) for a in arrays])).data.reshape(-1)[0])

    worst = 0.0
    for li, p in enumerate(base):
        n = p.size
        if max_entries is None or max_entries >= n:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries, replace=False)
        for e in entries:
            idx = np.unravel_index(e, p.shape)
            bumped = [a.copy() for a in base]
            bumped[li][idx] += epsilon
            up = value(bumped)
            bumped[li][idx] -= 2 * epsilon
            down = value(bumped)
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic[li][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
