"""Dense tensors with reverse-mode automatic differentiation.

Everything differentiable in the model is built from the ops in this module.
A ``Tensor`` wraps a numpy array; each op records its parents and a backward
rule on the output, and ``backward`` replays the resulting tape in reverse
topological order. Single precision is the training default; building the
same graph from float64 leaves gives a double-precision tape for gradient
checking.

Broadcasting is numpy-style but restricted: extents must match or be 1, with
rank expansion only through leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class ConfigurationError(ValueError):
    """A structural argument (kernel width, axis, ...) is invalid."""


class UsageError(ValueError):
    """An op was called outside its contract (non-scalar loss, bad label, ...)."""


class Tensor:
    """n-dimensional array node of the differentiation graph.

    ``grad`` is allocated lazily, has the same shape as ``data``, and
    accumulates across repeated backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the actual ops.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Tape:
    """Topologically ordered record of the ops below a root tensor.

    ``nodes`` lists every tensor reachable from the root through parent
    links, with each op's inputs strictly before the op's output.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(nodes=order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf below loss."""
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.accumulate_grad(g)
        if node._backward is not None:
            node._backward(g, grads)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.requires_grad = False  # grads land in leaves, not intermediates
    return out


def _send(grads: dict, node: Tensor, g: np.ndarray) -> None:
    if not (node.requires_grad or node._parents):
        return
    key = id(node)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = np.array(g, copy=True)


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    for ea, eb in zip(reversed(sa), reversed(sb)):
        if ea != eb and ea != 1 and eb != 1:
            raise DimensionError(f"shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise family


def _binary(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def bwd(g, grads):
        _send(grads, a, _unbroadcast(da(g, a.data, b.data), a.shape))
        _send(grads, b, _unbroadcast(db(g, a.data, b.data), b.shape))

    return _make(data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def _unary(a: Tensor, fwd, dfn) -> Tensor:
    data = fwd(a.data)

    def bwd(g, grads):
        _send(grads, a, dfn(g, a.data, data))

    return _make(data, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(a, lambda x: x * np.asarray(c, dtype=x.dtype), lambda g, x, y: g * c)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, _sigmoid_stable, lambda g, x, y: g * y * (1.0 - y))


def relu(a: Tensor) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0))


def gelu(a: Tensor) -> Tensor:
    inv_sqrt2 = np.float64(0.7071067811865476)
    inv_sqrt2pi = np.float64(0.3989422804014327)

    def fwd(x):
        return (0.5 * x * (1.0 + _special.erf(x * inv_sqrt2))).astype(x.dtype)

    def dfn(g, x, y):
        cdf = 0.5 * (1.0 + _special.erf(x * inv_sqrt2))
        pdf = inv_sqrt2pi * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf).astype(x.dtype)

    return _unary(a, fwd, dfn)


def square(a: Tensor) -> Tensor:
    return _unary(a, np.square, lambda g, x, y: g * 2.0 * x)


def powc(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _unary(a, lambda x: x**p, lambda g, x, y: g * p * x ** (p - 1.0))


def softplus(a: Tensor) -> Tensor:
    def fwd(x):
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    return _unary(a, fwd, lambda g, x, y: g * _sigmoid_stable(x))


# ---------------------------------------------------------------------------
# matrix and structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g, grads):
        _send(grads, a, g @ b.data.T)
        _send(grads, b, a.data.T @ g)

    return _make(data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _unary(a, lambda x: x.T.copy(), lambda g, x, y: g.T)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _unary(a, lambda x: x.reshape(shape), lambda g, x, y: g.reshape(old))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def bwd(g, grads):
        for t, piece in zip(parts, np.split(g, splits, axis=axis)):
            _send(grads, t, piece)

    return _make(data, parts, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def bwd_fn(g, x, y):
        full = np.zeros_like(x)
        full[start:stop] = g
        return full

    return _unary(a, lambda x: x[start:stop].copy(), bwd_fn)


# ---------------------------------------------------------------------------
# reductions


def _reduce_check(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = _reduce_check(a, axis)
    n = a.shape[axis]

    def dfn(g, x, y):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis)

    return _unary(a, lambda x: x.sum(axis=axis), dfn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    axis = _reduce_check(a, axis)
    n = a.shape[axis]

    def dfn(g, x, y):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / n

    return _unary(a, lambda x: x.mean(axis=axis), dfn)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max over an axis; ties route the gradient to the first occurrence."""
    axis = _reduce_check(a, axis)

    def fwd(x):
        return x.max(axis=axis)

    def dfn(g, x, y):
        arg = np.argmax(x, axis=axis)  # first occurrence on ties
        out = np.zeros_like(x)
        np.put_along_axis(
            out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        return out

    return _unary(a, fwd, dfn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def dfn(g, x, y):
        return np.full_like(x, float(g) / n)

    return _unary(a, lambda x: np.asarray(x.mean(), dtype=x.dtype), dfn)


# ---------------------------------------------------------------------------
# softmax / layer norm / losses


def softmax_last(a: Tensor) -> Tensor:
    def fwd(x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def dfn(g, x, y):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _unary(a, fwd, dfn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def bwd(g, grads):
        lead = tuple(range(g.ndim - 1))
        _send(grads, gain, (g * xhat).sum(axis=lead))
        _send(grads, bias, g.sum(axis=lead))
        gx = g * gain.data
        # d/dx of (x - mu(x)) * inv(x): standard layer-norm backward
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        _send(grads, x, dx)

    return _make(data, (x, gain, bias), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross entropy in the stabilized log-sigmoid form."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.shape}")

    def fwd(z):
        return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    return _unary(logits, fwd, lambda g, z, out: g * (_sigmoid_stable(z) - y))


# ---------------------------------------------------------------------------
# convolutions / pooling over time


def _check_odd_kernel(k: int) -> int:
    if k % 2 == 0:
        raise ConfigurationError(f"kernel width must be odd, got {k}")
    return (k - 1) // 2


def conv1d_same(x: Tensor, kernels: Tensor) -> Tensor:
    """Depthwise length-preserving convolution: one kernel per channel.

    x is (channels, T), kernels (channels, K) with K odd; out-of-range input
    is treated as zero.
    """
    if x.ndim != 2 or kernels.ndim != 2:
        raise DimensionError(f"conv1d_same expects 2-D x and kernels, got {x.shape}, {kernels.shape}")
    c, t = x.shape
    ck, k = kernels.shape
    if ck != c:
        raise DimensionError(f"channel mismatch: x has {c}, kernels have {ck}")
    pad = _check_odd_kernel(k)
    if k > 2 * t + 1:
        raise ConfigurationError(f"kernel width {k} exceeds 2*T+1 = {2 * t + 1}")
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + t] * kernels.data[:, j : j + 1]

    def bwd(g, grads):
        dk = np.empty_like(kernels.data)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dk[:, j] = (g * xp[:, j : j + t]).sum(axis=1)
            dxp[:, j : j + t] += g * kernels.data[:, j : j + 1]
        _send(grads, x, dxp[:, pad : pad + t])
        _send(grads, kernels, dk)

    return _make(out, (x, kernels), bwd)


def conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Full multi-channel same-padded convolution via im2col.

    x is (c_in, T), weight (c_out, c_in, K) with K odd; output (c_out, T).
    """
    if x.ndim != 2 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects (c_in,T) and (c_out,c_in,K), got {x.shape}, {weight.shape}")
    c_in, t = x.shape
    c_out, c_in_w, k = weight.shape
    if c_in_w != c_in:
        raise DimensionError(f"channel mismatch: x has {c_in}, weight expects {c_in_w}")
    pad = _check_odd_kernel(k)
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    cols = np.empty((c_in * k, t), dtype=x.dtype)
    for j in range(k):
        cols[j::k] = xp[:, j : j + t]
    w2 = weight.data.reshape(c_out, c_in * k)
    out = w2 @ cols

    def bwd(g, grads):
        _send(grads, weight, (g @ cols.T).reshape(c_out, c_in, k))
        dcols = w2.T @ g
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j : j + t] += dcols[j::k]
        _send(grads, x, dxp[:, pad : pad + t])

    return _make(out, (x, weight), bwd)


def maxpool1d_same(x: Tensor, k: int = 3) -> Tensor:
    """Stride-1 same-padded max pooling over time; x is (channels, T)."""
    if x.ndim != 2:
        raise DimensionError(f"maxpool1d_same expects (channels,T), got {x.shape}")
    pad = _check_odd_kernel(k)
    c, t = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad)), constant_values=-np.inf)
    windows = np.stack([xp[:, j : j + t] for j in range(k)])
    arg = np.argmax(windows, axis=0)  # first max wins on ties
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bwd(g, grads):
        dxp = np.zeros((c, t + 2 * pad), dtype=x.dtype)
        for j in range(k):
            dxp[:, j : j + t] += g * (arg == j)
        _send(grads, x, dxp[:, pad : pad + t])

    return _make(out, (x,), bwd)
