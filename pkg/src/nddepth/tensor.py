"""Small reverse-mode autodiff over dense float64 arrays.

Only the ops needed by the losses and the refinement loop are provided.
Each op records its parents and a closure that pushes the output gradient
back into them; ``Tensor.backward`` walks the graph in reverse topological
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

KERNEL = 5
PAD = KERNEL // 2


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64, order="C")
        self._grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("non-finite value produced by tensor op")
        out._grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        # interior nodes get a fresh buffer so repeated backward calls do not
        # double count through them
        upstream: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in upstream:
                    upstream[id(parent)] = upstream[id(parent)] + pg
                else:
                    upstream[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    return Tensor._from_op(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


# -- shape / reductions -----------------------------------------------------

def take(x: Tensor, index) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(sum_(x), 1.0 / x.data.size)


def masked_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of ``x`` over entries where ``mask`` is true (mask broadcasts)."""
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    return Tensor._from_op((x.data * m).sum(), (x,), lambda g: (g * m,))


# -- convolution ------------------------------------------------------------

@dataclass
class SepConvWeights:
    """Depthwise 5x5 followed by a pointwise channel mix and a bias."""

    depthwise: Tensor  # (in_ch, 5, 5)
    pointwise: Tensor  # (out_ch, in_ch)
    bias: Tensor  # (out_ch,)

    def __post_init__(self):
        if self.depthwise.data.ndim != 3 or self.depthwise.shape[1:] != (KERNEL, KERNEL):
            raise ShapeError(f"depthwise kernel must be (C, 5, 5), got {self.depthwise.shape}")
        c_out, c_in = self.pointwise.shape
        if c_in != self.depthwise.shape[0] or self.bias.shape != (c_out,):
            raise ShapeError("pointwise/bias shapes inconsistent with depthwise kernel")

    @property
    def in_channels(self) -> int:
        return self.depthwise.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pointwise.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.depthwise, self.pointwise, self.bias]

    @classmethod
    def random(cls, in_ch: int, out_ch: int, rng: np.random.Generator,
               scale: float = 1.0) -> "SepConvWeights":
        dw = rng.normal(0.0, scale / KERNEL, size=(in_ch, KERNEL, KERNEL))
        pw = rng.normal(0.0, scale / np.sqrt(in_ch), size=(out_ch, in_ch))
        b = rng.normal(0.0, 0.1 * scale, size=out_ch)
        return cls(Tensor(dw, True), Tensor(pw, True), Tensor(b, True))

    @classmethod
    def zeros(cls, in_ch: int, out_ch: int) -> "SepConvWeights":
        return cls(Tensor(np.zeros((in_ch, KERNEL, KERNEL)), True),
                   Tensor(np.zeros((out_ch, in_ch)), True),
                   Tensor(np.zeros(out_ch), True))

    @classmethod
    def identity(cls, channels: int) -> "SepConvWeights":
        dw = np.zeros((channels, KERNEL, KERNEL))
        dw[:, PAD, PAD] = 1.0
        return cls(Tensor(dw, True), Tensor(np.eye(channels), True),
                   Tensor(np.zeros(channels), True))


def _pad(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * PAD, w + 2 * PAD))
    out[:, PAD:PAD + h, PAD:PAD + w] = x
    return out


def _windows(xp: np.ndarray) -> np.ndarray:
    # (C, H, W, 5, 5) view over a padded input
    return np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))


def depthwise_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 5x5 cross-correlation with zero padding of 2."""
    if x.data.ndim != 3:
        raise ShapeError(f"expected (C, H, W) input, got {x.shape}")
    c = x.shape[0]
    if kernel.shape[0] != c:
        raise ShapeError(f"kernel has {kernel.shape[0]} channels, input has {c}")
    win = _windows(_pad(x.data))
    out = np.einsum("chwij,cij->chw", win, kernel.data)

    def backward(g):
        gx = np.einsum("chwij,cij->chw", _windows(_pad(g)), kernel.data[:, ::-1, ::-1])
        gk = np.einsum("chwij,chw->cij", win, g)
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: ``out[o] = sum_i weight[o, i] * x[i] + bias[o]``."""
    if x.data.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise weight {weight.shape} does not match input {x.shape}")
    out = np.einsum("oi,ihw->ohw", weight.data, x.data)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data[:, None, None]
        parents = (x, weight, bias)

    def backward(g):
        gx = np.einsum("oi,ohw->ihw", weight.data, g)
        gw = np.einsum("ohw,ihw->oi", g, x.data)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return Tensor._from_op(out, parents, backward)


def conv2d_separable(x: Tensor, w: SepConvWeights) -> Tensor:
    if x.data.ndim != 3 or x.shape[0] != w.in_channels:
        raise ShapeError(f"input {x.shape} does not match weights with {w.in_channels} input channels")
    return pointwise_conv(depthwise_conv(x, w.depthwise), w.pointwise, w.bias)


# -- resampling -------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the linear weights for output sample i (half-pixel centres)."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if x.data.ndim != 3:
        raise ShapeError(f"expected (C, H, W) input, got {x.shape}")
    ry = _interp_matrix(x.shape[1], out_h)
    rx = _interp_matrix(x.shape[2], out_w)
    out = np.einsum("yh,chw,xw->cyx", ry, x.data, rx)
    return Tensor._from_op(out, (x,), lambda g: (np.einsum("yh,cyx,xw->chw", ry, g, rx),))


# -- numerical oracle -------------------------------------------------------

def finite_diff_check(f: Callable[..., Tensor], at: Tensor | Sequence[Tensor],
                      eps: float = 1e-5, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of scalar ``f(*at)`` with central differences.

    Returns max |analytic - numeric| / max(1, |numeric|) over the checked
    entries. ``max_entries`` caps the number of entries probed per tensor
    (sampled with ``rng``); by default every entry is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = [at] if isinstance(at, Tensor) else list(at)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    try:
        out = f(*tensors)
        if out.data.size != 1 or not np.isfinite(out.data).all():
            raise NonFiniteError("checked function must return a finite scalar")
        out.backward()
        analytic = [t.grad.copy() for t in tensors]

        worst = 0.0
        rng = rng or np.random.default_rng(0)
        for t, ga in zip(tensors, analytic):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)  # a view, so writes perturb t
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*tensors).item()
                flat[i] = orig - eps
                fm = f(*tensors).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("non-finite loss during finite differencing")
                num = (fp - fm) / (2.0 * eps)
                err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
        return worst
    finally:
        for t, r in zip(tensors, saved):
            t.requires_grad = r
            t.zero_grad()
