"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node holding its inputs and a closure that maps the
output gradient to input gradients. ``backward`` walks the graph in
reverse topological order and *adds* into ``.grad``, so two calls to
``backward`` accumulate. Shapes must match exactly except for scalar
operands and the explicit bias/channel helpers.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _node(a.data + float(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return mul_scalar(a, b)
    if _is_scalar(a):
        return mul_scalar(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul_scalar(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _node(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)`` elementwise; gradient flows where ``a > lo``."""
    mask = a.data > lo
    return _node(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1; ``beta == 0`` is plain L1."""
    ad = a.data
    if beta <= 0:
        return abs_(a)
    absd = np.abs(ad)
    small = absd < beta
    out = np.where(small, 0.5 * ad * ad / beta, absd - 0.5 * beta)
    return _node(out, (a,), lambda g: (g * np.where(small, ad / beta, np.sign(ad)),))


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    for ax in axes:
        if a.shape[ax] == 0:
            raise DimensionError("sum over empty axis")
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = a.data.sum(axis=axes)
    return _node(out, (a,), lambda g: (np.broadcast_to(np.reshape(g, kept), shape),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        if a.shape[ax] == 0:
            raise DimensionError("mean over empty axis")
        count *= a.shape[ax]
    return mul_scalar(sum(a, axes), 1.0 / count)


def var(a: Tensor, axis: int = 0, ddof: int = 1) -> Tensor:
    """Variance along one axis; ``ddof=1`` gives the Bessel-corrected estimate."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n - ddof <= 0:
        raise DimensionError(f"var needs more than {ddof} samples along axis {axis}, got {n}")
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    out = (centered * centered).sum(axis=axis) / (n - ddof)
    scale = 2.0 / (n - ddof)
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * centered * scale,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, key) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(a.data[key]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and nn primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (axis 1) bias to an ``N x F`` or ``N x C x ...`` tensor."""
    if bias.ndim != 1 or x.ndim < 2 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    return _node(x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=red)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``out x in``."""
    out = matmul(x, transpose(weight))
    return add_bias(out, bias) if bias is not None else out


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Per-channel ``x * scale + shift`` with constant (non-trainable) coefficients."""
    if x.ndim < 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError("channel_affine: coefficient length must equal channel count")
    view = (1, -1) + (1,) * (x.ndim - 2)
    s = scale.reshape(view)
    return _node(x.data * s + shift.reshape(view), (x,), lambda g: (g * s,))


def _correlate(x: np.ndarray, w: np.ndarray, p: int):
    """im2col cross-correlation, NCHW in and out; returns (out, cols).

    Windows are gathered channels-last so the copy runs over contiguous
    channel vectors; ``cols`` rows are ordered (kh, kw, C).
    """
    n, c, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xl = np.zeros((n, h + 2 * p, wd + 2 * p, c))
    xl[:, p:p + h, p:p + wd, :] = x.transpose(0, 2, 3, 1)
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if kh == 1 and kw == 1:
        cols = xl.reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xl, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1.

    ``x`` is ``N x C_in x H x W`` and ``w`` is ``C_out x C_in x k x k``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c_in, h, wd = x.shape
    c_out, wc, kh, kw = w.shape
    if wc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernel expects {wc}")
    if kh != kw:
        raise DimensionError("conv2d: square kernels only")
    p = padding
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    if kh == 1 and p == 0:
        return _pointwise_conv(x, w, bias)
    out, cols = _correlate(x.data, w.data, p)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gw = gx = None
        if w.requires_grad:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            gw = (gm.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        if x.requires_grad:
            # input gradient: correlate with the flipped, channel-swapped kernel
            wf = np.flip(w.data, (2, 3)).transpose(1, 0, 2, 3)
            if p <= kh - 1:
                gx, _ = _correlate(g, wf, kh - 1 - p)
            else:
                full, _ = _correlate(g, wf, kh - 1)
                gx = full[:, :, p:p + h, p:p + wd]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)) if bias.requires_grad else None

    return _node(out, parents, bw)


def _pointwise_conv(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    # 1x1 kernel: a batched channel matmul on NCHW, no window gather needed
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    wm = w.data.reshape(c_out, c_in)
    xf = x.data.reshape(n, c_in, h * wd)
    out = np.matmul(wm, xf).reshape(n, c_out, h, wd)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gf = g.reshape(n, c_out, h * wd)
        gx = np.matmul(wm.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (gf @ xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)) if bias.requires_grad else None

    return _node(out, parents, bw)


def avg_pool2d(x: Tensor) -> Tensor:
    """Global average pool over the two trailing spatial axes."""
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DimensionError("avg_pool2d needs non-empty spatial axes")
    return mean(x, axis=(-2, -1))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.shape[-1] == 0:
        raise DimensionError("softmax over empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("log_softmax over empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError("cross_entropy: one label per row required")
    picked = index(log_softmax(logits), (np.arange(n), labels))
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf with ``requires_grad``.

    Intermediate nodes do not keep their gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the old norm."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params])))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(
    params: Sequence[Tensor],
    state: dict[int, np.ndarray],
    cfg: SgdConfig,
    lr_scales: dict[int, np.ndarray | float] | None = None,
) -> None:
    """One SGD-with-momentum update in place.

    ``state`` maps ``id(param)`` to its velocity buffer and is created on
    first use. ``lr_scales`` optionally multiplies the step for a parameter,
    either by a scalar or by an array broadcastable to its shape. Gradients
    are left in place; call :func:`zero_grad` separately.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        v = state.get(id(p))
        v = g.copy() if v is None else cfg.momentum * v + g
        state[id(p)] = v
        step = cfg.learning_rate * v
        if lr_scales is not None and id(p) in lr_scales:
            step = step * lr_scales[id(p)]
        p.data = p.data - step
