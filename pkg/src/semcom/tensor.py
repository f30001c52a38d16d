"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one input requires a gradient, the output keeps references to its
inputs plus a backward rule mapping the output gradient to input gradients.
:func:`backward` orders that graph into a :class:`Tape`, runs the rules in
reverse and accumulates (``+=``) into the ``grad`` of leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_grad_state = threading.local()


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """backward() was asked to traverse a graph that was already consumed."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        out._consumed = False
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or None) per parent, each
    with the parent's shape.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_SQRT_2_OVER_PI * (xd + GELU_COEFF * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_op(out, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_op(np.array(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences, differentiable in both inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return make_op(np.array(np.mean(diff * diff)), (a, b), bw, "mse")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return make_op(np.roll(x.data, shifts, axes), (x,),
                   lambda g: (np.roll(g, back, axes),), "roll")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward: a_grad = g·bᵀ, b_grad = aᵀ·g (summed over broadcast axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_op(np.matmul(ad, bd), (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., i] · w[i, o] (+ b[o])."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    lead = xd.shape

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(lead) if x.requires_grad else None
        gw = xd.reshape(-1, lead[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# normalisation / attention


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then gamma·x̂ + beta."""
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("gamma/beta must have shape (d,)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis with max subtraction.

    ``mask`` is an optional constant added to the logits (large negative
    entries suppress positions); it receives no gradient.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (x,), bw, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention on [..., t, d] inputs.

    Each head sees a d/heads slice; scores are scaled by 1/√(d/heads) and the
    head outputs are concatenated back to width d. ``mask`` (broadcastable to
    [..., heads, t, t]) is added to the scores.
    """
    if heads < 1 or q.shape[-1] % heads:
        raise ValueError(f"width {q.shape[-1]} not divisible by {heads} heads")
    if not (q.shape == k.shape == v.shape):
        raise ValueError("q, k, v must share a shape")
    *lead, t, d = q.shape
    dh = d // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(z):
        return transpose(reshape(z, (*lead, t, heads, dh)), perm)

    qh, kh, vh = split(q), split(k), split(v)
    kt = transpose(kh, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = scale(matmul(qh, kt), 1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, mask), vh)
    return reshape(transpose(out, perm), (*lead, t, d))


# ---------------------------------------------------------------------------
# windows


def window_partition(x: Tensor, win: int) -> Tensor:
    """[..., h, w, d] -> [..., nw, win·win, d] with windows in row-major order."""
    *lead, h, w, d = x.shape
    if win < 1 or h % win or w % win:
        raise ValueError(f"grid {h}x{w} not divisible by window {win}")
    nl = len(lead)
    y = reshape(x, (*lead, h // win, win, w // win, win, d))
    y = transpose(y, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return reshape(y, (*lead, (h // win) * (w // win), win * win, d))


def window_merge(x: Tensor, win: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nw, tt, d = x.shape
    if h % win or w % win or nw != (h // win) * (w // win) or tt != win * win:
        raise ValueError("window layout does not match the target grid")
    nl = len(lead)
    y = reshape(x, (*lead, h // win, w // win, win, win, d))
    y = transpose(y, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return reshape(y, (*lead, h, w, d))


# ---------------------------------------------------------------------------
# backward


class Tape:
    """Graph nodes of one forward pass in topological order (inputs first)."""

    def __init__(self, nodes: list):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def record(cls, loss: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._consumed:
                raise GraphConsumedError("graph already consumed by a previous backward()")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays. The graph is released
    afterwards; a second backward over it raises :class:`GraphConsumedError`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed or (tape is not None and tape.consumed):
        raise GraphConsumedError("backward already ran for this forward pass")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = gp if key not in grads else grads[key] + gp
        node._parents = ()
        node._backward = None
        node._consumed = True
    tape.consumed = True
