"""Minimal reverse-mode differentiation over float64 numpy arrays.

Values are plain ``np.ndarray`` (float64, C order). A :class:`Node` wraps a
value and records, for every parent that needs a gradient, the function that
maps the upstream gradient to the parent's gradient. ``backward`` walks the
recorded graph once in reverse topological order.

Only the operations the flow needs are provided; they are collected in
``OPS`` so gradient probes can iterate over them.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; names the dimension."""


class NonFiniteError(ValueError):
    pass


def as_tensor(values, *, check_finite: bool = True) -> np.ndarray:
    """Convert external input to a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf entries")
    return arr


class Node:
    """A value on the tape.

    Leaves created with ``requires_grad=True`` are parameters; ``backward``
    returns gradients for exactly those leaves.
    """

    __slots__ = ("value", "parents", "requires_grad", "name", "op")
    __array_ufunc__ = None  # ndarray <op> Node dispatches to the reflected Node method

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: Sequence[tuple["Node", Callable]] = (), op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 \
            else np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or bool(self.parents)
        self.name = name
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(value, name: str | None = None) -> Node:
    return Node(as_tensor(value).copy(), requires_grad=True, name=name)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=np.float64))


def _make(value: np.ndarray, op: str, links: Iterable[tuple[Node, Callable]]) -> Node:
    parents = [(p, fn) for p, fn in links if p.requires_grad]
    return Node(value, parents=parents, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value + b.value, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value - b.value, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def neg(a) -> Node:
    a = _wrap(a)
    return _make(-a.value, "neg", [(a, lambda g: -g)])


def exp(a) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)
    return _make(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(np.log(av), "log", [(a, lambda g: g / av)])


def square(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(av * av, "square", [(a, lambda g: 2.0 * g * av)])


def sqrt(a) -> Node:
    a = _wrap(a)
    out = np.sqrt(a.value)
    return _make(out, "sqrt", [(a, lambda g: g * 0.5 / out)])


def relu(a) -> Node:
    """max(0, v); the gradient at exactly 0 is taken as 0."""
    a = _wrap(a)
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), "relu", [(a, lambda g: g * mask)])


def clamp_min(a, floor) -> Node:
    """max(a, floor); ``floor`` may be a scalar or an array broadcastable to ``a``."""
    a = _wrap(a)
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor), "clamp_min", [(a, lambda g: g * mask)])


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", [(a, vjp)])


def mean(a, axis=None) -> Node:
    a = _wrap(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis), 1.0 / count)


def logsumexp(a, axis: int = -1) -> Node:
    a = _wrap(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(a.value - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + shift).squeeze(axis)
    soft = e / s
    return _make(out, "logsumexp", [(a, lambda g: np.expand_dims(g, axis) * soft)])


# -------------------------------------------------------------- shape & index

def reshape(a, shape) -> Node:
    a = _wrap(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", [(a, lambda g: g.reshape(old))])


def getitem(a, index) -> Node:
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _make(np.ascontiguousarray(a.value[index]), "getitem", [(a, vjp)])


def take_rows(a, rows) -> Node:
    """Gather rows of a 2-D table, e.g. per-class parameters by label."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return out

    return _make(a.value[rows], "take_rows", [(a, vjp)])


def concat(parts: Sequence, axis: int) -> Node:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    links = []
    for i, p in enumerate(parts):
        sl = [slice(None)] * p.value.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        links.append((p, lambda g, sl=tuple(sl): g[sl]))
    return _make(np.concatenate([p.value for p in parts], axis=axis), "concat", links)


def roll(a, shift: int, axis: int) -> Node:
    a = _wrap(a)
    return _make(np.roll(a.value, shift, axis=axis), "roll",
                 [(a, lambda g: np.roll(g, -shift, axis=axis))])


def squeeze2(a) -> Node:
    """(B, C, T) -> (B, 2C, T/2) with out[2c, t] = x[c, 2t], out[2c+1, t] = x[c, 2t+1]."""
    a = _wrap(a)
    b, c, t = a.shape
    if t % 2:
        raise ShapeError(f"squeeze needs an even time length, got T={t}")
    out = a.value.reshape(b, c, t // 2, 2).transpose(0, 1, 3, 2).reshape(b, 2 * c, t // 2)
    return _make(np.ascontiguousarray(out), "squeeze2", [(a, lambda g: _unsqueeze2(g))])


def _unsqueeze2(v: np.ndarray) -> np.ndarray:
    b, c2, t2 = v.shape
    return np.ascontiguousarray(v.reshape(b, c2 // 2, 2, t2).transpose(0, 1, 3, 2).reshape(b, c2 // 2, 2 * t2))


def unsqueeze2(a) -> Node:
    a = _wrap(a)
    b, c2, _ = a.shape
    if c2 % 2:
        raise ShapeError(f"unsqueeze needs an even channel count, got C={c2}")
    return _make(_unsqueeze2(a.value), "unsqueeze2", [(a, lambda g: squeeze2(Node(g)).value)])


# ------------------------------------------------------------------ transforms

def dht(v: np.ndarray) -> np.ndarray:
    """Orthonormal discrete Hartley transform along the last axis."""
    spec = np.fft.fft(v, axis=-1)
    return (spec.real - spec.imag) / math.sqrt(v.shape[-1])


def hartley(a) -> Node:
    a = _wrap(a)
    # the transform matrix is symmetric, so it is its own adjoint
    return _make(dht(a.value), "hartley", [(a, dht)])


def conv1d(x, weight, bias) -> Node:
    """'Same' zero-padded 1-D convolution.

    ``x`` is (C_in, T) or (B, C_in, T); ``weight`` is (C_out, C_in, K) with K
    odd; ``bias`` is (C_out,).
    out[o, t] = bias[o] + sum_{i,k} weight[o, i, k] * x[i, t + k - (K-1)/2]
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    unbatched = x.value.ndim == 2
    xv = x.value[None] if unbatched else x.value
    wv, bv = weight.value, bias.value
    if xv.ndim != 3:
        raise ShapeError(f"conv1d input must be (C, T) or (B, C, T), got shape {x.shape}")
    if wv.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (C_out, C_in, K), got shape {weight.shape}")
    n_batch, c_in, t = xv.shape
    c_out, w_in, k = wv.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d C_in mismatch: input has {c_in} channels, kernels expect {w_in}")
    if bv.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape (C_out,)=({c_out},), got {bv.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size K must be odd, got K={k}")
    if k > 2 * t - 1:
        raise ShapeError(f"conv1d kernel size K={k} exceeds 2T-1={2 * t - 1}")
    pad = (k - 1) // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad)))
    # im2col: rows are (batch, time), columns are (input channel, tap)
    cols = np.ascontiguousarray(sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3))
    cols = cols.reshape(n_batch * t, c_in * k)
    w2 = wv.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(n_batch, t, c_out).transpose(0, 2, 1) + bv[None, :, None]
    out = np.ascontiguousarray(out)

    def rows(g):
        g = g[None] if unbatched else g
        return g.transpose(0, 2, 1).reshape(n_batch * t, c_out)

    # the input gradient is a 'same' convolution of g with the flipped, transposed kernels
    w_back = wv[:, :, ::-1].transpose(1, 0, 2).reshape(c_in, c_out * k)

    def grad_x(g):
        g = g[None] if unbatched else g
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad)))
        gcols = np.ascontiguousarray(sliding_window_view(gp, k, axis=2).transpose(0, 2, 1, 3))
        gx = (gcols.reshape(n_batch * t, c_out * k) @ w_back.T).reshape(n_batch, t, c_in)
        gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
        return gx[0] if unbatched else gx

    def grad_w(g):
        return (rows(g).T @ cols).reshape(wv.shape)

    def grad_b(g):
        g = g[None] if unbatched else g
        return g.sum(axis=(0, 2))

    return _make(out[0] if unbatched else out, "conv1d",
                 [(x, grad_x), (weight, grad_w), (bias, grad_b)])


# -------------------------------------------------------------------- backward

def _topological(root: Node) -> list[Node]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for parent, _ in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order[::-1]


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable parameter leaf.

    The tape is left untouched, so calling this twice gives identical results.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    result: dict[Node, np.ndarray] = {}
    for node in _topological(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                result[node] = g
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return result


OPS: dict[str, Callable[..., Node]] = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "exp": exp, "log": log,
    "square": square, "sqrt": sqrt, "relu": relu, "clamp_min": clamp_min,
    "sum": sum, "mean": mean, "logsumexp": logsumexp, "reshape": reshape,
    "getitem": getitem, "take_rows": take_rows, "concat": concat, "roll": roll,
    "squeeze2": squeeze2, "unsqueeze2": unsqueeze2, "hartley": hartley,
    "conv1d": conv1d,
}
