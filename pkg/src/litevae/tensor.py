"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` and :func:`grad` walk that graph in reverse
topological order. The graph is freed after a backward pass unless
``retain_graph`` is requested; higher-order gradients are not supported.

Precision is a per-run setting (:func:`set_default_dtype`), not a per-tensor
one: float32 for training, float64 for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "flops": None,  # list[int] while a FLOP counter is active
    "dry": False,  # skip heavy kernels, produce zeros (shape inference)
}


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ("f32"/"f64" or a numpy dtype)."""
    if isinstance(dtype, str):
        dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def flop_counter(dry: bool = False):
    """Count floating point operations of all ops executed inside the block.

    Yields a one-element list holding the running total. With ``dry=True``
    convolutions and matmuls return zeros instead of computing, which keeps
    shape inference cheap for paper-scale models.
    """
    old = (_state["flops"], _state["dry"])
    counter = [0]
    _state["flops"] = counter
    _state["dry"] = dry
    try:
        yield counter
    finally:
        _state["flops"], _state["dry"] = old


def add_flops(n: int) -> None:
    if _state["flops"] is not None:
        _state["flops"][0] += int(n)


def is_dry() -> bool:
    return _state["dry"]


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(_state["dtype"])
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = ""

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # ------------------------------------------------------------ arithmetic
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # --------------------------------------------------------------- methods
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def softplus(self):
        return softplus(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=_state["dtype"]), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_state["dtype"])
    return Tensor(arr)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: Backward, op: str = "") -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _scalar_or_tensor(x, like: Tensor):
    """Return (tensor_or_None, array) for a binary-op operand."""
    if isinstance(x, Tensor):
        return x, x.data
    return None, np.asarray(x, dtype=like.dtype)


# ------------------------------------------------------------------ engine
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: np.ndarray, keep: set[int] | None) -> tuple[list[Tensor], dict[int, np.ndarray]]:
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        if keep is None or id(node) not in keep:
            del grads[id(node)]
    return order, grads


def _free(order: list[Tensor]) -> None:
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, grads = _propagate(loss, np.ones_like(loss.data), keep=None)
    for node in order:
        if node._backward is None and id(node) in grads:
            g = grads[id(node)]
            if g.shape != node.shape:
                g = np.broadcast_to(g, node.shape)
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
    if not retain_graph:
        _free(order)


def grad(loss: Tensor, inputs: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Return d(loss)/d(input) for each input without touching ``.grad``.

    Inputs unreachable from ``loss`` get a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"grad() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    keep = {id(t) for t in inputs}
    order, grads = _propagate(loss, np.ones_like(loss.data), keep=keep)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.array(np.broadcast_to(g, t.shape)))
    if not retain_graph:
        _free(order)
    return out


# -------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    tb, bd = _scalar_or_tensor(b, a)
    out = a.data + bd
    add_flops(out.size)
    sa, sb = a.shape, bd.shape

    def _bw(g):
        return _unbroadcast(g, sa), (_unbroadcast(g, sb) if tb is not None else None)

    return make_result(out, (a,) + ((tb,) if tb is not None else ()), _bw, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    tb, bd = _scalar_or_tensor(b, a)
    out = a.data - bd
    add_flops(out.size)
    sa, sb = a.shape, bd.shape

    def _bw(g):
        return _unbroadcast(g, sa), (_unbroadcast(-g, sb) if tb is not None else None)

    return make_result(out, (a,) + ((tb,) if tb is not None else ()), _bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    tb, bd = _scalar_or_tensor(b, a)
    ad = a.data
    out = ad * bd
    add_flops(out.size)

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape)
        gb = _unbroadcast(g * ad, bd.shape) if tb is not None else None
        return ga, gb

    return make_result(out, (a,) + ((tb,) if tb is not None else ()), _bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b) if not isinstance(b, Tensor) else b
        ta, ad = None, np.asarray(a, dtype=b.dtype)
    else:
        ta, ad = a, a.data
    if isinstance(b, Tensor):
        tb, bd = b, b.data
    else:
        tb, bd = None, np.asarray(b, dtype=ad.dtype)
    out = ad / bd
    add_flops(out.size)

    def _bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if ta is not None else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if tb is not None else None
        return tuple(x for x, t in ((ga, ta), (gb, tb)) if t is not None)

    parents = tuple(t for t in (ta, tb) if t is not None)
    return make_result(out, parents, _bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = a.data**e
    add_flops(out.size)

    def _bw(g):
        return (g * e * a.data ** (e - 1.0),)

    return make_result(out, (a,), _bw, "pow")


def _unary(a: Tensor, out: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    add_flops(out.size)

    def _bw(g):
        return (g * dfn(g),)

    return make_result(out, (a,), _bw, op)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _unary(a, out, lambda g: out, "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _unary(a, np.log(x), lambda g: 1.0 / x, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def d(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, 0.5 / safe, 0.0).astype(out.dtype)

    return _unary(a, out, d, "sqrt")


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return _unary(a, np.abs(x), lambda g: np.sign(x), "abs")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _unary(a, np.maximum(x, 0), lambda g: (x > 0).astype(x.dtype), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, slope * x).astype(x.dtype)
    return _unary(a, out, lambda g: np.where(x > 0, 1.0, slope).astype(x.dtype), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _unary(a, s, lambda g: s * (1 - s), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _unary(a, x * s, lambda g: s * (1 + x * (1 - s)), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _unary(a, out.astype(x.dtype), lambda g: _sigmoid(x), "softplus")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _unary(a, out, lambda g: 1 - out * out, "tanh")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)

    def d(g):
        mask = np.ones_like(x)
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        return mask

    return _unary(a, out, d, "clamp")


# -------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    add_flops(a.size)
    shape = a.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# ------------------------------------------------------------- shape ops
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), _bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(out, tensors, _bw, "concat")


def chunk(a: Tensor, k: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % k:
        raise DimensionError(f"chunk: extent {n} not divisible by {k}")
    step = n // k
    index = [slice(None)] * a.ndim
    out = []
    for i in range(k):
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ----------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: {ad.shape} @ {bd.shape}")
    if _state["dry"]:
        shape = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]) + (ad.shape[-2], bd.shape[-1])
        out = np.zeros(shape, dtype=ad.dtype)
    else:
        out = ad @ bd
    add_flops(2 * out.size * ad.shape[-1])

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(out, (a, b), _bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    add_flops(3 * s.size)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (a,), _bw, "softmax")


def where_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))
