"""Small define-by-run reverse-mode autodiff over numpy arrays.

Every operation on a :class:`Tensor` that requires grad records its parents
and a closure mapping the output gradient to the parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order. Numpy ufuncs (``np.sin(t)``, ``arr @ t``...) dispatch to
the tensor ops, so numeric code can be written once for arrays and tensors.

Precision defaults to float32 and can be switched with the
``REBASIN_PRECISION`` environment variable (``f32``/``f64``) or the
:func:`precision` context manager.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/inf."""


class _State:
    dtype = _DTYPES.get(os.environ.get("REBASIN_PRECISION", "f32").lower(), np.float32)
    grad_enabled = True


def default_dtype() -> type:
    return _State.dtype


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _State.dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    old = _State.dtype
    set_precision(name)
    try:
        yield
    finally:
        _State.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """An array plus an optional node in the autodiff graph."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or not np.issubdtype(arr.dtype, np.floating):
            # python scalars and lists follow the session precision
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- bookkeeping ---------------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _State.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -------------------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    _UFUNCS: dict = {}

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = self._UFUNCS.get(ufunc)
        if method != "__call__" or fn is None or kwargs:
            return NotImplemented
        return fn(*inputs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor cast to the current default precision."""
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._make(
        x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow"
    )


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    return scale(sum_axis(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(
        np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),), "expand_dims"
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), bw, "getitem")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (permutations, labels)."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    shape, dtype = a.shape, a.dtype
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        idx = [slice(None)] * len(shape)
        idx[ax] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return Tensor._make(np.take(a.data, indices, axis=ax), (a,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


# -- pointwise nonlinearities ---------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._make(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    _check_finite(y, "exp")
    return Tensor._make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive values")
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return Tensor._make(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


ACTIVATIONS: dict[str, Callable] = {"relu": relu, "sine": sin, "tanh": tanh}


def pointwise(kind: str, a) -> Tensor:
    try:
        fn = ACTIVATIONS[kind] if kind in ACTIVATIONS else {"exp": exp, "log": log}[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}") from None
    return fn(a)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at an exactly-zero norm is taken as zero."""
    a = as_tensor(a)
    x = a.data
    axes = _norm_axes(axis, a.ndim)
    n = np.sqrt(np.sum(x * x, axis=axes, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, g * x / safe, 0).astype(x.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axes)
    return Tensor._make(out, (a,), bw, "l2_norm")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x - s),)

    out = s if keepdims else np.squeeze(s, axis=axis)
    return Tensor._make(out, (a,), bw, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    """Row-wise log-softmax (``row_softmax_log`` along the last axis by default)."""
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    out = x - m - np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))

    def bw(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), bw, "log_softmax")


Tensor._UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.matmul: matmul,
    np.negative: lambda a: scale(a, -1.0),
    np.sin: sin,
    np.tanh: tanh,
    np.exp: exp,
    np.log: log,
}

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "sum_axis": sum_axis,
    "mean_axis": mean_axis,
    "l2_norm": l2_norm,
    "row_softmax_log": log_softmax,
    "concat": concat,
}


def op_forward(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch by op name; ``pointwise[relu]`` style names select activations."""
    if kind.startswith("pointwise[") and kind.endswith("]"):
        return pointwise(kind[len("pointwise["):-1], *inputs)
    if kind == "concat":
        return concat(inputs, **kwargs)
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns the gradient map keyed by ``id(leaf)``. Leaves that are not
    connected to ``loss`` keep a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                leaves[id(node)] = node
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = {}
    for key, leaf in leaves.items():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out[key] = leaf.grad
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- optimizer -------------------------------------------------------------------

def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``.

    ``state`` holds ``t`` (step count) and the per-parameter first/second
    moment lists ``m`` and ``v``; an empty dict is initialised on first use.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, param has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}; step aborted")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p.data *= 1 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` reading ``param.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)
