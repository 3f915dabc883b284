"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation records its inputs and a backward closure on
the output tensor, together with a monotonically increasing tape position.
``Tensor.backward`` replays the reachable part of the tape in exact reverse
recording order.
"""

from __future__ import annotations

import builtins
import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "ContractError",
    "NumericError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "exp",
    "log",
    "gelu",
    "square",
    "sum",
    "mean",
    "max",
    "minimum",
    "reshape",
    "transpose",
    "swapaxes",
    "broadcast_to",
    "concat",
    "slice",
    "gather_rows",
    "embedding",
    "softmax",
    "log_softmax",
    "layernorm",
    "l2_normalize",
    "softmax_cross_entropy",
    "grad_check",
]

# every differentiable operation; the gradient suite checks each one
OPS = (
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "exp", "log", "gelu", "square",
    "sum", "mean", "max", "minimum", "reshape", "transpose", "swapaxes", "broadcast_to",
    "concat", "slice", "gather_rows", "embedding", "softmax", "log_softmax", "layernorm",
    "l2_normalize", "softmax_cross_entropy",
)

LAYERNORM_EPS = 1e-5
L2_EPS = 1e-8
GRADCHECK_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class NumericError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


_tape_counter = itertools.count(1)
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape = 0
        self.name = name

    # -- introspection ---------------------------------------------------------------

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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -------------------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    # -- reverse pass ----------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None, order: str = "tape") -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

        ``order="tape"`` walks nodes in exact reverse recording order;
        ``order="dfs"`` uses the reverse post-order of a depth-first search, a
        different valid topological order kept for cross-checking.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        nodes = _reachable(self)
        if order == "tape":
            nodes.sort(key=lambda t: t._tape, reverse=True)
        elif order == "dfs":
            nodes = _dfs_order(self)
        else:
            raise ValueError(f"unknown order {order!r}")

        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _reachable(root: Tensor) -> list:
    seen = {id(root)}
    out = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
                stack.append(p)
    return out


def _dfs_order(root: Tensor) -> list:
    post: list = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            post.append(node)
    post.reverse()
    return post


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = next(_tape_counter)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic ---------------------------------------------------------------


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable constant."""
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), backward, "gelu")


def minimum(a: Tensor, bound: float) -> Tensor:
    """Clamp from above by a constant; no gradient flows where clamped."""
    active = a.data < bound
    out = np.where(active, a.data, bound).astype(a.dtype)
    return _record(out, (a,), lambda g: (g * active,), "minimum")


# -- reductions ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward, "mean")


def max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    if axis is None:
        flat = reshape(a, (-1,))
        return max(flat, 0, keepdims=False)
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise DimensionError("max over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    if not keepdims:
        out = np.squeeze(out, axis)
    return _record(out, (a,), backward, "max")


# -- shape manipulation -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(out, tensors, backward, "concat")


def slice(a: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic slices or integer arrays)."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = out.copy()

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record(out, (a,), backward, "slice")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis 1 of a ``[B, S, D]`` tensor with a ``[B, T]`` index."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows: tensor {a.shape} with index {index.shape}")
    B, S, D = a.shape
    if index.size and (index.min() < 0 or index.max() >= S):
        raise IndexError("gather_rows: index out of range")
    flat = (index + (np.arange(B) * S)[:, None]).ravel()
    out = a.data.reshape(B * S, D)[flat].reshape(B, index.shape[1], D)

    def backward(g):
        grad = np.zeros((B * S, D), dtype=g.dtype)
        np.add.at(grad, flat, g.reshape(-1, D))
        return (grad.reshape(B, S, D),)

    return _record(out, (a,), backward, "gather_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record(out, (table,), backward, "embedding")


# -- linear algebra -----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record(out, (a, b), backward, "matmul")


# -- fused normalisation / probability ops --------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis (population variance), then apply ``gain``/``bias``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), backward, "layernorm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    clipped = norm < eps

    def backward(g):
        proj = (out * g).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return _record(out, (x,), backward, "l2_normalize")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} with targets {targets.shape}")
    n, C = logits.shape
    if n == 0:
        raise DimensionError("cross entropy over zero rows")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target index out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _record(out, (logits,), backward, "softmax_cross_entropy")


# -- finite-difference checking -------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = GRADCHECK_EPS,
    n_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    Returns the maximum over checked coordinates of
    ``|a - n| / max(|a|, |n|, 1e-8)``. When ``n_samples`` is given, that many
    coordinates are drawn uniformly over all parameters; otherwise every
    coordinate is checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            if not np.shares_memory(flat, params[i].data):
                raise ContractError("grad_check needs contiguous parameter buffers")
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("grad_check: objective is not finite under perturbation")
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[i].reshape(-1)[j])
            err = abs(ana - num) / builtins.max(abs(ana), abs(num), 1e-8)
            worst = err if err > worst else worst
    return worst
