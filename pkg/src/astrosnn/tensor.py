"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`GradientTape`
only when at least one input is tracked, so inference code pays nothing for
the autodiff machinery::

    w = Tensor(np.ones(3), requires_grad=True)
    with GradientTape() as tape:
        loss = (w * 2.0).sum()
    backward(tape, loss)
    w.grad  # array([2., 2., 2.])

Broadcasting is one-sided: the result shape must equal the shape of one of the
operands (scalar with tensor, row vector with matrix, per-head constants with a
batch of heads).  Anything that would grow both operands is a shape error.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, TapeStateError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ParameterError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dt}; only float32 and float64")
    return dt


class Tensor:
    """A float32/float64 array that may take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, _leaf: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and arr.dtype in (np.float32, np.float64):
            dt = arr.dtype
        else:
            dt = resolve_dtype(dtype)
        self.data = arr if arr.dtype == dt else arr.astype(dt)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = _leaf

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradientTape:
    """Ordered record of differentiable operations.

    A tape is used once: :func:`backward` consumes it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise TapeStateError("tape was already consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        if self.consumed:
            raise TapeStateError("cannot record onto a consumed tape")
        for t in inputs:
            if t.requires_grad and t._leaf:
                self._leaves.setdefault(id(t), t)
        self._records.append((out, inputs, vjp))
        self._outputs.add(id(out))

    def backward(self, root: Tensor, leaves: Iterable[Tensor] = ()) -> None:
        backward(self, root, leaves)


def backward(tape: GradientTape, root: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Propagate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Gradients accumulate into existing ``.grad`` arrays.  Leaves seen on the
    tape but disconnected from ``root`` receive zeros, as do any extra
    ``leaves`` passed explicitly.
    """
    if tape.consumed:
        raise TapeStateError("backward already ran on this tape")
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if id(root) not in tape._outputs and not (root.requires_grad and root._leaf):
        raise ContractError("root was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    targets = dict(tape._leaves)
    if root.requires_grad and root._leaf:
        targets.setdefault(id(root), root)
    for leaf in leaves:
        if leaf.requires_grad:
            targets.setdefault(id(leaf), leaf)
    for key, leaf in targets.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    tape._records.clear()
    tape._outputs.clear()
    tape.consumed = True


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; record ``vjp`` if a tape wants it.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    tape = current_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor(data, requires_grad=True, _leaf=False)
                tape.record(out, tuple(inputs), vjp)
                return out
    return Tensor(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"two-sided broadcast of {sa} and {sb} is not allowed")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function 1/(1+e^-x), computed without overflow."""
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return apply_op(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return apply_op(y, (x,), lambda g: (g * y,))


def heaviside_ste(x: Tensor, v_th: float = 0.0, alpha: float = 2.0) -> Tensor:
    """Spike function: 1 where x >= v_th, else 0.

    Backward passes the upstream gradient through the triangular surrogate
    max(0, alpha - alpha^2 |x - v_th|), supported on |x - v_th| <= 1/alpha.
    """
    if not alpha > 0:
        raise ParameterError(f"surrogate width alpha must be positive, got {alpha}")
    d = x.data
    y = (d >= v_th).astype(x.dtype)

    def vjp(g):
        return (g * surrogate_grad(d, v_th, alpha),)

    return apply_op(y, (x,), vjp)


def surrogate_grad(x: np.ndarray, v_th: float = 0.0, alpha: float = 2.0) -> np.ndarray:
    x = np.asarray(x)
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    w = alpha - alpha * alpha * np.abs(x - v_th)
    return np.maximum(w, 0.0).astype(dt, copy=False)


# -- linear algebra & shape ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2:
                # fold batch axes into one GEMM: sum_b g_b @ b_b^T
                bt = np.broadcast_to(bd, g.shape[:-2] + bd.shape[-2:])
                ga = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1) @ \
                    np.moveaxis(bt, -2, 0).reshape(bd.shape[-2], -1).T
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                at = np.broadcast_to(ad, g.shape[:-2] + ad.shape[-2:])
                gb = at.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return apply_op(out, (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return apply_op(out, (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, index) -> Tensor:
    src, dt = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(src, dtype=dt)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return apply_op(x.data[index], (x,), vjp)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return apply_op(out, tensors, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tensors, vjp)


# -- reductions ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply_op(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


# -- model plumbing ------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    src, dt = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(src, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return apply_op(table.data[ids], (table,), vjp)


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, optionally times ``gain``."""
    d = x.data
    n = d.shape[-1]
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    y = (d * inv).astype(x.dtype, copy=False)

    def vjp(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True) / n),)

    out = apply_op(y, (x,), vjp)
    return out if gain is None else mul(out, gain)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` has the class axis last; ``targets`` matches its leading shape.
    """
    targets = np.asarray(targets)
    if targets.dtype.kind not in "iu":
        raise TypeError(f"targets must be integers, got {targets.dtype}")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - shifted[rows, t]).mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return apply_op(loss, (logits,), vjp)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=resolve_dtype(dtype)))
