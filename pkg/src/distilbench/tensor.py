"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op records its parents and an adjoint closure on the output tensor when
gradient mode is on and at least one input requires a gradient.  Calling
``backward()`` on a scalar replays the closures in reverse topological order
and then releases the graph, so a second ``backward()`` through the same graph
raises :class:`GraphError`.

Only the operations needed by a post-norm Transformer encoder and the
distillation losses built on top of it are provided.  Broadcasting is limited
to what ``numpy`` does for elementwise ops and batched ``matmul``.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64
GELU_COEF = 0.044715  # tanh approximation of x * Phi(x)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_mode = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the tape, e.g. a second backward through one graph."""


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """A float64 array that may take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""
        self._released = False

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if self._released:
            raise GraphError(
                "graph already consumed by a previous backward(); run a new forward pass")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward, "div")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    v2 = v * v
    t = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + GELU_COEF * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * du),)

    return _result(out, (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- shape ops ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # one flat product instead of a batched one followed by a sum
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def split(a: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    """Split into ``parts`` equal pieces along ``axis``."""
    n = a.shape[axis]
    if parts < 1 or n % parts:
        raise ShapeError(f"cannot split axis of size {n} into {parts} equal parts")
    width = n // parts
    axis = axis % a.ndim
    outs = []
    for k in range(parts):
        index = [slice(None)] * a.ndim
        index[axis] = slice(k * width, (k + 1) * width)
        outs.append(take(a, tuple(index)))
    return outs


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with a scatter-add adjoint."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), backward, "take")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalisation --------------------------------------------------------

def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    y = _log_softmax(x.data)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias {gain.shape}/{bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward, "layernorm")


# -- losses ---------------------------------------------------------------

def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Element-mean squared error; ``target`` is treated as a constant.

    ``mask`` (broadcastable to ``pred``) restricts the mean to selected
    elements.
    """
    target = _values(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    if mask is None:
        weight = None
        count = diff.size
    else:
        weight = np.broadcast_to(np.asarray(mask, dtype=DTYPE), diff.shape)
        count = weight.sum()
        if count == 0:
            raise ValueError("mse mask selects no elements")
        diff = diff * weight
    loss = float((diff ** 2).sum() / count)

    def backward(g):
        return (g * 2.0 * diff / count,)

    return _result(loss, (pred,), backward, "mse")


def _rows(v: np.ndarray) -> np.ndarray:
    return v.reshape(-1, v.shape[-1])


def soft_cross_entropy(target_probs, pred_logits: Tensor, row_mask=None) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(pred))``.

    ``target_probs`` is treated as a constant distribution per row.  Rows
    where ``row_mask`` is false are excluded from the mean.
    """
    target = _values(target_probs)
    if target.shape != pred_logits.shape:
        raise ShapeError(f"cross-entropy shape mismatch: {target.shape} vs {pred_logits.shape}")
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(pred_logits.data))):
        raise ValueError("cross-entropy received non-finite input")
    logp = _log_softmax(pred_logits.data)
    per_row = -(target * logp).sum(axis=-1)
    if row_mask is None:
        weight = np.ones(per_row.shape)
    else:
        weight = np.broadcast_to(np.asarray(row_mask, dtype=DTYPE), per_row.shape)
    count = weight.sum()
    if count == 0:
        raise ValueError("cross-entropy row mask selects no rows")
    loss = float((per_row * weight).sum() / count)

    def backward(g):
        grad = np.exp(logp) * target.sum(axis=-1, keepdims=True) - target
        return (g * grad * (weight[..., None] / count),)

    return _result(loss, (pred_logits,), backward, "soft_ce")


def cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy against integer labels, skipping ``ignore_index``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no labelled positions")
    logp = _log_softmax(logits.data)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / count)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * (valid[..., None] / count),)

    return _result(loss, (logits,), backward, "cross_entropy")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
