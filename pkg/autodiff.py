"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor records the op that produced it (its parents and a closure mapping the
output gradient to parent gradients). Tensor.backward() walks the graph in reverse
topological order. Every forward op checks its result for NaN/inf.
"""

import threading
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from errors import NonFiniteError, ShapeError, StateError

LOG_2PI = float(np.log(2.0 * np.pi))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- graph traversal ----------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise StateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise StateError("backward() on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)

        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, as_tensor(-1.0, self))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def softsign(self):
        return softsign(self)


class Parameter(Tensor):
    """A named learnable tensor; the name is its checkpoint key."""

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), backward, "power")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")

    def backward(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _result(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result(out_data, (a,), backward, "log")


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {e}") from e
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tensor_sum(a, axis, keepdims) * (1.0 / float(count))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return _result(out_data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _result(out_data, (a,), backward, "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward, "relu")


def softsign(a: Tensor) -> Tensor:
    denom = 1.0 + np.abs(a.data)

    def backward(g):
        return (g / (denom * denom),)

    return _result(a.data / denom, (a,), backward, "softsign")


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out_data * (g - np.sum(g * out_data, axis=-1, keepdims=True)),)

    return _result(out_data, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    out_data = _log_softmax(a.data)

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=-1, keepdims=True),)

    return _result(out_data, (a,), backward, "log_softmax")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_numpy(x: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(x))


def gated_activation(a: Tensor, channels: int) -> Tensor:
    """tanh(first half) * sigmoid(second half) along axis 0."""
    return tanh(a[:channels]) * sigmoid(a[channels:])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def l1_loss(prediction: Tensor, target) -> Tensor:
    target = as_tensor(target, prediction)
    if prediction.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    count = float(diff.size)

    def backward(g):
        grad = g * np.sign(diff) / count
        return grad, -grad

    return _result(np.asarray(np.abs(diff).mean()), (prediction, target), backward, "l1_loss")


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy; logits are frames x classes, targets integer ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy expects (T, C) logits and (T,) targets, got {logits.shape}, {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross-entropy target id outside the class range")
    logp = _log_softmax(logits.data)
    rows = np.arange(targets.shape[0])
    count = float(max(targets.shape[0], 1))

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (g * grad / count,)

    return _result(np.asarray(-logp[rows, targets].sum() / count), (logits,), backward, "cross_entropy")


def gaussian_nll(z: Tensor) -> Tensor:
    """0.5 * sum(z^2 + ln 2pi): negative log-density under a standard normal prior."""

    def backward(g):
        return (g * z.data,)

    value = 0.5 * (np.sum(z.data * z.data) + z.size * LOG_2PI)
    return _result(np.asarray(value, dtype=z.dtype), (z,), backward, "gaussian_nll")
