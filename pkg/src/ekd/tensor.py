"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient onto each parent.
:func:`backward` orders the recorded graph topologically (the "tape") and runs
the closures in reverse, accumulating gradients additively.

Arrays are plain C-contiguous ``numpy.float64`` buffers. Broadcasting is only
as general as the encoder needs: elementwise ops broadcast numpy-style and
``matmul`` accepts leading batch dimensions.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "_requires_grad", "frozen", "_parents", "_backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, frozen: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or '<leaf>'}")
        self.data = arr
        self.grad = None
        self.frozen = frozen
        self._requires_grad = False
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self.frozen:
            raise ContractError(f"tensor {self.name or '<unnamed>'} is frozen and cannot receive gradients")
        self._requires_grad = bool(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.frozen = False
        out._requires_grad = False
        out._parents = ()
        out._backward_fn = None
        out.op = "detach"
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.array(data, dtype=np.float64, copy=None, order="C")
    # a single reduction first: any NaN/Inf poisons the sum
    if not math.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NumericError(f"operation '{op}' produced non-finite values")
    out.data = data
    out.grad = None
    out.frozen = False
    out.name = None
    out.op = op
    track = is_grad_enabled() and any(p._requires_grad for p in parents)
    out._requires_grad = track
    if track:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Graph traversal


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of every tracked node feeding ``loss``.

    Each node appears once and after all of its inputs.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, tape: list[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = build_tape(loss)
    for node in tape:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node.grad is None or node._backward_fn is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent._requires_grad:
                continue
            if parent.frozen:
                raise ContractError(f"gradient reached frozen tensor {parent.name or '<unnamed>'}")
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out_data > 0.0, g / (2.0 * out_data), 0.0),)

    return _make(out_data, (a,), bw, "sqrt")


def log_sigmoid(a: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) = -softplus(-x)."""
    x = a.data
    out_data = -(np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0.0))
    # d/dx log sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(-np.logaddexp(0.0, x))
    return _make(out_data, (a,), lambda g: (g * sig_neg,), "log_sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, so finite-difference checks are clean)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(out_data, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out_data, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DomainError("mean over an empty axis")
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims) / count

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out_data, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def take(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("stack of an empty sequence")

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# Linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0 or a.shape[axis] == 0:
        raise DomainError("softmax of an empty tensor")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0 or a.shape[axis] == 0:
        raise DomainError("log_softmax of an empty tensor")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out_data)

    def bw(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _make(out_data, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DomainError(f"layer_norm needs a feature width >= 2, got {d}")
    if eps <= 0.0:
        raise DomainError("layer_norm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match width {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out_data, (x, gain, bias), bw, "layer_norm")


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero row is zero."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n[..., None] > 0.0, a.data / n[..., None], 0.0)
        return (g[..., None] * unit,)

    return _make(n, (a,), bw, "row_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure; each parameter
    is perturbed in place one coordinate at a time. The relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not (0.0 < eps <= 1e-2):
        raise DomainError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("f returned a non-finite value")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        value = f()
        if value.size != 1:
            raise ContractError("grad_check needs a scalar function")
        v = value.item()
        if not np.isfinite(v):
            raise NumericError("f returned a non-finite value")
        return v

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = evaluate()
                flat[j] = orig - eps
                f_minus = evaluate()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(a_flat[j] - numeric) / max(abs(a_flat[j]), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
