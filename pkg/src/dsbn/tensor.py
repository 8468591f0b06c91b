"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar walks the graph once in reverse topological order
and accumulates gradients into every leaf that requires them.

Only what an MLP with normalization layers needs is implemented: broadcasting
elementwise arithmetic, matrix products, reductions, ReLU, softmax and the two
cross-entropy losses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    # make numpy defer to Tensor's reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A leaf tensor owned by a layer; ``trainable=False`` freezes it."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(a.data**exponent, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0. NaN propagates."""
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def grad_reverse(x, scale: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ValueError(f"gradient reversal scale must be >= 0, got {scale}")
    x = as_tensor(x)
    return _node(x.data.copy(), (x,), lambda g: (-scale * g,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), bw)


def affine_transform(x, weight, bias) -> Tensor:
    """Dense layer ``x @ weight + bias``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"input shape {x.shape} does not match weight shape {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match weight shape {weight.shape}"
        )

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# softmax and losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (max-subtracted)."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    p = softmax_array(logits.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (logits,), bw)


def softmax_cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean over rows of ``-w_i log softmax(logits_i)[label_i]``.

    ``weights`` defaults to 1 for every row; the mean divides by the row
    count, not by the weight total.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (w * (g / n))[:, None],)

    return _node(np.asarray(loss), (logits,), bw)


def sigmoid_bce(score, target, weights=None) -> Tensor:
    """Mean binary cross-entropy on logits, ``softplus(s) - t*s`` form."""
    score = as_tensor(score)
    s = score.data
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), s.shape)
    if np.any((t != 0) & (t != 1)):
        raise ValueError("binary cross-entropy targets must be 0 or 1")
    w = np.ones(s.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), s.shape)
    n = s.size
    softplus = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    loss = (w * (softplus - t * s)).sum() / n

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * s))
        return (g * w * (sig - t) / n,)

    return _node(np.asarray(loss), (score,), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add to whatever is already stored, so several losses can be
    back-propagated before an optimizer step. The graph is released
    afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------------------
# numerical checking


def finite_difference_grad(f: Callable[[], float], array: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Deduplicate tensors by identity, keeping first-seen order."""
    out, seen = [], set()
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out
