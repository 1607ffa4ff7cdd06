"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar walks the recorded graph in reverse creation
order and accumulates gradients into every tensor that requires them.
Graphs are rebuilt on every forward pass (define-by-run), so there is no
separate graph object to manage: creation order is the topological order.

Everything is float64. The op set is deliberately small: matrix multiply,
broadcast element-wise arithmetic, axis reductions, shape moves, relu,
sigmoid, clamped log, and the three loss heads (L1, binary cross-entropy,
softmax cross-entropy).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

EPS = 1e-12  # probability clamp applied before any log


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's shape contract."""


class ContractError(ValueError):
    """A call violates a documented precondition (e.g. non-scalar backward)."""


class ValidationError(ValueError):
    """Input values are outside their documented domain (e.g. labels)."""


_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen streams, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``_parents`` and ``_backward`` are only populated when the tensor is
    produced by an op while grad recording is enabled and at least one
    input requires gradients; otherwise the tensor is a plain leaf.
    ``_backward`` maps the gradient flowing into this tensor to one
    gradient per parent (None for parents that don't require grad).
    ``_seq`` is a global creation counter: parents always carry a smaller
    sequence number, so reverse creation order is a valid reverse
    topological order for backpropagation.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this scalar; gradient accumulation is additive."""
        backward(self)

    # operator sugar; constants are wrapped as non-grad leaves
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return ewmul(self, _as_tensor(other))

    def __rmul__(self, other):
        return ewmul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self._op or 'leaf'!r})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn, op):
    """Wrap an op result; drop the graph when recording is off or unneeded."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss):
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    Each call propagates its own flow of gradients (seeded with ones at the
    loss) and adds that flow into the persistent ``grad`` slots, so repeated
    calls without zeroing accumulate. Deterministic: nodes run in strictly
    decreasing creation order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._seq in nodes:
            continue
        nodes[t._seq] = t
        stack.extend(t._parents)

    flow = {loss._seq: np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = flow.pop(seq, None)
        if g is None or not t.requires_grad:
            continue
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = flow.get(parent._seq)
            flow[parent._seq] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), back, "sub")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def ewmul(a, b):
    """Element-wise product with numpy broadcasting.

    Gradients route ``dOut * other`` to each operand, summed over any
    broadcast axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"ewmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), back, "ewmul")


def matmul(a, b):
    """Standard 2-D matrix product. dA = g @ B^T, dB = A^T @ g."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def back(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(data, (a, b), back, "matmul")


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(data, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reduce_sum(a, axis=None, keepdims=False):
    """Sum along ``axis`` (all axes when None); backward broadcasts dOut."""
    a = _as_tensor(a)
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"reduce_sum: axis {axis} out of range for shape {a.shape}")
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.data.shape),)

    return _make(data, (a,), back, "reduce_sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"reduce_mean: axis {axis} out of range for shape {a.shape}")
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / n, a.data.shape),)

    return _make(data, (a,), back, "reduce_mean")


def relu(a):
    """max(x, 0); subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def sigmoid(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates cleanly to 0/1
        data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def log(a, eps=EPS):
    """log(max(x, eps)); the clamp keeps confident probabilities finite."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, eps)
    data = np.log(clamped)
    return _make(data, (a,), lambda g: (g / clamped,), "log")


def absolute(a):
    a = _as_tensor(a)
    data = np.abs(a.data)
    return _make(data, (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------------------
# losses


def _reduce(t, reduction, op_name):
    if reduction == "mean":
        return reduce_mean(t)
    if reduction == "sum":
        return reduce_sum(t)
    if reduction == "none":
        return t
    raise ValidationError(f"{op_name}: unknown reduction {reduction!r}")


def l1(pred, target, reduction="mean"):
    """Mean absolute error; with reduction='none' returns per-element |diff|."""
    return _reduce(absolute(sub(pred, _as_tensor(target))), reduction, "l1")


def binary_cross_entropy(p, labels, reduction="mean"):
    """-(l*log(p) + (1-l)*log(1-p)) with p clamped into [eps, 1-eps].

    ``labels`` must be 0/1 valued and broadcastable to ``p``.
    """
    p = _as_tensor(p)
    lab = np.asarray(labels, dtype=np.float64)
    if lab.size and not np.all((lab == 0.0) | (lab == 1.0)):
        raise ValidationError("binary_cross_entropy: labels must be 0 or 1")
    pos = ewmul(Tensor(lab), log(p))
    negpart = ewmul(Tensor(1.0 - lab), log(sub(Tensor(np.ones_like(p.data)), p)))
    return _reduce(neg(add(pos, negpart)), reduction, "binary_cross_entropy")


def softmax_cross_entropy(logits, classes, reduction="mean"):
    """Cross-entropy of row-wise softmax against integer class indices."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    cls = np.asarray(classes)
    n, k = logits.data.shape
    if cls.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: classes shape {cls.shape} != ({n},)")
    if cls.size and (cls.min() < 0 or cls.max() >= k):
        raise ValidationError(f"softmax_cross_entropy: class index outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True) if n else logits.data
    e = np.exp(z)
    lse = np.log(e.sum(axis=1))
    per_sample = lse - z[np.arange(n), cls]
    soft = e / e.sum(axis=1, keepdims=True) if n else e
    onehot = np.zeros((n, k))
    if n:
        onehot[np.arange(n), cls] = 1.0

    def back_factory(scale):
        def back(g):
            gcol = np.asarray(g).reshape(-1, 1) if np.ndim(g) else np.full((n, 1), g)
            return (gcol * (soft - onehot) * scale,)
        return back

    if reduction == "none":
        return _make(per_sample, (logits,), back_factory(1.0), "softmax_ce")
    if reduction == "sum":
        return _make(per_sample.sum(), (logits,), back_factory(1.0), "softmax_ce")
    if reduction == "mean":
        data = per_sample.mean() if n else np.float64(0.0)
        return _make(data, (logits,), back_factory(1.0 / max(n, 1)), "softmax_ce")
    raise ValidationError(f"softmax_cross_entropy: unknown reduction {reduction!r}")


def softmax_probs(logits_data):
    """Row-wise softmax on raw data (no graph); used by prediction paths."""
    z = np.asarray(logits_data, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f, x, eps=1e-5):
    """Compare f's analytic gradient at x against central differences.

    ``f`` must deterministically map a Tensor to a scalar Tensor. Returns
    the max over coordinates of |analytic - numeric| / max(1, |analytic|,
    |numeric|). ``x.data`` is perturbed in place and restored.
    """
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        dn = f(x).item()
        flat[i] = orig
        numeric[i] = (up - dn) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
