"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a C-contiguous numpy float64 array. Gradients are tracked through
an explicit :class:`GradientTape`: while a tape is active (``with tape:``),
every operation whose inputs require gradients appends one node to the tape.
Construction order is a topological order of the computation graph, so the
backward pass is a single reverse walk that visits each node exactly once and
accumulates gradients additively across shared subexpressions.

With no active tape every operation is a pure numpy computation, which is what
evaluation code and finite-difference checks rely on.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_PROB_CLAMP = 1e-12  # lower clamp applied inside kl_divergence logs

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        # Tape that recorded this tensor's defining op, if any.
        self.tape: Optional[GradientTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from any tape; shares the data buffer."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars are handled by scale/shift fast paths
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class GradientTape:
    """Append-only record of operations for one forward pass.

    One tape per training thread; nested activation is allowed but the
    innermost tape records. Entering pushes the tape on a thread-local stack.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(output: Tensor, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.tape = tape
        tape.nodes.append(_Node(inputs, output, backward_fn))
    return output


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Optional[GradientTape] = None) -> None:
    """Push d(loss)/d(tensor) back to every tensor recorded on the tape.

    ``loss`` must be a scalar recorded on a tape. Gradients accumulate
    additively into ``.grad`` slots; leaves keep theirs after the walk.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise ContractError("backward() on a tensor with no recording tape")
    _accumulate(loss, np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue  # this node does not feed the loss
        grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            _accumulate(t, g)


def detach(t: Tensor) -> Tensor:
    return t.detach()


# ---------------------------------------------------------------------------
# shape helpers

def _check_trailing(a_shape: tuple, b_shape: tuple) -> None:
    """Equal shapes, or one shape a trailing suffix of the other (incl. 0-d)."""
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"incompatible shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over leading axes so its shape becomes ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bwd(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bwd(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = -_reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def scale(t: Tensor, c: float) -> Tensor:
    out = Tensor(t.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, (t,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {t.shape}")
    out = Tensor(t.data.T.copy())

    def bwd(g):
        return (g.T,)

    return _record(out, (t,), bwd)


def relu(t: Tensor) -> Tensor:
    out = Tensor(np.maximum(t.data, 0.0))

    def bwd(g):
        return (g * (t.data > 0.0),)

    return _record(out, (t,), bwd)


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = Tensor(np.log(t.data))

    def bwd(g):
        return (g / t.data,)

    return _record(out, (t,), bwd)


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)
    if not np.all(np.isfinite(data)):
        raise NumericError("exp overflow")
    out = Tensor(data)

    def bwd(g):
        return (g * data,)

    return _record(out, (t,), bwd)


def tsum(t: Tensor, axis: Optional[int] = None) -> Tensor:
    out = Tensor(t.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return _record(out, (t,), bwd)


def tmean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    n = t.size if axis is None else t.shape[axis]
    out = Tensor(t.data.mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), t.shape).copy(),)

    return _record(out, (t,), bwd)


def norm2(t: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor. Gradient undefined at 0."""
    value = float(np.sqrt(np.sum(t.data * t.data)))
    out = Tensor(np.asarray(value))

    def bwd(g):
        if value == 0.0:
            return (np.zeros_like(t.data),)
        return (g * (t.data / value),)

    return _record(out, (t,), bwd)


# ---------------------------------------------------------------------------
# classification losses

def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the trailing axis, max-subtracted for stability."""
    z = logits.data
    if np.any(np.isnan(z)):
        raise NumericError("softmax input contains NaN")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (logits,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax.

    Fused op: the backward pass is the closed form (softmax - onehot)/B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs [batch, classes] logits, got {logits.shape}")
    z = logits.data
    if np.any(np.isnan(z)):
        raise NumericError("cross_entropy input contains NaN")
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor(np.asarray(np.mean(lse - picked)))

    def bwd(g):
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _record(out, (logits,), bwd)


def _check_distribution(arr: np.ndarray, name: str) -> None:
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be [batch, classes], got {arr.shape}")
    if np.any(arr < -1e-12):
        raise DomainError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise DomainError(f"{name} rows do not sum to 1 (max dev {np.abs(sums - 1).max():.3g})")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of sum_k p_k ln(p_k / q_k), with both logs clamped at 1e-12.

    Zero entries of p contribute 0 (the 0*ln 0 convention). Gradients flow
    through both arguments. The clamp admits a worst-case result of about
    -1e-11 when q puts mass below the clamp; for the softmax outputs this op
    is fed in practice the value is nonnegative up to rounding.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    n = p.shape[0]
    pc = np.maximum(p.data, _PROB_CLAMP)
    qc = np.maximum(q.data, _PROB_CLAMP)
    log_ratio = np.log(pc) - np.log(qc)
    out = Tensor(np.asarray(np.sum(p.data * log_ratio) / n))

    def bwd(g):
        s = float(g) / n
        gp = None
        gq = None
        if p.requires_grad:
            gp = (log_ratio + np.where(p.data > _PROB_CLAMP, 1.0, p.data / _PROB_CLAMP)) * s
        if q.requires_grad:
            gq = np.where(q.data > _PROB_CLAMP, -p.data / qc, 0.0) * s
        return gp, gq

    return _record(out, (p, q), bwd)


def mean_squared_l2(f: Tensor, g: Tensor) -> Tensor:
    """(1/B) sum_i |f_i - g_i|^2 for [batch, dim] operands."""
    if f.shape != g.shape:
        raise ShapeError(f"mean_squared_l2 shapes differ: {f.shape} vs {g.shape}")
    if f.ndim != 2:
        raise ShapeError(f"mean_squared_l2 needs [batch, dim], got {f.shape}")
    n = f.shape[0]
    diff = f.data - g.data
    out = Tensor(np.asarray(np.sum(diff * diff) / n))

    def bwd(grad_out):
        s = 2.0 * float(grad_out) / n
        gf = diff * s if f.requires_grad else None
        gg = -diff * s if g.requires_grad else None
        return gf, gg

    return _record(out, (f, g), bwd)
