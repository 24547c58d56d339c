"""Reverse-mode automatic differentiation over small dense float64 tensors.

The engine is tape-based: while a :class:`Tape` is active (per thread),
every primitive whose inputs require gradients records itself on the tape
in creation order, which is already a topological order. ``grad`` walks the
tape in reverse exactly once. Outside a tape, primitives only compute
forward values, which keeps repeated loss evaluations (finite differences,
reference-model scoring) cheap.

``stop_gradient`` produces a parentless constant, so its adjoint
contribution is structurally zero. A :class:`SgSession` can additionally
pin every stop-gradient output to the value it had at a base point; the
finite-difference oracle uses this to perturb parameters while holding all
detached quantities fixed.

Everything is float64. Shapes follow numpy broadcasting for elementwise
ops; matmul supports stacked (batched) operands.
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericError, UsageError

_STATE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_STATE, "tape", None)


def _active_sg() -> Optional["SgSession"]:
    return getattr(_STATE, "sg", None)


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Creation order is topological (parents are created before children), so
    the backward pass is a single reverse sweep. Tapes nest; the innermost
    one records. Tapes must not be shared across threads.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tape = self._prev
        return False


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self) -> "no_grad":
        self._prev = _active_tape()
        _STATE.tape = None
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tape = self._prev
        return False


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _lift(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _record(out: Tensor, parents: Tuple[Tensor, ...], bwd: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a: TensorLike) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _record(out, (a,), bwd)


def exp(a: TensorLike) -> Tensor:
    a = _lift(a)
    v = np.exp(a.data)
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * v)

    return _record(out, (a,), bwd)


def expm1(a: TensorLike) -> Tensor:
    a = _lift(a)
    out = Tensor(np.expm1(a.data))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * np.exp(a.data))

    return _record(out, (a,), bwd)


def log(a: TensorLike) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _record(out, (a,), bwd)


def sqrt(a: TensorLike) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of negative value")
    v = np.sqrt(a.data)
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / (2.0 * v))

    return _record(out, (a,), bwd)


def tanh(a: TensorLike) -> Tensor:
    a = _lift(a)
    v = np.tanh(a.data)
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - v * v))

    return _record(out, (a,), bwd)


def sigmoid(a: TensorLike) -> Tensor:
    a = _lift(a)
    x = a.data
    v = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * v * (1.0 - v))

    return _record(out, (a,), bwd)


def logsigmoid(a: TensorLike) -> Tensor:
    """log(sigmoid(x)), computed as -log(1 + exp(-x)) without overflow."""
    a = _lift(a)
    out = Tensor(-np.logaddexp(0.0, -a.data))

    def bwd(g):
        if a.requires_grad:
            x = a.data
            # d/dx log sigmoid(x) = sigmoid(-x)
            s = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))), 1.0 / (1.0 + np.exp(-np.abs(x))))
            _accumulate(a, g * s)

    return _record(out, (a,), bwd)


def clamp_min(a: TensorLike, floor: float) -> Tensor:
    """Elementwise max(x, floor). Subgradient at the boundary is 0."""
    a = _lift(a)
    out = Tensor(np.maximum(a.data, floor))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > floor))

    return _record(out, (a,), bwd)


def minimum(a: TensorLike, ceiling: float) -> Tensor:
    """Elementwise min(x, ceiling). Subgradient at the boundary is 0."""
    a = _lift(a)
    out = Tensor(np.minimum(a.data, ceiling))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data < ceiling))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions / shape ops


def sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.data.shape).astype(np.float64))
                return
            gg = g
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(ax % a.data.ndim for ax in axes):
                    gg = np.expand_dims(gg, ax)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).astype(np.float64))

    return _record(out, (a,), bwd)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def swapaxes(a: TensorLike, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.swapaxes(ax1, ax2))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.swapaxes(ax1, ax2))

    return _record(out, (a,), bwd)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product. Supports 2D x 2D, ND x 2D, and same-rank stacked ND."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise UsageError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise UsageError("matmul supports ND @ 2D or equal-rank stacks")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.data.shape
                ga = a.data.reshape(-1, k)
                gg = g.reshape(-1, n)
                _accumulate(b, ga.T @ gg)
            else:
                _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _record(out, (a, b), bwd)


def gather(a: TensorLike, index: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis.

    ``index`` has the shape of ``a`` minus its last axis; the result has the
    same shape as ``index``.
    """
    a = _lift(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise UsageError(f"gather index shape {idx.shape} does not match {a.shape[:-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
            _accumulate(a, buf)

    return _record(out, (a,), bwd)


def take_rows(a: TensorLike, index: np.ndarray) -> Tensor:
    """Index the leading axis with an integer array (embedding lookup)."""
    a = _lift(a)
    idx = np.asarray(index, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accumulate(a, buf)

    return _record(out, (a,), bwd)


def log_softmax(a: TensorLike) -> Tensor:
    """Row-wise log softmax over the last axis, with max subtraction."""
    a = _lift(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    v = s - lse
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(v) * g.sum(axis=-1, keepdims=True))

    return _record(out, (a,), bwd)


def softmax(a: TensorLike) -> Tensor:
    a = _lift(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    v = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(v)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, v * (g - (g * v).sum(axis=-1, keepdims=True)))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# stop-gradient and its freeze sessions


class SgSession:
    """Records or replays stop-gradient outputs across loss evaluations.

    In ``record`` mode every ``stop_gradient`` call appends its forward value
    to an internal list. In ``replay`` mode calls return the recorded values
    positionally, regardless of their current inputs. Replaying requires the
    evaluation to make the same stop-gradient calls in the same order.
    """

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.mode = "idle"
        self.cursor = 0

    class _Scope:
        def __init__(self, session: "SgSession", mode: str) -> None:
            self.session = session
            self.mode = mode

        def __enter__(self):
            self._prev = _active_sg()
            s = self.session
            s.mode = self.mode
            if self.mode == "record":
                s.values = []
            s.cursor = 0
            _STATE.sg = s
            return s

        def __exit__(self, *exc) -> bool:
            self.session.mode = "idle"
            _STATE.sg = self._prev
            return False

    def record(self) -> "_Scope":
        return SgSession._Scope(self, "record")

    def replay(self) -> "_Scope":
        return SgSession._Scope(self, "replay")


def stop_gradient(a: TensorLike) -> Tensor:
    """Identity forward; contributes no adjoint to its input.

    The output is a constant (no parents), so gradients cannot flow through
    it. Under an active :class:`SgSession` the output value is recorded or
    replayed, which lets a finite-difference oracle pin detached quantities
    to their base-point values.
    """
    a = _lift(a)
    session = _active_sg()
    if session is None or session.mode == "idle":
        value = a.data.copy()
    elif session.mode == "record":
        value = a.data.copy()
        session.values.append(value)
    else:  # replay
        if session.cursor >= len(session.values):
            raise NumericError("stop-gradient call sequence changed between evaluations")
        value = session.values[session.cursor]
        if value.shape != a.data.shape:
            raise NumericError("stop-gradient output shape changed between evaluations")
        session.cursor += 1
    return Tensor(value)


# ---------------------------------------------------------------------------
# gradients


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the given leaf tensors.

    Requires an active tape that recorded the loss. Repeated calls on the
    same tape produce bitwise-identical results.
    """
    tape = _active_tape()
    if tape is None:
        raise UsageError("grad requires an active Tape")
    if loss.data.shape != ():
        raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
    for node in tape.nodes:
        node.grad = None
    for p in params.values():
        p.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is None or node._bwd is None:
            continue
        node._bwd(node.grad)
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm over the concatenation of all gradient arrays."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
