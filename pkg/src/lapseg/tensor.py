"""Dense tensors plus tape-based reverse-mode autodiff.

A :class:`Tensor` wraps a row-major numpy float array. Differentiable
operations live in :mod:`lapseg.ops`; while a :class:`Tape` is active they
append (output, inputs, backward closure) nodes in execution order.
Replaying the recording in reverse populates ``.grad`` on every tensor
that requires one. Tensors are immutable values once created; parameter
updates happen between tapes by swapping the underlying buffer.

Execution order is a topological order of the data flow, so the reverse
sweep is deterministic: two identical runs give bit-identical gradients.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands with incompatible shapes or axes."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where the engine guarantees finite values."""


class Tensor:
    """Immutable dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        else:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def assert_finite(self, where: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {where}")
        return self

    def __repr__(self):
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    # Operator sugar; delegates to lapseg.ops (imported lazily to avoid a cycle).
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _wrap(arr: np.ndarray, requires_grad: bool) -> Tensor:
    """Fast internal constructor; trusts dtype and layout."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = requires_grad
    t.grad = None
    return t


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return _wrap(np.zeros(shape, dtype=dtype), requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return _wrap(np.ones(shape, dtype=dtype), requires_grad)


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    """Innermost active tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Recording of differentiable ops, in execution order.

    Usage::

        with Tape() as tape:
            loss = ...           # ops record themselves
        tape.backward(loss)      # populates .grad

    One tape belongs to one thread; independent tapes may run on
    independent threads.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Replay the tape in reverse from a scalar loss.

        Sets ``.grad`` (a numpy array) on every requires_grad tensor the
        reverse sweep reaches, the recorded loss included.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        refs: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g
            input_grads = backward_fn(g)
            for t, gi in zip(inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                tid = id(t)
                acc = grads.get(tid)
                if acc is None:
                    grads[tid] = gi
                    refs[tid] = t
                else:
                    # Fresh allocation: closures may hand back aliased buffers.
                    grads[tid] = acc + gi
        # Whatever is left belongs to leaves (tensors no node produced).
        for tid, g in grads.items():
            t = refs[tid]
            if t.requires_grad:
                t.grad = g
