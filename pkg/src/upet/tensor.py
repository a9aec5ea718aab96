"""Dense N-d tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for gradient
verification).  Operators from :mod:`upet.ops` record themselves on the
thread-local :class:`ComputationRecord` that is active at call time; calling
:meth:`Tensor.backward` on a recorded scalar walks the record in reverse and
accumulates gradients into every ``requires_grad`` tensor that contributed.

Without an active record, operators simply compute values (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array with an optional gradient buffer.

    Attributes:
        data: the element buffer, a C-contiguous numpy array.
        requires_grad: leaf flag; only such tensors expose ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_needs_grad", "_record")

    def __init__(self, data, dtype=np.float32, requires_grad: bool = False):
        # asarray, not ascontiguousarray: the latter promotes 0-d scalars to 1-d
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.type not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._needs_grad = self.requires_grad
        self._record: ComputationRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype.type

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient; present only on requires_grad tensors after backward."""
        return self._grad if self.requires_grad else None

    def zero_grad(self) -> None:
        """Allocate (or clear) the gradient buffer of a requires_grad tensor."""
        if not self.requires_grad:
            raise ValueError("zero_grad on a tensor with requires_grad=False")
        self._grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values (copied), outside any record."""
        return Tensor(self.data.copy(), dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        """Copy to another precision as a fresh leaf with the same requires_grad."""
        return Tensor(self.data.astype(dtype), dtype=dtype, requires_grad=self.requires_grad)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; see :func:`backward`."""
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class OpRecord:
    """One executed operation: inputs, output and its gradient rule."""

    __slots__ = ("name", "inputs", "output", "vjp", "replay")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], None] | None,
                 replay: Callable[[], np.ndarray]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp          # consumes d(loss)/d(output), accumulates into inputs
        self.replay = replay    # recomputes output.data from inputs' current data


class ComputationRecord:
    """Topologically ordered log of executed operations (a tape).

    Operations append themselves in execution order, which is a topological
    order by construction.  Used as a context manager::

        with ComputationRecord() as rec:
            loss = ops.mean(ops.mul(x, x))
        loss.backward()

    A record can be backpropagated once; a second ``backward`` through the
    same record is rejected.
    """

    def __init__(self):
        self.ops: list[OpRecord] = []
        self.consumed = False

    def append(self, op: OpRecord) -> None:
        self.ops.append(op)

    def replay_matches(self) -> bool:
        """Re-run every recorded operation; True iff all outputs reproduce bitwise."""
        for op in self.ops:
            fresh = op.replay()
            if fresh.dtype != op.output.data.dtype or fresh.shape != op.output.data.shape:
                return False
            if not np.array_equal(fresh, op.output.data):
                return False
        return True

    def __enter__(self) -> "ComputationRecord":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STATE.stack.pop()
        assert popped is self, "computation records closed out of order"


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[ComputationRecord] = []


_STATE = _ThreadState()


def active_record() -> ComputationRecord | None:
    """The record operators currently append to, or None (inference mode)."""
    return _STATE.stack[-1] if _STATE.stack else None


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor participating in backward."""
    if not t._needs_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses of a tensor.  The
    record that produced ``loss`` is consumed: a second backward through it
    raises instead of silently doubling gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    record = loss._record
    if record is None:
        raise RuntimeError("loss was not produced under an active ComputationRecord")
    if record.consumed:
        raise RuntimeError("backward was already called through this computation record")
    record.consumed = True

    loss._grad = np.ones_like(loss.data)
    for op in reversed(record.ops):
        out = op.output
        if out._grad is None or op.vjp is None:
            continue
        op.vjp(out._grad)
    # transient buffers on non-leaf intermediates are dropped
    for op in record.ops:
        if not op.output.requires_grad:
            op.output._grad = None
