"""Dense float64 tensors with an explicit gradient tape.

The engine is deliberately small: tensors wrap numpy arrays, operations
record nodes onto the innermost active ``Tape``, and the backward pass
(see ``backward.py``) re-expresses every vector-Jacobian product in terms
of the same primitives, so gradients can themselves be differentiated
(one level of grad-of-grad is all the meta-gradient machinery needs).

Recording rules:
  * an op output is recorded iff a tape is active *and* some operand
    requires grad; otherwise the result is detached,
  * detached tensors never accumulate gradient,
  * tapes nest; ``no_tape()`` suspends recording inside a tape scope.

Tapes are thread-local: distinct threads may run distinct tapes
concurrently, detached tensors can be shared freely.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GradError(RuntimeError):
    """Invalid differentiation request (non-scalar or detached output)."""


class Node:
    """One recorded operation: parents and their local-gradient closures."""

    __slots__ = ("op", "parents", "vjps")

    def __init__(
        self,
        op: str,
        parents: tuple["Tensor", ...],
        vjps: tuple[Optional[Callable[["Tensor"], "Tensor"]], ...],
    ):
        self.op = op
        self.parents = parents
        self.vjps = vjps


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Optional["Tape"]] = []
        self.stats: list["TapeStats"] = []


_TLS = _TapeStack()


class TapeStats:
    """Aggregates peak node counts over every tape opened in a scope."""

    __slots__ = ("peak_nodes", "tapes_opened")

    def __init__(self):
        self.peak_nodes = 0
        self.tapes_opened = 0


@contextmanager
def collect_tape_stats():
    """Record the peak live-node count of all tapes opened in this scope."""
    stats = TapeStats()
    _TLS.stats.append(stats)
    try:
        yield stats
    finally:
        _TLS.stats.pop()


class Tape:
    """Append-only record of operations, with checkpoint marks.

    ``mark()``/``release(mark)`` truncate the node list back to a
    checkpoint so iterative loops (e.g. inner-loop gradient descent) keep
    a bounded graph alive.  Releasing drops the engine's references; any
    tensors the caller still holds stay valid but are no longer retained.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.peak_nodes = 0

    def __enter__(self) -> "Tape":
        _TLS.stack.append(self)
        for s in _TLS.stats:
            s.tapes_opened += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TLS.stack.pop()
        assert popped is self, "tape scopes must nest properly"
        return False

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def mark(self) -> int:
        return len(self.nodes)

    def release(self, mark: int) -> None:
        del self.nodes[mark:]

    def _record(self, node: Node) -> None:
        self.nodes.append(node)
        n = len(self.nodes)
        if n > self.peak_nodes:
            self.peak_nodes = n
        for s in _TLS.stats:
            if n > s.peak_nodes:
                s.peak_nodes = n


def active_tape() -> Optional[Tape]:
    stack = _TLS.stack
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording (used for first-order backward passes)."""
    _TLS.stack.append(None)
    try:
        yield
    finally:
        _TLS.stack.pop()


class Tensor:
    """n-dimensional float64 value, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node = node

    # -- introspection -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, node=None)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (implementations live in ops.py) ---------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self):
        from . import ops

        return ops.asum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def reshape(self, shape):
        from . import ops

        return ops.reshape(self, shape)


def leaf(data, requires_grad: bool = True) -> Tensor:
    """A gradient leaf; copies its input so later mutation cannot alias."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def record(
    op: str,
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    vjps: Sequence[Optional[Callable[[Tensor], Tensor]]],
) -> Tensor:
    """Wrap an op result, recording a node iff a tape is live and needed."""
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        node = Node(op, tuple(parents), tuple(vjps))
        tape._record(node)
        return Tensor(out_data, requires_grad=True, node=node)
    return Tensor(out_data, requires_grad=False, node=None)
