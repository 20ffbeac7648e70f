"""Flattened parameter vectors with a named segment table.

All optimization-level machinery (inner-loop descent, conjugate gradient,
the outer Adam update) works in this flat space; models slice their layer
tensors back out of it by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


class ParamVector:
    """Contiguous float64 buffer covered exactly by named segments."""

    __slots__ = ("segments", "data", "_index")

    def __init__(self, segments: tuple[Segment, ...], data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError(f"ParamVector data must be 1-d, got shape {data.shape}")
        offset = 0
        for seg in segments:
            if seg.offset != offset:
                raise ValueError(
                    f"segment {seg.name!r} at offset {seg.offset}, expected {offset}"
                )
            offset += seg.size
        if offset != data.size:
            raise ValueError(
                f"segments cover {offset} scalars but data has {data.size}"
            )
        self.segments = tuple(segments)
        self.data = data
        self._index = {seg.name: seg for seg in segments}

    # -- construction ----------------------------------------------------
    @classmethod
    def from_arrays(cls, named_arrays) -> "ParamVector":
        """Flatten an ordered iterable of (name, array) pairs."""
        segments = []
        chunks = []
        offset = 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segments.append(Segment(name, arr.shape, offset))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(tuple(segments), data)

    def like(self, data: np.ndarray) -> "ParamVector":
        """A new vector with this segment table over ``data``."""
        return ParamVector(self.segments, np.asarray(data, dtype=np.float64))

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments, np.zeros_like(self.data))

    # -- access ------------------------------------------------------------
    @property
    def size(self) -> int:
        return self.data.size

    def view(self, name: str) -> np.ndarray:
        seg = self._index[name]
        return self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def unflatten(self) -> dict[str, np.ndarray]:
        """Views of every segment; writing through them writes the buffer."""
        return {seg.name: self.view(seg.name) for seg in self.segments}

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def check_layout(self, other: "ParamVector", context: str) -> None:
        if not self.same_layout(other):
            raise ValueError(f"{context}: parameter vector layouts differ")

    # -- light arithmetic (new vectors; buffers are never mutated) ----------
    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other, "add")
        return self.like(self.data + other.data)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_layout(other, "sub")
        return self.like(self.data - other.data)

    def __mul__(self, s: float) -> "ParamVector":
        return self.like(self.data * float(s))

    __rmul__ = __mul__

    def dot(self, other: "ParamVector") -> float:
        self.check_layout(other, "dot")
        return float(self.data @ other.data)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __repr__(self) -> str:
        return f"ParamVector({len(self.segments)} segments, {self.size} scalars)"


# ---------------------------------------------------------------------------
# bridges between the flat space and the tape world
# ---------------------------------------------------------------------------

def leaf_tensors(pv: ParamVector):
    """Per-segment gradient leaves (buffers copied, so the vector stays put)."""
    from .autodiff import leaf

    return {seg.name: leaf(pv.view(seg.name)) for seg in pv.segments}


def constant_tensors(pv: ParamVector):
    """Per-segment detached constants (zero-copy views)."""
    from .autodiff import Tensor

    return {seg.name: Tensor(pv.view(seg.name)) for seg in pv.segments}


def tensors_to_vector(layout: ParamVector, tensors) -> ParamVector:
    """Flatten segment-keyed tensors back into ``layout``'s flat space."""
    chunks = []
    for seg in layout.segments:
        t = tensors[seg.name]
        data = t.data if hasattr(t, "data") else np.asarray(t)
        if data.shape != seg.shape:
            raise ValueError(
                f"tensors_to_vector: segment {seg.name!r} has shape {data.shape}, "
                f"expected {seg.shape}"
            )
        chunks.append(np.asarray(data, dtype=np.float64).reshape(-1))
    return layout.like(np.concatenate(chunks) if chunks else np.zeros(0))


def vector_grad(loss_fn, at: ParamVector):
    """Value and gradient of ``loss_fn`` (segment tensors -> scalar tensor)."""
    from .autodiff import Tape, grad

    with Tape():
        ts = leaf_tensors(at)
        loss = loss_fn(ts)
        names = [seg.name for seg in at.segments]
        gs = grad(loss, [ts[n] for n in names])
    flat = np.concatenate([g.data.reshape(-1) for g in gs]) if names else np.zeros(0)
    return float(loss.data), at.like(flat)


def vector_hvp(loss_fn, at: ParamVector, v: ParamVector) -> ParamVector:
    """Hessian-vector product of ``loss_fn`` at ``at`` with direction ``v``.

    Double backward: differentiates <grad(loss), v> once more.  A loss
    whose gradient is constant in the parameters has a zero Hessian and
    yields the zero vector.
    """
    from .autodiff import Tape, constant, grad, ops

    at.check_layout(v, "vector_hvp")
    with Tape():
        ts = leaf_tensors(at)
        loss = loss_fn(ts)
        if loss.size != 1:
            raise ValueError("vector_hvp: loss_fn must return a scalar")
        names = [seg.name for seg in at.segments]
        leaves = [ts[n] for n in names]
        gs = grad(loss, leaves, create_graph=True)
        gv = None
        for name, g in zip(names, gs):
            term = ops.asum(ops.mul(g, constant(v.view(name))))
            gv = term if gv is None else ops.add(gv, term)
        if gv is None or not gv.requires_grad:
            return at.zeros_like()
        hs = grad(gv, leaves)
    return at.like(np.concatenate([h.data.reshape(-1) for h in hs]))
