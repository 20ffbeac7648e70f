"""Reverse-mode differentiation over the recorded graph."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import GradError, Tape, Tensor, active_tape, constant, leaf, no_tape

__all__ = ["grad", "hvp"]


def _dependency_map(output: Tensor, wrt_ids: set[int]) -> dict[int, bool]:
    """For every ancestor of ``output``: does it depend on any wrt tensor?"""
    depends: dict[int, bool] = {}
    # iterative DFS, states: absent -> unseen, False/True only once finished
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    visiting: set[int] = set()
    while stack:
        t, done = stack.pop()
        ti = id(t)
        if done:
            visiting.discard(ti)
            dep = ti in wrt_ids or any(
                depends.get(id(p), False) for p in t.node.parents
            )
            depends[ti] = dep
            continue
        if ti in depends or ti in visiting:
            continue
        if ti in wrt_ids:
            depends[ti] = True
            continue
        if t.node is None:
            depends[ti] = False
            continue
        visiting.add(ti)
        stack.append((t, True))
        for p in t.node.parents:
            if id(p) not in depends and id(p) not in visiting:
                stack.append((p, False))
    return depends


def _topo_order(output: Tensor, depends: dict[int, bool]) -> list[Tensor]:
    """Op tensors on some output->wrt path, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, done = stack.pop()
        ti = id(t)
        if done:
            order.append(t)
            continue
        if ti in seen or not depends.get(ti, False) or t.node is None:
            continue
        seen.add(ti)
        stack.append((t, True))
        for p in t.node.parents:
            stack.append((p, False))
    return order


def _backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool) -> list[Tensor]:
    wrt_ids = {id(w) for w in wrt}
    depends = _dependency_map(output, wrt_ids)
    order = _topo_order(output, depends)

    grads: dict[int, Tensor] = {id(output): constant(np.ones(output.shape))}

    def accumulate(t: Tensor, g: Tensor) -> None:
        ti = id(t)
        prev = grads.get(ti)
        grads[ti] = g if prev is None else ops.add(prev, g)

    for t in reversed(order):
        g = grads.get(id(t))
        if g is None:
            continue
        for p, vjp in zip(t.node.parents, t.node.vjps):
            if vjp is None or not depends.get(id(p), False):
                continue
            accumulate(p, vjp(g))
        if id(t) not in wrt_ids:
            del grads[id(t)]

    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else constant(np.zeros(w.shape)))
    return out


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradient of a scalar ``output`` w.r.t. one tensor or a sequence.

    The recorded graph is left intact, so repeated calls against the same
    tape are fine.  With ``create_graph=True`` the backward computation is
    itself recorded (a tape must be active), enabling differentiation
    through the returned gradients; otherwise it runs detached.
    """
    if output.size != 1:
        raise GradError(f"grad: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        raise GradError("grad: output is detached from the tape")
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if create_graph:
        if active_tape() is None:
            raise GradError("grad: create_graph=True requires an active tape")
        gs = _backward(output, wrt_list, True)
    else:
        with no_tape():
            gs = _backward(output, wrt_list, False)
    return gs[0] if single else gs


def hvp(loss_fn: Callable[[Tensor], Tensor], at: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of a scalar-valued ``loss_fn``.

    Computed by differentiating the inner product <grad(L), v> once more
    (double backward).  ``loss_fn`` receives a 1-d leaf tensor built from
    ``at`` and must return a scalar tensor.
    """
    at = np.asarray(at, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if at.shape != v.shape:
        raise GradError(f"hvp: shapes {at.shape} and {v.shape} do not conform")
    with Tape():
        x = leaf(at)
        loss = loss_fn(x)
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise GradError("hvp: loss_fn must return a scalar tensor")
        g = grad(loss, x, create_graph=True)
        gv = ops.asum(ops.mul(g, constant(v)))
        if not gv.requires_grad:
            # gradient is constant in the parameters: zero Hessian
            return np.zeros_like(at)
        h = grad(gv, x)
    return h.data.copy()
