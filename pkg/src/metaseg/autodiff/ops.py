"""Differentiable primitives over ``Tensor``.

Every vector-Jacobian product below is written in terms of these same
primitives, which is what makes a second differentiation through a
recorded gradient (Hessian-vector products, unrolled meta-gradients)
come out exact.  Pieces of a derivative that are piecewise-constant in
the input (relu/clip masks, max-pool selections) are captured as
detached constants: their contribution to any second derivative is zero
almost everywhere.

Broadcasting is deliberately restricted: elementwise arithmetic accepts
exactly-matching shapes or a Python scalar; any other expansion must go
through the explicit ``broadcast_axes``/``sum_axes`` adjoint pair.
"""

from __future__ import annotations

import numbers

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, constant, record

__all__ = [
    "add", "sub", "mul", "div", "neg",
    "matmul", "transpose", "permute", "reshape",
    "relu", "sigmoid", "log", "exp", "cosh", "sinh", "sqrt", "clip",
    "asum", "mean", "sum_axes", "broadcast_axes",
    "concat", "narrow",
    "im2col", "col2im", "conv2d", "conv_transpose2d",
    "upsample2x", "sumpool2x2", "maxpool2x2",
]


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _is_scalar(x) -> bool:
    return isinstance(x, numbers.Number)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        return record("add", a.data + float(b), (a,), (lambda g: g,))
    _check_same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return record("sub", a.data - float(b), (a,), (lambda g: g,))
    if _is_scalar(a):
        return record("sub", float(a) - b.data, (b,), (lambda g: neg(g),))
    _check_same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), (lambda g: g, lambda g: neg(g)))


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        s = float(b)
        return record("mul", a.data * s, (a,), (lambda g: mul(g, s),))
    _check_same_shape("mul", a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        (lambda g: mul(g, b), lambda g: mul(g, a)),
    )


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    if _is_scalar(a):
        s = float(a)
        return record(
            "div",
            s / b.data,
            (b,),
            (lambda g: neg(div(mul(g, s), mul(b, b))),),
        )
    _check_same_shape("div", a, b)
    return record(
        "div",
        a.data / b.data,
        (a, b),
        (lambda g: div(g, b), lambda g: neg(div(mul(g, a), mul(b, b)))),
    )


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), (lambda g: neg(g),))


# --------------------------------------------------------------------------
# linear algebra and layout
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return record(
        "matmul",
        a.data @ b.data,
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
    )


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inv = tuple(int(i) for i in np.argsort(axes))
    # a strided view; consumers copy only if they must
    return record(
        "permute",
        np.transpose(a.data, axes),
        (a,),
        (lambda g: permute(g, inv),),
    )


def transpose(a: Tensor) -> Tensor:
    return permute(a, (1, 0))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: shapes {a.shape} and {shape} do not conform")
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), (lambda g: reshape(g, old),))


# --------------------------------------------------------------------------
# elementwise nonlinearities
# --------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    xd = a.data
    # mask materialized lazily: inference-only forwards never pay for it
    return record(
        "relu",
        np.maximum(xd, 0.0),
        (a,),
        (lambda g: mul(g, constant((xd > 0).astype(np.float64))),),
    )


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    hole: list[Tensor] = []
    def vjp(g):
        o = hole[0]
        return mul(mul(g, o), sub(1.0, o))
    t = record("sigmoid", out, (a,), (vjp,))
    hole.append(t)
    return t


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.data), (a,), (lambda g: div(g, a),))


def exp(a: Tensor) -> Tensor:
    hole: list[Tensor] = []
    t = record("exp", np.exp(a.data), (a,), (lambda g: mul(g, hole[0]),))
    hole.append(t)
    return t


def cosh(a: Tensor) -> Tensor:
    return record("cosh", np.cosh(a.data), (a,), (lambda g: mul(g, sinh(a)),))


def sinh(a: Tensor) -> Tensor:
    return record("sinh", np.sinh(a.data), (a,), (lambda g: mul(g, cosh(a)),))


def sqrt(a: Tensor) -> Tensor:
    hole: list[Tensor] = []
    t = record("sqrt", np.sqrt(a.data), (a,), (lambda g: mul(div(g, hole[0]), 0.5),))
    hole.append(t)
    return t


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    xd = a.data
    return record(
        "clip",
        np.clip(xd, lo, hi),
        (a,),
        (lambda g: mul(g, constant(((xd > lo) & (xd < hi)).astype(np.float64))),),
    )


# --------------------------------------------------------------------------
# reductions and explicit broadcasting
# --------------------------------------------------------------------------

def asum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    nd = a.ndim
    shape = a.shape
    def vjp(g):
        if nd == 0:
            return g
        return broadcast_axes(reshape(g, (1,) * nd), shape)
    return record("sum", np.asarray(a.data.sum()), (a,), (vjp,))


def mean(a: Tensor) -> Tensor:
    return mul(asum(a), 1.0 / a.size)


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Sum over ``axes`` keeping reduced dims as size 1."""
    axes = tuple(sorted(int(ax) for ax in axes))
    shape = a.shape
    return record(
        "sum_axes",
        a.data.sum(axis=axes, keepdims=True),
        (a,),
        (lambda g: broadcast_axes(g, shape),),
    )


def broadcast_axes(a: Tensor, shape) -> Tensor:
    """Expand size-1 axes of ``a`` to ``shape`` (same rank required)."""
    shape = tuple(int(s) for s in shape)
    if a.ndim != len(shape) or any(
        s not in (1, t) for s, t in zip(a.shape, shape)
    ):
        raise ShapeError(f"broadcast_axes: shapes {a.shape} and {shape} do not conform")
    expanded = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    if not expanded:
        return record("broadcast_axes", a.data.copy(), (a,), (lambda g: g,))
    return record(
        "broadcast_axes",
        np.ascontiguousarray(np.broadcast_to(a.data, shape)),
        (a,),
        (lambda g: sum_axes(g, expanded),),
    )


# --------------------------------------------------------------------------
# concatenation / slicing
# --------------------------------------------------------------------------

def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    def make_vjp(i):
        return lambda g: narrow(g, axis, int(offsets[i]), sizes[i])
    return record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}) out of range for shape {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    total = a.shape[axis]
    shape = a.shape
    def vjp(g):
        parts = []
        if start > 0:
            before = list(shape)
            before[axis] = start
            parts.append(constant(np.zeros(before)))
        parts.append(g)
        if start + length < total:
            after = list(shape)
            after[axis] = total - (start + length)
            parts.append(constant(np.zeros(after)))
        return concat(parts, axis) if len(parts) > 1 else g
    return record(
        "narrow",
        np.ascontiguousarray(a.data[tuple(idx)]),
        (a,),
        (vjp,),
    )


# --------------------------------------------------------------------------
# convolution support: im2col / col2im adjoint pair
#
# Spatial tensors are channels-last (B,H,W,C): patch matrices then reshape
# straight into conv outputs with no axis shuffling on the hot path.
# --------------------------------------------------------------------------

def _out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"im2col: kernel ({kh},{kw}) too large for spatial ({h},{w}) with pad {pad}"
        )
    return oh, ow


def im2col(a: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold (B,H,W,C) into (B*OH*OW, kh*kw*C) patch rows."""
    if a.ndim != 4:
        raise ShapeError(f"im2col: expected 4-d input, got shape {a.shape}")
    b, h, w, c = a.shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    x = a.data
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (B,OH,OW,C,kh,kw) -> rows ordered (kh,kw,C); the one unavoidable copy
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * oh * ow, kh * kw * c
    )
    shape = (b, h, w, c)
    return record(
        "im2col",
        cols,
        (a,),
        (lambda g: col2im(g, shape, kh, kw, stride, pad),),
    )


def col2im(a: Tensor, out_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Scatter-add patch rows back to (B,H,W,C); adjoint of ``im2col``."""
    b, h, w, c = (int(s) for s in out_shape)
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    want = (b * oh * ow, kh * kw * c)
    if a.shape != want:
        raise ShapeError(f"col2im: shapes {a.shape} and {want} do not conform")
    hp, wp = h + 2 * pad, w + 2 * pad
    buf = np.zeros((b, hp, wp, c))
    rows = a.data.reshape(b, oh, ow, kh, kw, c)
    # indices within one (ki,kj) plane are unique, so slice-adds are exact
    for ki in range(kh):
        hi = ki + stride * (oh - 1) + 1
        for kj in range(kw):
            wj = kj + stride * (ow - 1) + 1
            buf[:, ki:hi:stride, kj:wj:stride, :] += rows[:, :, :, ki, kj, :]
    out = buf if not pad else np.ascontiguousarray(buf[:, pad:pad + h, pad:pad + w, :])
    return record(
        "col2im",
        out,
        (a,),
        (lambda g: im2col(g, kh, kw, stride, pad),),
    )


# --------------------------------------------------------------------------
# convolutions (composed from the primitives above)
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution over (B,H,W,Cin), weights (kh,kw,Cin,Cout)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    bs, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh, ow = _out_hw(h, wd, kh, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)                    # (B*L, k*k*Cin)
    out = matmul(cols, reshape(w, (kh * kw * cin, cout)))    # (B*L, Cout)
    out = reshape(out, (bs, oh, ow, cout))
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: shapes {b.shape} and {(cout,)} do not conform")
        out = add(out, broadcast_axes(reshape(b, (1, 1, 1, cout)), out.shape))
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 2-D convolution over (B,H,W,Cin), weights (kh,kw,Cout,Cin)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: shapes {x.shape} and {w.shape} do not conform")
    bs, h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    h2 = (h - 1) * stride + kh
    w2 = (wd - 1) * stride + kw
    xm = reshape(x, (bs * h * wd, cin))
    wm = reshape(w, (kh * kw * cout, cin))
    cols = matmul(xm, transpose(wm))                         # (B*L, k*k*Cout)
    out = col2im(cols, (bs, h2, w2, cout), kh, kw, stride, 0)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: shapes {b.shape} and {(cout,)} do not conform")
        out = add(out, broadcast_axes(reshape(b, (1, 1, 1, cout)), out.shape))
    return out


# --------------------------------------------------------------------------
# resolution changes (channels-last)
# --------------------------------------------------------------------------

def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B,H,W,C)."""
    if a.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-d input, got shape {a.shape}")
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    return record("upsample2x", out, (a,), (lambda g: sumpool2x2(g),))


def sumpool2x2(a: Tensor) -> Tensor:
    """Sum over non-overlapping 2x2 windows; adjoint of ``upsample2x``."""
    if a.ndim != 4 or a.shape[1] % 2 or a.shape[2] % 2:
        raise ShapeError(f"sumpool2x2: expected even 4-d spatial dims, got shape {a.shape}")
    b, h, w, c = a.shape
    out = a.data.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
    return record("sumpool2x2", out, (a,), (lambda g: upsample2x(g),))


def maxpool2x2(a: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows (ties: first index)."""
    if a.ndim != 4 or a.shape[1] % 2 or a.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: expected even 4-d spatial dims, got shape {a.shape}")
    b, h, w, c = a.shape
    win = a.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(b, h // 2, w // 2, 4, c)
    sel = np.zeros_like(win)
    np.put_along_axis(sel, win.argmax(axis=3, keepdims=True), 1.0, axis=3)
    mask = sel.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    mask = np.ascontiguousarray(mask.reshape(b, h, w, c))
    return sumpool2x2(mul(a, constant(mask)))
