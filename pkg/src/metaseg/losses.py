"""Segmentation training objective and overlap metrics.

The trainable objective is a compound of pixel-wise binary cross entropy
and a smoothed (log-cosh) dice term, plus one quadratic regularizer that
plays two roles: anchored to a reference vector it is the proximal term
of the task-level problem, un-anchored it is plain weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, constant, ops
from .params import ParamVector


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 100.0
    dice_smooth: float = 1.0
    use_logcosh: bool = True
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))


def _check_shapes(name: str, pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{name}: shapes {pred.shape} and {target.shape} do not conform")


def bce(pred, target, epsilon: float = 1e-7) -> Tensor:
    """Mean binary cross entropy; predictions clamped to [eps, 1-eps]."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes("bce", pred, target)
    p = ops.clip(pred, epsilon, 1.0 - epsilon)
    ll = ops.mul(target, ops.log(p)) + ops.mul(1.0 - target, ops.log(1.0 - p))
    return ops.neg(ops.mean(ll))


def dice_loss(pred, target, smooth: float = 1.0) -> Tensor:
    """Soft dice loss over the flattened batch, with additive smoothing."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes("dice_loss", pred, target)
    inter = ops.asum(ops.mul(pred, target))
    total = ops.asum(pred) + ops.asum(target)
    return 1.0 - ops.div(ops.mul(inter, 2.0) + smooth, total + smooth)


def logcosh_dice(pred, target, smooth: float = 1.0) -> Tensor:
    return ops.log(ops.cosh(dice_loss(pred, target, smooth)))


def data_loss(pred, target, cfg: LossConfig) -> Tensor:
    """BCE plus the configured dice term (no regularizer)."""
    d = logcosh_dice(pred, target, cfg.dice_smooth) if cfg.use_logcosh \
        else dice_loss(pred, target, cfg.dice_smooth)
    return bce(pred, target, cfg.epsilon) + d


def compound_loss(pred, target, params, anchor=None, cfg: LossConfig = LossConfig()) -> Tensor:
    """Full training objective.

    With ``anchor`` present the regularizer is the proximal pull
    0.5*lambda*||params - anchor||^2; absent, it is the weight decay
    lambda*||params||^2.  Parameters and anchor may be flat tensors,
    ParamVectors, or dicts of segment-named tensors (the adaptation-time
    form).  With lambda_reg == 0 the regularizer is skipped entirely, so
    the result is bitwise identical to the bare data loss.
    """
    loss = data_loss(pred, target, cfg)
    if cfg.lambda_reg == 0.0:
        return loss
    return loss + quadratic_penalty(params, anchor, cfg.lambda_reg)


def quadratic_penalty(params, anchor, lam: float) -> Tensor:
    """0.5*lam*||params-anchor||^2, or lam*||params||^2 with no anchor."""
    pairs = _segment_pairs(params, anchor)
    total = None
    for p, a in pairs:
        if a is not None:
            if p.shape != a.shape:
                raise ValueError(
                    f"quadratic_penalty: params/anchor layouts differ ({p.shape} vs {a.shape})"
                )
            d = ops.sub(p, a)
            term = ops.asum(ops.mul(d, d))
        else:
            term = ops.asum(ops.mul(p, p))
        total = term if total is None else ops.add(total, term)
    scale = 0.5 * lam if anchor is not None else lam
    return ops.mul(total, scale)


def _segment_pairs(params, anchor):
    if isinstance(params, dict):
        if anchor is None:
            return [(t, None) for t in params.values()]
        if isinstance(anchor, dict):
            return [(t, anchor[name]) for name, t in params.items()]
        if isinstance(anchor, ParamVector):
            return [(t, constant(anchor.view(name))) for name, t in params.items()]
        raise TypeError(f"unsupported anchor type {type(anchor).__name__}")
    return [(_params_tensor(params), None if anchor is None else _params_tensor(anchor))]


def _params_tensor(p) -> Tensor:
    if isinstance(p, Tensor):
        return p
    if isinstance(p, ParamVector):
        return constant(p.data)
    return constant(np.asarray(p, dtype=np.float64))


# ---------------------------------------------------------------------------
# evaluation metrics (plain numpy, not differentiable)
# ---------------------------------------------------------------------------

def dsc(pred_binary: np.ndarray, target: np.ndarray) -> float:
    """Dice similarity 2|P&T|/(|P|+|T|); 1.0 when both masks are empty."""
    p = np.asarray(pred_binary).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"dsc: shapes {p.shape} and {t.shape} do not conform")
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def iou(pred_binary: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p = np.asarray(pred_binary).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"iou: shapes {p.shape} and {t.shape} do not conform")
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)
