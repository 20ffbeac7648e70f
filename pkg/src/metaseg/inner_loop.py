"""Task-level adaptation: regularized gradient descent from a meta-init.

``adapt`` solves (approximately) the proximal problem

    phi = argmin  L_support(phi) + 0.5 * lambda * ||phi - theta||^2

starting at phi = theta.  The same descent engine also runs the meta-test
fine-tune and anything else that fits parameters to a loss, so those
paths stay bitwise comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .losses import LossConfig, compound_loss
from .params import ParamVector, vector_grad
from .tasks import Task


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at descent step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class InnerConfig:
    steps: int = 10
    learning_rate: float = 1e-2
    lambda_prox: float = 100.0
    optimizer: str = "gd"   # "gd" | "adam"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lambda_prox < 0:
            raise ValueError("lambda_prox must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class InnerResult:
    phi: ParamVector
    support_loss_trace: list[float] = field(default_factory=list)
    converged: bool = False


_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def descend(loss_fn, theta0: ParamVector, steps: int, lr: float,
            optimizer: str = "gd") -> tuple[ParamVector, list[float]]:
    """Minimize ``loss_fn`` (segment tensors -> scalar) from ``theta0``.

    Plain gradient descent by default; ``adam`` keeps first/second moment
    estimates with the usual bias correction.  Raises on non-finite loss,
    carrying the step index.
    """
    phi = theta0.copy()
    trace: list[float] = []
    m = v = None
    for t in range(steps):
        value, g = vector_grad(loss_fn, phi)
        if not np.isfinite(value):
            raise NonFiniteLossError(t, value)
        trace.append(value)
        if optimizer == "gd":
            phi = phi.like(phi.data - lr * g.data)
        else:
            if m is None:
                m = np.zeros_like(g.data)
                v = np.zeros_like(g.data)
            m = _ADAM_B1 * m + (1 - _ADAM_B1) * g.data
            v = _ADAM_B2 * v + (1 - _ADAM_B2) * g.data ** 2
            mh = m / (1 - _ADAM_B1 ** (t + 1))
            vh = v / (1 - _ADAM_B2 ** (t + 1))
            phi = phi.like(phi.data - lr * mh / (np.sqrt(vh) + _ADAM_EPS))
    return phi, trace


def adapt(model: models.SegModel, theta: ParamVector, task: Task,
          cfg: InnerConfig = InnerConfig(),
          loss_cfg: LossConfig = LossConfig()) -> InnerResult:
    """Run the inner loop on a task's support set, anchored at ``theta``."""
    model.params.check_layout(theta, "adapt")
    images, masks = task.support_images, task.support_masks

    def objective(ts):
        pred = models.forward(model, ts, images)
        return compound_loss(
            pred, masks, ts, anchor=theta,
            cfg=_with_lambda(loss_cfg, cfg.lambda_prox),
        )

    phi, trace = descend(objective, theta, cfg.steps, cfg.learning_rate, cfg.optimizer)
    converged = len(trace) >= 2 and abs(trace[-1] - trace[-2]) <= 1e-6 * max(1.0, abs(trace[-2]))
    return InnerResult(phi=phi, support_loss_trace=trace, converged=converged)


def finetune(model: models.SegModel, theta: ParamVector, images: np.ndarray,
             masks: np.ndarray, steps: int, lr: float, weight_decay: float,
             optimizer: str = "gd",
             loss_cfg: LossConfig = LossConfig()) -> tuple[ParamVector, list[float]]:
    """Un-anchored fitting (weight decay only); the meta-test path.

    With weight_decay == 0 this is the exact same computation as ``adapt``
    with lambda_prox == 0 (one shared descent engine, one loss builder).
    """
    def objective(ts):
        pred = models.forward(model, ts, images)
        return compound_loss(pred, masks, ts, anchor=None,
                             cfg=_with_lambda(loss_cfg, weight_decay))

    if steps == 0:
        return theta.copy(), []
    return descend(objective, theta, steps, lr, optimizer)


def _with_lambda(cfg: LossConfig, lam: float) -> LossConfig:
    return LossConfig(lambda_reg=lam, dice_smooth=cfg.dice_smooth,
                      use_logcosh=cfg.use_logcosh, epsilon=cfg.epsilon)
