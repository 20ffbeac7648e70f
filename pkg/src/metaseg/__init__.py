"""Few-shot binary segmentation with implicit meta-gradients.

A self-contained numpy stack: reverse-mode autodiff with double-backward
support, an attention-gated encoder-decoder, compound segmentation
losses, episodic task sampling, conjugate-gradient implicit
meta-gradients with an unrolled second-order baseline, and an
experiment runner.
"""

from . import autodiff, evaluation, inner_loop, losses, meta_gradient, models, params, tasks

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "evaluation",
    "inner_loop",
    "losses",
    "meta_gradient",
    "models",
    "params",
    "tasks",
    "__version__",
]
