"""Outer-level optimization: implicit and unrolled meta-gradients.

Two routes to d L_query(phi(theta)) / d theta:

  implicit: phi is an (approximate) stationary point of the proximal
    inner problem, so the meta-gradient solves
    (I + H/lambda) x = grad_query  with H the support-loss Hessian at
    phi.  The system is applied matrix-free through Hessian-vector
    products and solved by conjugate gradient; tape memory stays bounded
    by a single forward/backward regardless of inner step count.

  unrolled: differentiate the query loss through every recorded inner
    descent step back to theta (the classic second-order baseline); tape
    memory grows linearly with the step count.

The outer update is Adam with decoupled weight decay over the averaged
per-task meta-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import models
from .autodiff import Tape, collect_tape_stats, grad, ops
from .inner_loop import InnerConfig, InnerResult, adapt
from .losses import LossConfig, data_loss, quadratic_penalty
from .params import ParamVector, leaf_tensors, vector_grad, vector_hvp
from .tasks import DataPool, EpisodeConfig, Task, sample_task

MAX_UNROLL_STEPS = 25

ALGORITHMS = ("imaml", "maml")


class CGBreakdownError(RuntimeError):
    pass


@dataclass(frozen=True)
class CGConfig:
    max_iters: int = 5
    residual_tol: float = 1e-10   # absolute, on ||r||^2

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_sq: float
    residual_trace: list[float]


def conjugate_gradient(apply_a, b: np.ndarray, cfg: CGConfig = CGConfig()) -> CGResult:
    """Standard CG from x0 = 0 for a symmetric positive-definite operator.

    Stops at ``max_iters`` or when ||r||^2 falls below ``residual_tol``.
    A non-positive curvature p'Ap aborts with a hint to raise the damping.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    trace = [rs]
    iters = 0
    for _ in range(cfg.max_iters):
        if rs <= cfg.residual_tol:
            break
        ap = np.asarray(apply_a(p), dtype=np.float64)
        pap = float(p @ ap)
        if not np.isfinite(pap):
            raise CGBreakdownError("conjugate_gradient: non-finite curvature")
        if pap <= 0.0:
            raise CGBreakdownError(
                "conjugate_gradient: operator not positive definite "
                f"(p'Ap = {pap:.3e}); consider a larger lambda"
            )
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        trace.append(rs)
        iters += 1
    return CGResult(x=x, iterations=iters, residual_sq=rs, residual_trace=trace)


# ---------------------------------------------------------------------------
# generic cores (model-free; the oracle tests exercise these directly)
# ---------------------------------------------------------------------------

def implicit_gradient(support_loss_fn, query_grad: ParamVector, phi: ParamVector,
                      lam: float, cg_cfg: CGConfig) -> tuple[ParamVector, CGResult | None]:
    """Solve (I + H/lambda) x = query_grad at ``phi``.

    ``support_loss_fn`` maps segment tensors to the *unregularized*
    support loss; the proximal term's Hessian is exactly lambda*I and is
    folded in analytically.  With max_iters == 0 the query gradient is
    returned unchanged (the first-order approximation).
    """
    if lam <= 0:
        raise ValueError("implicit_gradient: lambda must be > 0")
    if cg_cfg.max_iters == 0:
        return query_grad.copy(), None

    def apply_a(v: np.ndarray) -> np.ndarray:
        hv = vector_hvp(support_loss_fn, phi, phi.like(v))
        return v + hv.data / lam

    result = conjugate_gradient(apply_a, query_grad.data, cg_cfg)
    return query_grad.like(result.x), result


def unrolled_gradient(data_loss_fn, query_loss_fn, theta: ParamVector,
                      steps: int, lr: float, lam: float,
                      ) -> tuple[ParamVector, float, list[float]]:
    """Differentiate the query loss through ``steps`` inner GD steps.

    The inner objective is data_loss(phi) + 0.5*lam*||phi - theta||^2,
    matching what ``adapt`` descends; every step is recorded on one tape
    and the final query loss is pulled back to theta.
    """
    if steps > MAX_UNROLL_STEPS:
        raise ValueError(
            f"unrolled_gradient: {steps} inner steps exceed the cap of {MAX_UNROLL_STEPS}"
        )
    names = [seg.name for seg in theta.segments]
    trace: list[float] = []
    with Tape():
        tleaves = leaf_tensors(theta)
        ordered = [tleaves[n] for n in names]
        phi = dict(tleaves)
        for _ in range(steps):
            loss = data_loss_fn(phi)
            if lam > 0:
                loss = ops.add(loss, quadratic_penalty(phi, tleaves, lam))
            trace.append(float(loss.data))
            gs = grad(loss, [phi[n] for n in names], create_graph=True)
            phi = {n: ops.sub(phi[n], ops.mul(g, lr)) for n, g in zip(names, gs)}
        qloss = query_loss_fn(phi)
        metas = grad(qloss, ordered)
    flat = np.concatenate([m.data.reshape(-1) for m in metas])
    return theta.like(flat), float(qloss.data), trace


# ---------------------------------------------------------------------------
# model-level wrappers
# ---------------------------------------------------------------------------

@dataclass
class MetaGradResult:
    grad: ParamVector
    query_loss: float
    support_loss_final: float
    cg_iterations: int
    peak_tape_nodes: int
    inner: InnerResult | None = None


def implicit_meta_grad(model: models.SegModel, theta: ParamVector, task: Task,
                       inner_cfg: InnerConfig = InnerConfig(),
                       cg_cfg: CGConfig = CGConfig(),
                       loss_cfg: LossConfig = LossConfig()) -> MetaGradResult:
    """iMAML meta-gradient for one task: adapt, then CG-solve the implicit system."""
    if inner_cfg.lambda_prox <= 0:
        raise ValueError("implicit_meta_grad: lambda_prox must be > 0")
    with collect_tape_stats() as stats:
        inner = adapt(model, theta, task, inner_cfg, loss_cfg)

        def support_fn(ts):
            return data_loss(models.forward(model, ts, task.support_images),
                             task.support_masks, loss_cfg)

        def query_fn(ts):
            return data_loss(models.forward(model, ts, task.query_images),
                             task.query_masks, loss_cfg)

        qval, gq = vector_grad(query_fn, inner.phi)
        meta, cg_result = implicit_gradient(
            support_fn, gq, inner.phi, inner_cfg.lambda_prox, cg_cfg
        )
    return MetaGradResult(
        grad=meta,
        query_loss=qval,
        support_loss_final=inner.support_loss_trace[-1] if inner.support_loss_trace else float("nan"),
        cg_iterations=cg_result.iterations if cg_result else 0,
        peak_tape_nodes=stats.peak_nodes,
        inner=inner,
    )


def unrolled_meta_grad(model: models.SegModel, theta: ParamVector, task: Task,
                       inner_cfg: InnerConfig = InnerConfig(),
                       loss_cfg: LossConfig = LossConfig()) -> MetaGradResult:
    """MAML meta-gradient for one task: exact differentiation through the inner path."""
    def support_fn(ts):
        return data_loss(models.forward(model, ts, task.support_images),
                         task.support_masks, loss_cfg)

    def query_fn(ts):
        return data_loss(models.forward(model, ts, task.query_images),
                         task.query_masks, loss_cfg)

    with collect_tape_stats() as stats:
        meta, qval, trace = unrolled_gradient(
            support_fn, query_fn, theta,
            inner_cfg.steps, inner_cfg.learning_rate, inner_cfg.lambda_prox,
        )
    return MetaGradResult(
        grad=meta,
        query_loss=qval,
        support_loss_final=trace[-1] if trace else float("nan"),
        cg_iterations=0,
        peak_tape_nodes=stats.peak_nodes,
    )


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 5e-4
    meta_batch: int = 4
    total_tasks: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    convergence_delta: float = 1e-3
    convergence_window: int = 10

    def __post_init__(self):
        if min(self.learning_rate, self.eps) <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and eps must be > 0, weight_decay >= 0")
        if self.meta_batch < 1 or self.total_tasks < 1 or self.convergence_window < 1:
            raise ValueError("meta_batch, total_tasks and convergence_window must be >= 1")


@dataclass
class MetaState:
    theta: ParamVector
    m: ParamVector
    v: ParamVector
    step: int = 0
    tasks_seen: int = 0
    seed: int = 0
    loss_window: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, theta: ParamVector, seed: int = 0) -> "MetaState":
        return cls(theta=theta.copy(), m=theta.zeros_like(), v=theta.zeros_like(), seed=seed)


def outer_step(state: MetaState, meta_grads: list[ParamVector], cfg: OuterConfig,
               mean_query_loss: float | None = None,
               tasks_in_batch: int | None = None) -> MetaState:
    """One Adam update (decoupled weight decay) on the averaged meta-gradients."""
    if not meta_grads:
        raise ValueError("outer_step: no meta-gradients")
    for g in meta_grads:
        state.theta.check_layout(g, "outer_step")
    g = np.mean([mg.data for mg in meta_grads], axis=0)
    t = state.step + 1
    m = cfg.beta1 * state.m.data + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v.data + (1 - cfg.beta2) * g * g
    mh = m / (1 - cfg.beta1 ** t)
    vh = v / (1 - cfg.beta2 ** t)
    theta = state.theta.data - cfg.learning_rate * (
        mh / (np.sqrt(vh) + cfg.eps) + cfg.weight_decay * state.theta.data
    )
    window = list(state.loss_window)
    if mean_query_loss is not None:
        window.append(float(mean_query_loss))
        window = window[-cfg.convergence_window:]
    return MetaState(
        theta=state.theta.like(theta),
        m=state.m.like(m),
        v=state.v.like(v),
        step=t,
        tasks_seen=state.tasks_seen + (tasks_in_batch if tasks_in_batch is not None else len(meta_grads)),
        seed=state.seed,
        loss_window=window,
    )


def has_converged(state: MetaState, cfg: OuterConfig) -> bool:
    """Windowed query loss moved by no more than the configured delta."""
    w = state.loss_window
    return len(w) >= cfg.convergence_window and (max(w) - min(w)) <= cfg.convergence_delta


@dataclass
class TaskDiagnostics:
    index: int
    query_loss: float
    support_loss_final: float
    cg_iterations: int
    peak_tape_nodes: int


@dataclass
class MetaTrainResult:
    state: MetaState
    curve: list[tuple[int, float]]          # (outer update ordinal, mean query loss)
    converged: bool
    diagnostics: list[TaskDiagnostics]


def meta_train(model: models.SegModel, pools: list[DataPool],
               episode_cfg: EpisodeConfig,
               inner_cfg: InnerConfig = InnerConfig(),
               cg_cfg: CGConfig = CGConfig(),
               outer_cfg: OuterConfig = OuterConfig(),
               loss_cfg: LossConfig = LossConfig(),
               algo: str = "imaml",
               threads: int = 1,
               log=None) -> MetaTrainResult:
    """Episodic meta-training until the task budget or convergence.

    Per-task meta-gradients within a batch are independent and can be
    computed on a thread pool; results are merged in task order, so the
    outcome does not depend on the thread count.
    """
    if algo not in ALGORITHMS:
        raise ValueError(f"algo must be one of {ALGORITHMS}, got {algo!r}")
    state = MetaState.fresh(model.params, seed=episode_cfg.seed)
    total = min(outer_cfg.total_tasks, episode_cfg.num_tasks)
    curve: list[tuple[int, float]] = []
    diags: list[TaskDiagnostics] = []
    converged = False
    next_index = 0

    def one_task(index: int) -> MetaGradResult:
        task = sample_task(pools, episode_cfg, index)
        try:
            if algo == "imaml":
                return implicit_meta_grad(model, state.theta, task, inner_cfg, cg_cfg, loss_cfg)
            return unrolled_meta_grad(model, state.theta, task, inner_cfg, loss_cfg)
        except Exception as e:
            raise RuntimeError(f"task {index}: {e}") from e

    while state.tasks_seen < total:
        batch = list(range(next_index, min(next_index + outer_cfg.meta_batch, total)))
        next_index = batch[-1] + 1
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(one_task, batch))
        else:
            results = [one_task(i) for i in batch]
        for idx, r in zip(batch, results):
            diags.append(TaskDiagnostics(idx, r.query_loss, r.support_loss_final,
                                         r.cg_iterations, r.peak_tape_nodes))
        mean_q = float(np.mean([r.query_loss for r in results]))
        state = outer_step(state, [r.grad for r in results], outer_cfg, mean_q,
                           tasks_in_batch=len(batch))
        curve.append((state.step, mean_q))
        if log is not None:
            log(f"[{algo}] update {state.step}: tasks {state.tasks_seen}/{total} "
                f"mean query loss {mean_q:.4f}")
        if has_converged(state, outer_cfg):
            converged = True
            break
    return MetaTrainResult(state=state, curve=curve, converged=converged, diagnostics=diags)


# ---------------------------------------------------------------------------
# state checkpointing (models' container format plus moment vectors)
# ---------------------------------------------------------------------------

def save_state(path, model: models.SegModel, state: MetaState) -> None:
    lines = [
        model.config.canonical_text(),
        f"state.step={state.step}",
        f"state.tasks_seen={state.tasks_seen}",
        f"state.seed={state.seed}",
        "state.loss_window=" + ",".join(repr(x) for x in state.loss_window),
    ]
    models.save_checkpoint(path, "\n".join(lines),
                           {"theta": state.theta, "m": state.m, "v": state.v})


def load_state(path) -> tuple[models.AttnUNetConfig, MetaState]:
    config_text, vectors = models.load_checkpoint(path)
    cfg_lines, meta = [], {}
    for line in config_text.splitlines():
        if line.startswith("state."):
            k, _, v = line.partition("=")
            meta[k[len("state."):]] = v
        else:
            cfg_lines.append(line)
    config = models.AttnUNetConfig.from_text("\n".join(cfg_lines))
    window = [float(x) for x in meta.get("loss_window", "").split(",") if x]
    state = MetaState(
        theta=vectors["theta"], m=vectors["m"], v=vectors["v"],
        step=int(meta.get("step", 0)),
        tasks_seen=int(meta.get("tasks_seen", 0)),
        seed=int(meta.get("seed", 0)),
        loss_window=window,
    )
    return config, state
