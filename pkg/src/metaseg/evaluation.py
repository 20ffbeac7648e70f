"""Meta-testing and the naive supervised baseline.

Both consume the same frozen list of evaluation episodes and the same
scoring path, so algorithm comparisons differ only in the parameters
they bring: meta-learned initializations get a few fine-tune steps on
each episode's support set, the naive baseline is scored zero-shot.
Fine-tuning sees only support data; query masks enter at metric time.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import models
from .inner_loop import finetune
from .losses import LossConfig, compound_loss, dsc, iou
from .params import ParamVector, vector_grad
from .tasks import DataPool, EpisodeConfig, Task, sample_task


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 10
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    optimizer: str = "gd"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class NaiveConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpisodeReport:
    task_id: int
    algo: str
    setup: str
    k_shots: int
    support_loss_final: float
    query_dsc: float
    query_iou: float
    cg_iters_used: int
    wall_time_ms: int

    def __post_init__(self):
        for name in ("query_dsc", "query_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} = {v} outside [0, 1]")


CSV_HEADER = ("task_id,algo,setup,k_shots,support_loss_final,"
              "query_dsc,query_iou,cg_iters_used,wall_time_ms")


def write_reports(path, reports: list[EpisodeReport]) -> None:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.task_id},{r.algo},{r.setup},{r.k_shots},{r.support_loss_final!r},"
            f"{r.query_dsc!r},{r.query_iou!r},{r.cg_iters_used},{r.wall_time_ms}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_reports(path) -> list[EpisodeReport]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected report schema "
                         f"(header {lines[0]!r} != {CSV_HEADER!r})")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        f = line.split(",")
        out.append(EpisodeReport(int(f[0]), f[1], f[2], int(f[3]), float(f[4]),
                                 float(f[5]), float(f[6]), int(f[7]), int(f[8])))
    return out


def summarize(reports: list[EpisodeReport]) -> dict:
    """Per (algo, setup, k_shots): mean/stddev DSC and IoU plus task count."""
    groups: dict[tuple, list[EpisodeReport]] = {}
    for r in reports:
        groups.setdefault((r.algo, r.setup, r.k_shots), []).append(r)
    out = {}
    for key in sorted(groups):
        rs = groups[key]
        d = np.array([r.query_dsc for r in rs])
        j = np.array([r.query_iou for r in rs])
        out["/".join(str(k) for k in key)] = {
            "mean_dsc": float(d.mean()),
            "std_dsc": float(d.std()),
            "mean_iou": float(j.mean()),
            "std_iou": float(j.std()),
            "n_tasks": len(rs),
        }
    return out


# ---------------------------------------------------------------------------
# episode scoring
# ---------------------------------------------------------------------------

def build_eval_tasks(holdout: DataPool, episode_cfg: EpisodeConfig,
                     n_eval_tasks: int, eval_seed: int) -> list[Task]:
    """A frozen episode list on the held-out pool, shared by all algorithms."""
    cfg = replace(episode_cfg, setup="exclusive", seed=eval_seed,
                  num_tasks=max(n_eval_tasks, 1))
    return [sample_task([holdout], cfg, i) for i in range(n_eval_tasks)]


def evaluate_episode(model: models.SegModel, params: ParamVector, task: Task,
                     ft_cfg: FinetuneConfig, loss_cfg: LossConfig,
                     algo: str, setup: str, k_shots: int, cg_iters: int = 0,
                     threshold: float = 0.5, timing: bool = False) -> EpisodeReport:
    """Fine-tune on support (if steps > 0), predict query, score overlap."""
    t0 = time.perf_counter() if timing else 0.0
    fitted, _ = finetune(model, params, task.support_images, task.support_masks,
                         ft_cfg.steps, ft_cfg.learning_rate, ft_cfg.weight_decay,
                         ft_cfg.optimizer, loss_cfg)
    support_pred = models.predict(model, fitted, task.support_images)
    support_loss = float(compound_loss(
        support_pred, task.support_masks, fitted, None,
        cfg=replace(loss_cfg, lambda_reg=ft_cfg.weight_decay)).data)
    probs = models.predict(model, fitted, task.query_images)
    binary = probs >= threshold
    per_image_dsc = [dsc(binary[i], task.query_masks[i]) for i in range(binary.shape[0])]
    per_image_iou = [iou(binary[i], task.query_masks[i]) for i in range(binary.shape[0])]
    ms = int(round((time.perf_counter() - t0) * 1e3)) if timing else 0
    return EpisodeReport(
        task_id=task.index, algo=algo, setup=setup, k_shots=k_shots,
        support_loss_final=support_loss,
        query_dsc=float(np.mean(per_image_dsc)),
        query_iou=float(np.mean(per_image_iou)),
        cg_iters_used=cg_iters,
        wall_time_ms=ms,
    )


def evaluate_on_tasks(model: models.SegModel, params: ParamVector, tasks: list[Task],
                      ft_cfg: FinetuneConfig, loss_cfg: LossConfig, algo: str,
                      setup: str, k_shots: int, cg_iters: int = 0,
                      threshold: float = 0.5, threads: int = 1,
                      timing: bool = False) -> list[EpisodeReport]:
    def run(task: Task) -> EpisodeReport:
        return evaluate_episode(model, params, task, ft_cfg, loss_cfg, algo, setup,
                                k_shots, cg_iters, threshold, timing)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, tasks))
    return [run(t) for t in tasks]


def meta_test(model: models.SegModel, theta: ParamVector, holdout: DataPool,
              ft_cfg: FinetuneConfig, episode_cfg: EpisodeConfig,
              loss_cfg: LossConfig, n_eval_tasks: int = 20, eval_seed: int = 1001,
              train_pool_names: tuple[str, ...] = (), algo: str = "imaml",
              setup: str = "exclusive", cg_iters: int = 0, threshold: float = 0.5,
              threads: int = 1, timing: bool = False,
              eval_tasks: list[Task] | None = None) -> list[EpisodeReport]:
    """Few-shot fine-tune + inference on episodes from an unseen pool."""
    if holdout.name in train_pool_names:
        raise ValueError(
            f"meta_test: holdout pool {holdout.name!r} was used for training"
        )
    if len(holdout) < episode_cfg.n_ways * (episode_cfg.k_shots + episode_cfg.queries):
        raise ValueError(
            f"meta_test: holdout pool {holdout.name!r} too small "
            f"({len(holdout)} items) for the episode size"
        )
    tasks = eval_tasks if eval_tasks is not None else build_eval_tasks(
        holdout, episode_cfg, n_eval_tasks, eval_seed)
    return evaluate_on_tasks(model, theta, tasks, ft_cfg, loss_cfg, algo, setup,
                             episode_cfg.k_shots, cg_iters, threshold, threads, timing)


# ---------------------------------------------------------------------------
# naive supervised baseline
# ---------------------------------------------------------------------------

def train_supervised(model: models.SegModel, theta0: ParamVector, pool: DataPool,
                     cfg: NaiveConfig, loss_cfg: LossConfig,
                     log=None) -> tuple[ParamVector, list[tuple[int, float, float]]]:
    """Minibatch Adam on the compound loss (weight decay, no anchor).

    Returns the fitted parameters and a per-epoch curve of
    (epoch, mean batch loss, train DSC on a fixed probe subset).
    """
    rng = np.random.default_rng(cfg.seed)
    params = theta0.copy()
    lcfg = replace(loss_cfg, lambda_reg=cfg.weight_decay)
    m = np.zeros_like(params.data)
    v = np.zeros_like(params.data)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    probe = slice(0, min(32, len(pool)))
    curve: list[tuple[int, float, float]] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pool))
        losses = []
        for start in range(0, len(pool), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images, masks = pool.images[idx], pool.masks[idx]

            def objective(ts):
                return compound_loss(models.forward(model, ts, images), masks,
                                     ts, None, lcfg)

            value, g = vector_grad(objective, params)
            losses.append(value)
            step += 1
            m = b1 * m + (1 - b1) * g.data
            v = b2 * v + (1 - b2) * g.data ** 2
            mh = m / (1 - b1 ** step)
            vh = v / (1 - b2 ** step)
            params = params.like(params.data - cfg.learning_rate * mh / (np.sqrt(vh) + eps))
        probs = models.predict(model, params, pool.images[probe])
        train_dsc = float(np.mean([
            dsc(probs[i] >= 0.5, pool.masks[probe][i]) for i in range(probs.shape[0])
        ]))
        curve.append((epoch + 1, float(np.mean(losses)), train_dsc))
        if log is not None:
            log(f"[naive] epoch {epoch + 1}/{cfg.epochs}: loss {np.mean(losses):.4f} "
                f"train DSC {train_dsc:.3f}")
    return params, curve


def naive_baseline(model: models.SegModel, train_pool: DataPool, holdout: DataPool,
                   cfg: NaiveConfig, loss_cfg: LossConfig,
                   episode_cfg: EpisodeConfig, n_eval_tasks: int = 20,
                   eval_seed: int = 1001, setup: str = "exclusive",
                   threshold: float = 0.5, threads: int = 1, timing: bool = False,
                   eval_tasks: list | None = None,
                   log=None) -> tuple[ParamVector, list[EpisodeReport], list]:
    """Supervised training on the pool, then zero-shot scoring on the holdout."""
    if holdout.name == train_pool.name:
        raise ValueError("naive_baseline: holdout pool equals the training pool")
    params, curve = train_supervised(model, model.params, train_pool, cfg, loss_cfg, log)
    tasks = eval_tasks if eval_tasks is not None else build_eval_tasks(
        holdout, episode_cfg, n_eval_tasks, eval_seed)
    zero_shot = FinetuneConfig(steps=0, learning_rate=1e-3,
                               weight_decay=cfg.weight_decay)
    reports = evaluate_on_tasks(model, params, tasks, zero_shot, loss_cfg, "naive",
                                setup, episode_cfg.k_shots, 0, threshold, threads, timing)
    return params, reports, curve
