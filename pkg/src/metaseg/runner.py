"""Experiment configuration and orchestration.

Configs are plain INI files with one section per module plus any number
of ``[pool.<name>]`` sections.  Parsing is strict: unknown sections or
keys are rejected, every value is type-checked, and the resolved config
is re-serialized into the output directory so a run can always be
reproduced from its artifacts.
"""

from __future__ import annotations

import configparser
import json
import os
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evaluation, meta_gradient, models, tasks
from .evaluation import FinetuneConfig, NaiveConfig
from .inner_loop import InnerConfig
from .losses import LossConfig
from .meta_gradient import CGConfig, OuterConfig
from .models import AttnUNetConfig
from .tasks import EpisodeConfig, SynthFamilyConfig

ALGO_CHOICES = ("imaml", "maml", "naive")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolSpec:
    name: str
    role: str                    # "train" | "holdout"
    kind: str                    # "synthetic" | "dir"
    category: str = "blob"
    count: int = 200
    synth: SynthFamilyConfig | None = None
    path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    algos: tuple[str, ...] = ("imaml", "maml", "naive")
    setup: str = "exclusive"
    seed: int = 0
    threads: int = 1
    timing: str = "off"          # "off" | "wall"
    model: AttnUNetConfig = AttnUNetConfig()
    episode: EpisodeConfig = EpisodeConfig()
    loss: LossConfig = LossConfig()
    inner: InnerConfig = InnerConfig()
    cg: CGConfig = CGConfig()
    outer: OuterConfig = OuterConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    naive: NaiveConfig = NaiveConfig()
    n_eval_tasks: int = 20
    threshold: float = 0.5
    pools: tuple[PoolSpec, ...] = ()

    def train_pools(self) -> list[PoolSpec]:
        return [p for p in self.pools if p.role == "train"]

    def holdout_pool(self) -> PoolSpec:
        hs = [p for p in self.pools if p.role == "holdout"]
        if len(hs) != 1:
            raise ConfigError(f"expected exactly one holdout pool, found {len(hs)}")
        return hs[0]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _cast_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _cast_range_i(s: str) -> tuple[int, int]:
    lo, _, hi = s.partition(":")
    return (int(lo), int(hi or lo))


def _cast_range_f(s: str) -> tuple[float, float]:
    lo, _, hi = s.partition(":")
    return (float(lo), float(hi or lo))


_SCHEMAS: dict[str, dict[str, object]] = {
    "experiment": {
        "name": str, "output_dir": str, "algos": str, "setup": str,
        "seed": int, "threads": int, "timing": str,
    },
    "model": {
        "input_size": int, "base_channels": int, "depth": int,
        "attention_gates": _cast_bool, "in_channels": int,
        "upsample": str, "norm": str,
    },
    "episode": {"n_ways": int, "k_shots": int, "q_queries": int, "num_tasks": int},
    "loss": {"use_logcosh": _cast_bool, "dice_smooth": float, "epsilon": float},
    "inner": {"steps": int, "learning_rate": float, "lambda_prox": float,
              "optimizer": str},
    "cg": {"max_iters": int, "residual_tol": float},
    "outer": {"learning_rate": float, "weight_decay": float, "meta_batch": int,
              "beta1": float, "beta2": float, "eps": float,
              "convergence_delta": float, "convergence_window": int},
    "finetune": {"steps": int, "learning_rate": float, "weight_decay": float,
                 "optimizer": str},
    "naive": {"epochs": int, "batch_size": int, "learning_rate": float,
              "weight_decay": float},
    "eval": {"n_eval_tasks": int, "threshold": float},
}

_POOL_SCHEMA: dict[str, object] = {
    "role": str, "type": str, "category": str, "count": int, "path": str,
    "blob_count": _cast_range_i, "radius": _cast_range_f, "roughness": float,
    "contrast": float, "texture_freq": float, "texture_amp": float,
    "specular_prob": float, "noise_sigma": float, "seed": int,
}


def _section_values(parser: configparser.ConfigParser, section: str,
                    schema: dict) -> dict:
    out = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        if raw == "":
            continue
        try:
            out[key] = schema[key](raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for [{section}] {key} = {raw!r}: {e}") from e
    return out


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return _build_config(parser)


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    return _build_config(parser)


def _build_config(parser: configparser.ConfigParser) -> ExperimentConfig:
    for section in parser.sections():
        if section not in _SCHEMAS and not section.startswith("pool."):
            raise ConfigError(f"unknown section [{section}]")

    def vals(section: str) -> dict:
        if parser.has_section(section):
            return _section_values(parser, section, _SCHEMAS[section])
        return {}

    exp = vals("experiment")
    seed = exp.get("seed", 0)
    algos = tuple(a.strip() for a in exp.get("algos", "imaml,maml,naive").split(",") if a.strip())
    for a in algos:
        if a not in ALGO_CHOICES:
            raise ConfigError(f"unknown algorithm {a!r} (choices: {ALGO_CHOICES})")
    timing = exp.get("timing", "off")
    if timing not in ("off", "wall"):
        raise ConfigError(f"timing must be 'off' or 'wall', got {timing!r}")
    setup = exp.get("setup", "exclusive")

    try:
        model = AttnUNetConfig(seed=seed, **vals("model"))
        episode = EpisodeConfig(seed=seed, setup=setup, **vals("episode"))
        loss = LossConfig(**vals("loss"))
        inner = InnerConfig(**vals("inner"))
        cg = CGConfig(**vals("cg"))
        outer = OuterConfig(total_tasks=episode.num_tasks, **vals("outer"))
        finetune_cfg = FinetuneConfig(**vals("finetune"))
        naive = NaiveConfig(seed=seed, **vals("naive"))
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    ev = vals("eval")

    pools = []
    for section in parser.sections():
        if not section.startswith("pool."):
            continue
        name = section[len("pool."):]
        v = _section_values(parser, section, _POOL_SCHEMA)
        role = v.get("role", "train")
        if role not in ("train", "holdout"):
            raise ConfigError(f"[{section}] role must be train|holdout, got {role!r}")
        kind = v.get("type", "synthetic")
        if kind == "synthetic":
            try:
                synth = SynthFamilyConfig(
                    image_size=model.input_size,
                    blob_count=v.get("blob_count", (1, 3)),
                    radius=v.get("radius", (3.0, 7.0)),
                    boundary_roughness=v.get("roughness", 0.3),
                    contrast=v.get("contrast", 0.8),
                    texture_freq=v.get("texture_freq", 4.0),
                    texture_amp=v.get("texture_amp", 0.15),
                    specular_prob=v.get("specular_prob", 0.0),
                    noise_sigma=v.get("noise_sigma", 0.05),
                    seed=v.get("seed", zlib.crc32(name.encode()) & 0x7FFFFFFF),
                )
            except ValueError as e:
                raise ConfigError(f"[{section}]: {e}") from e
            pools.append(PoolSpec(name=name, role=role, kind=kind,
                                  category=v.get("category", "blob"),
                                  count=v.get("count", 200), synth=synth))
        elif kind == "dir":
            if not v.get("path"):
                raise ConfigError(f"[{section}] type=dir requires a path")
            pools.append(PoolSpec(name=name, role=role, kind=kind,
                                  category=v.get("category", ""),
                                  path=v["path"]))
        else:
            raise ConfigError(f"[{section}] type must be synthetic|dir, got {kind!r}")

    cfg = ExperimentConfig(
        name=exp.get("name", "experiment"),
        output_dir=exp.get("output_dir", "runs/experiment"),
        algos=algos, setup=setup, seed=seed,
        threads=exp.get("threads", 1), timing=timing,
        model=model, episode=episode, loss=loss, inner=inner, cg=cg,
        outer=outer, finetune=finetune_cfg, naive=naive,
        n_eval_tasks=ev.get("n_eval_tasks", 20),
        threshold=ev.get("threshold", 0.5),
        pools=tuple(pools),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if not cfg.pools:
        raise ConfigError("at least one [pool.*] section is required")
    cfg.holdout_pool()
    if not cfg.train_pools():
        raise ConfigError("at least one pool with role = train is required")
    if cfg.setup == "same-category-cross-test":
        cats = {p.category for p in cfg.train_pools()}
        if len(cats) > 1:
            raise ConfigError(
                f"same-category-cross-test requires training pools of one category, got {sorted(cats)}"
            )
        if cfg.holdout_pool().category in cats:
            raise ConfigError(
                "same-category-cross-test requires a holdout pool of a different category"
            )


def to_ini(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(to_ini(c)) == c."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [
        "[experiment]",
        f"name = {cfg.name}",
        f"output_dir = {cfg.output_dir}",
        f"algos = {','.join(cfg.algos)}",
        f"setup = {cfg.setup}",
        f"seed = {cfg.seed}",
        f"threads = {cfg.threads}",
        f"timing = {cfg.timing}",
        "",
        "[model]",
        f"input_size = {cfg.model.input_size}",
        f"base_channels = {cfg.model.base_channels}",
        f"depth = {cfg.model.depth}",
        f"attention_gates = {fmt(cfg.model.attention_gates)}",
        f"in_channels = {cfg.model.in_channels}",
        f"upsample = {cfg.model.upsample}",
        f"norm = {cfg.model.norm}",
        "",
        "[episode]",
        f"n_ways = {cfg.episode.n_ways}",
        f"k_shots = {cfg.episode.k_shots}",
        f"q_queries = {'' if cfg.episode.q_queries is None else cfg.episode.q_queries}",
        f"num_tasks = {cfg.episode.num_tasks}",
        "",
        "[loss]",
        f"use_logcosh = {fmt(cfg.loss.use_logcosh)}",
        f"dice_smooth = {fmt(cfg.loss.dice_smooth)}",
        f"epsilon = {fmt(cfg.loss.epsilon)}",
        "",
        "[inner]",
        f"steps = {cfg.inner.steps}",
        f"learning_rate = {fmt(cfg.inner.learning_rate)}",
        f"lambda_prox = {fmt(cfg.inner.lambda_prox)}",
        f"optimizer = {cfg.inner.optimizer}",
        "",
        "[cg]",
        f"max_iters = {cfg.cg.max_iters}",
        f"residual_tol = {fmt(cfg.cg.residual_tol)}",
        "",
        "[outer]",
        f"learning_rate = {fmt(cfg.outer.learning_rate)}",
        f"weight_decay = {fmt(cfg.outer.weight_decay)}",
        f"meta_batch = {cfg.outer.meta_batch}",
        f"beta1 = {fmt(cfg.outer.beta1)}",
        f"beta2 = {fmt(cfg.outer.beta2)}",
        f"eps = {fmt(cfg.outer.eps)}",
        f"convergence_delta = {fmt(cfg.outer.convergence_delta)}",
        f"convergence_window = {cfg.outer.convergence_window}",
        "",
        "[finetune]",
        f"steps = {cfg.finetune.steps}",
        f"learning_rate = {fmt(cfg.finetune.learning_rate)}",
        f"weight_decay = {fmt(cfg.finetune.weight_decay)}",
        f"optimizer = {cfg.finetune.optimizer}",
        "",
        "[naive]",
        f"epochs = {cfg.naive.epochs}",
        f"batch_size = {cfg.naive.batch_size}",
        f"learning_rate = {fmt(cfg.naive.learning_rate)}",
        f"weight_decay = {fmt(cfg.naive.weight_decay)}",
        "",
        "[eval]",
        f"n_eval_tasks = {cfg.n_eval_tasks}",
        f"threshold = {fmt(cfg.threshold)}",
    ]
    for p in cfg.pools:
        lines += ["", f"[pool.{p.name}]", f"role = {p.role}", f"type = {p.kind}",
                  f"category = {p.category}"]
        if p.kind == "synthetic":
            s = p.synth
            lines += [
                f"count = {p.count}",
                f"blob_count = {s.blob_count[0]}:{s.blob_count[1]}",
                f"radius = {fmt(s.radius[0])}:{fmt(s.radius[1])}",
                f"roughness = {fmt(s.boundary_roughness)}",
                f"contrast = {fmt(s.contrast)}",
                f"texture_freq = {fmt(s.texture_freq)}",
                f"texture_amp = {fmt(s.texture_amp)}",
                f"specular_prob = {fmt(s.specular_prob)}",
                f"noise_sigma = {fmt(s.noise_sigma)}",
                f"seed = {s.seed}",
            ]
        else:
            lines.append(f"path = {p.path}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def build_pools(cfg: ExperimentConfig) -> tuple[list[tasks.DataPool], tasks.DataPool]:
    train, holdout = [], None
    for spec in cfg.pools:
        if spec.kind == "synthetic":
            pool = tasks.generate_pool(spec.synth, spec.count, spec.name, spec.category)
        else:
            pool = tasks.load_pool(spec.path, cfg.model.input_size,
                                   cfg.model.in_channels, spec.name, spec.category)
        if spec.role == "train":
            train.append(pool)
        else:
            holdout = pool
    return train, holdout


def _plan_text(cfg: ExperimentConfig) -> str:
    lines = [
        f"experiment {cfg.name!r}: setup={cfg.setup} seed={cfg.seed} threads={cfg.threads}",
        f"  algos: {', '.join(cfg.algos)}",
        f"  model: {cfg.model.input_size}px base={cfg.model.base_channels} "
        f"depth={cfg.model.depth} gates={cfg.model.attention_gates} "
        f"({models.parameter_count(cfg.model)} parameters)",
        f"  episodes: {cfg.episode.n_ways}-way {cfg.episode.k_shots}-shot, "
        f"{cfg.episode.num_tasks} tasks, meta-batch {cfg.outer.meta_batch}",
        f"  inner: {cfg.inner.steps} steps lr={cfg.inner.learning_rate} "
        f"lambda={cfg.inner.lambda_prox}; cg: {cfg.cg.max_iters} iters",
        f"  eval: {cfg.n_eval_tasks} tasks, fine-tune {cfg.finetune.steps} steps",
    ]
    for p in cfg.pools:
        src = p.path if p.kind == "dir" else f"synthetic n={p.count} seed={p.synth.seed}"
        lines.append(f"  pool {p.name!r} [{p.role}] category={p.category}: {src}")
    lines.append(f"  output: {cfg.output_dir}")
    return "\n".join(lines)


def _log_print(*args) -> None:
    print(*args, flush=True)


def run(config_path, threads: int | None = None, seed: int | None = None,
        dry_run: bool = False, log=_log_print) -> int:
    """Execute a full experiment; returns a process exit code."""
    try:
        cfg = parse_config(config_path)
    except ConfigError as e:
        log(f"config error: {e}")
        return 2
    if seed is not None:
        cfg = replace(cfg, seed=seed,
                      model=replace(cfg.model, seed=seed),
                      episode=replace(cfg.episode, seed=seed),
                      naive=replace(cfg.naive, seed=seed))
    if threads is not None:
        cfg = replace(cfg, threads=max(1, threads))
    env_out = os.environ.get("IMAML_OUT")
    if env_out:
        cfg = replace(cfg, output_dir=env_out)

    log(_plan_text(cfg))
    if dry_run:
        return 0
    try:
        execute(cfg, log=log)
    except Exception as e:
        log(f"error: {e}")
        return 1
    return 0


def execute(cfg: ExperimentConfig, log=_log_print) -> dict:
    """Run all configured algorithms; returns the summary dict."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.ini").write_text(to_ini(cfg))

    train_pools, holdout = build_pools(cfg)
    train_names = tuple(p.name for p in train_pools)
    if holdout.name in train_names:
        raise ValueError(f"holdout pool {holdout.name!r} also used for training")
    eval_seed = cfg.seed + 1001
    eval_tasks = evaluation.build_eval_tasks(holdout, cfg.episode,
                                             cfg.n_eval_tasks, eval_seed)
    timing = cfg.timing == "wall"

    all_reports: list[evaluation.EpisodeReport] = []
    curve_rows: list[tuple[str, int, float]] = []
    diag_rows: list[tuple] = []

    for algo in cfg.algos:
        model = models.init(cfg.model)
        if algo in ("imaml", "maml"):
            result = meta_gradient.meta_train(
                model, train_pools, cfg.episode, cfg.inner, cfg.cg, cfg.outer,
                cfg.loss, algo=algo, threads=cfg.threads, log=log,
            )
            meta_gradient.save_state(outdir / f"{algo}_state.ck", model, result.state)
            curve_rows += [(algo, e, l) for e, l in result.curve]
            diag_rows += [(d.index, algo, d.query_loss, d.support_loss_final,
                           d.cg_iterations, d.peak_tape_nodes) for d in result.diagnostics]
            reports = evaluation.evaluate_on_tasks(
                model, result.state.theta, eval_tasks, cfg.finetune, cfg.loss,
                algo, cfg.setup, cfg.episode.k_shots,
                cg_iters=cfg.cg.max_iters if algo == "imaml" else 0,
                threshold=cfg.threshold, threads=cfg.threads, timing=timing,
            )
        else:
            merged = tasks.merge_pools("+".join(train_names), train_pools)
            params, reports, curve = evaluation.naive_baseline(
                model, merged, holdout, cfg.naive, cfg.loss, cfg.episode,
                cfg.n_eval_tasks, eval_seed, cfg.setup, cfg.threshold,
                cfg.threads, timing, eval_tasks=eval_tasks, log=log,
            )
            models.save_checkpoint(outdir / "naive_params.ck",
                                   cfg.model.canonical_text(), {"theta": params})
            curve_rows += [("naive", e, l) for e, l, _ in curve]
        all_reports += reports
        mean = float(np.mean([r.query_dsc for r in reports])) if reports else float("nan")
        log(f"[{algo}] mean query DSC over {len(reports)} eval tasks: {mean:.4f}")

    evaluation.write_reports(outdir / "reports.csv", all_reports)
    summary = evaluation.summarize(all_reports)
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    curve_lines = ["algo,epoch,mean_query_loss"] + [
        f"{a},{e},{l!r}" for a, e, l in curve_rows
    ]
    (outdir / "loss_curves.csv").write_text("\n".join(curve_lines) + "\n")
    if diag_rows:
        diag_lines = ["task_id,algo,query_loss,support_loss_final,cg_iters,peak_tape_nodes"] + [
            f"{i},{a},{q!r},{s!r},{c},{p}" for i, a, q, s, c, p in diag_rows
        ]
        (outdir / "train_diagnostics.csv").write_text("\n".join(diag_lines) + "\n")
    log(format_summary_table(summary))
    return summary


def format_summary_table(summary: dict) -> str:
    rows = [("algo", "setup", "k", "n", "mean_dsc", "std_dsc", "mean_iou")]
    for key, s in summary.items():
        algo, setup, k = key.split("/")
        rows.append((algo, setup, k, str(s["n_tasks"]),
                     f"{s['mean_dsc']:.4f}", f"{s['std_dsc']:.4f}",
                     f"{s['mean_iou']:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def compare(report_dirs: list) -> tuple[dict, str]:
    """Merge eval reports from several run directories into one table."""
    if not report_dirs:
        raise ValueError("compare: at least one report directory required")
    reports = []
    for d in report_dirs:
        path = Path(d) / "reports.csv"
        if not path.is_file():
            raise ValueError(f"compare: {path} not found")
        reports += evaluation.read_reports(path)
    summary = evaluation.summarize(reports)
    return summary, format_summary_table(summary)


def gen_data(config_path, out_dir, log=_log_print) -> int:
    """Materialize the config's synthetic pools as PNG directories."""
    try:
        cfg = parse_config(config_path)
    except ConfigError as e:
        log(f"config error: {e}")
        return 2
    out = Path(out_dir)
    for spec in cfg.pools:
        if spec.kind != "synthetic":
            log(f"pool {spec.name!r}: type=dir, skipping")
            continue
        pool = tasks.generate_pool(spec.synth, spec.count, spec.name, spec.category)
        manifest = tasks.write_pool(out / spec.name, pool)
        log(f"pool {spec.name!r}: {len(pool)} samples -> {manifest.parent}")
    return 0
