"""Data pools and the episodic N-way K-shot task sampler.

Pools come from two places: a synthetic blob-lesion generator (fast,
seeded, used by the whole desk-scale test bench) and a directory loader
for real image/mask pairs.  Tasks are pure functions of
(pools, episode config, task index), so sampling is reproducible and
trivially parallel.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SETUPS = ("exclusive", "mixed", "same-category-cross-test")


class PoolError(ValueError):
    pass


@dataclass
class DataPool:
    """Images in [-1,1] and binary masks, both (N, C|1, H, W) float64."""

    name: str
    category: str
    images: np.ndarray
    masks: np.ndarray
    source_seed: int | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.masks.shape[0]:
            raise PoolError(
                f"pool {self.name!r}: {self.images.shape[0]} images vs "
                f"{self.masks.shape[0]} masks"
            )
        if self.images.shape[2:] != self.masks.shape[2:]:
            raise PoolError(f"pool {self.name!r}: image/mask spatial sizes differ")

    def __len__(self) -> int:
        return self.images.shape[0]


def merge_pools(name: str, pools: list[DataPool]) -> DataPool:
    return DataPool(
        name=name,
        category="+".join(dict.fromkeys(p.category for p in pools)),
        images=np.concatenate([p.images for p in pools]),
        masks=np.concatenate([p.masks for p in pools]),
    )


# ---------------------------------------------------------------------------
# synthetic lesion families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthFamilyConfig:
    image_size: int = 32
    blob_count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (3.0, 7.0)
    boundary_roughness: float = 0.3
    contrast: float = 0.8
    texture_freq: float = 4.0
    texture_amp: float = 0.15
    specular_prob: float = 0.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.blob_count[0] < 1 or self.blob_count[0] > self.blob_count[1]:
            raise PoolError(f"degenerate blob_count range {self.blob_count}")
        if self.radius[0] <= 0 or self.radius[0] > self.radius[1]:
            raise PoolError(f"degenerate radius range {self.radius}")
        if self.image_size < 8:
            raise PoolError("image_size must be >= 8")


def _smooth_noise(rng: np.random.Generator, size: int, freq: float) -> np.ndarray:
    """Bilinearly upsampled coarse noise; ``freq`` cells across the image."""
    m = max(2, int(round(freq)) + 1)
    grid = rng.normal(size=(m, m))
    t = np.linspace(0.0, m - 1.0, size)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, m - 1)
    f = t - i0
    rows = grid[i0, :] * (1 - f)[:, None] + grid[i1, :] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def _blob_mask(rng: np.random.Generator, cfg: SynthFamilyConfig) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    mask = np.zeros((s, s), dtype=bool)
    for _ in range(int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))):
        cy = rng.uniform(0.2 * s, 0.8 * s)
        cx = rng.uniform(0.2 * s, 0.8 * s)
        ry = rng.uniform(*cfg.radius)
        rx = rng.uniform(*cfg.radius)
        ang = rng.uniform(0.0, np.pi)
        ca, sa = np.cos(ang), np.sin(ang)
        dx, dy = xx - cx, yy - cy
        u = (ca * dx + sa * dy) / rx
        v = (-sa * dx + ca * dy) / ry
        r = np.hypot(u, v)
        theta = np.arctan2(v, u)
        edge = np.ones_like(r)
        if cfg.boundary_roughness > 0:
            amps = rng.normal(0.0, cfg.boundary_roughness / 3.0, size=3)
            phases = rng.uniform(0.0, 2 * np.pi, size=3)
            for k in range(3):
                edge = edge + amps[k] * np.sin((k + 2) * theta + phases[k])
            edge = np.clip(edge, 0.3, None)
        mask |= r <= edge
    return mask


def _render(rng: np.random.Generator, cfg: SynthFamilyConfig, mask: np.ndarray) -> np.ndarray:
    s = cfg.image_size
    img = rng.uniform(-0.15, 0.15) + cfg.texture_amp * _smooth_noise(rng, s, cfg.texture_freq)
    img = img + cfg.contrast * mask.astype(np.float64)
    if cfg.specular_prob > 0 and rng.uniform() < cfg.specular_prob:
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, s, size=2)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            img = img + 1.2 * np.exp(-r2 / (2.0 * 1.2 ** 2))
    if cfg.noise_sigma > 0:
        img = img + cfg.noise_sigma * rng.normal(size=(s, s))
    return np.clip(img, -1.0, 1.0)


def generate_pool(cfg: SynthFamilyConfig, n: int, name: str = "synthetic",
                  category: str = "blob") -> DataPool:
    """``n`` image/mask pairs; empty masks are regenerated, never kept."""
    if n < 1:
        raise PoolError("generate_pool: n must be >= 1")
    images = np.empty((n, 1, cfg.image_size, cfg.image_size))
    masks = np.empty_like(images)
    for i in range(n):
        for attempt in range(64):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i, attempt)))
            m = _blob_mask(rng, cfg)
            if m.any():
                break
        else:  # pragma: no cover - radius >= 1px makes this unreachable
            raise PoolError(f"generate_pool: could not draw a nonempty mask at index {i}")
        images[i, 0] = _render(rng, cfg, m)
        masks[i, 0] = m.astype(np.float64)
    return DataPool(name=name, category=category, images=images, masks=masks,
                    source_seed=cfg.seed)


# ---------------------------------------------------------------------------
# directory loader
# ---------------------------------------------------------------------------

def normalize_image(arr: np.ndarray) -> np.ndarray:
    """uint8-range values -> [-1, 1]."""
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def denormalize_image(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float64) + 1.0) * 127.5


def load_pool(directory, image_size: int, in_channels: int = 1,
              name: str | None = None, category: str = "") -> DataPool:
    """Load ``images/*.png`` + ``masks/*.png`` with matching stems.

    Images are resized to ``image_size`` and normalized to [-1,1]; masks
    are nearest-resized and binarized at 127/255.
    """
    from PIL import Image

    directory = Path(directory)
    img_dir, mask_dir = directory / "images", directory / "masks"
    image_files = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not image_files:
        raise PoolError(f"load_pool: no images found under {img_dir}")
    missing = [p.stem for p in image_files if not (mask_dir / f"{p.stem}.png").exists()]
    if missing:
        raise PoolError(f"load_pool: images without masks: {', '.join(sorted(missing))}")

    images, masks = [], []
    for p in image_files:
        try:
            with Image.open(p) as im:
                im = im.convert("L" if in_channels == 1 else "RGB")
                im = im.resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64)
        except OSError as e:
            raise PoolError(f"load_pool: unreadable image {p}: {e}") from e
        if in_channels == 1:
            arr = arr[None, :, :]
        else:
            arr = arr.transpose(2, 0, 1)
        images.append(normalize_image(arr))
        mp = mask_dir / f"{p.stem}.png"
        try:
            with Image.open(mp) as im:
                im = im.convert("L").resize((image_size, image_size), Image.NEAREST)
                marr = np.asarray(im, dtype=np.float64)
        except OSError as e:
            raise PoolError(f"load_pool: unreadable mask {mp}: {e}") from e
        masks.append((marr > 127).astype(np.float64)[None, :, :])
    return DataPool(
        name=name or directory.name,
        category=category,
        images=np.stack(images),
        masks=np.stack(masks),
    )


def write_pool(directory, pool: DataPool) -> Path:
    """Write a pool as PNG pairs plus a manifest of stems and checksums."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(pool)):
        stem = f"{pool.name}_{i:04d}"
        img = np.clip(denormalize_image(pool.images[i]), 0, 255).astype(np.uint8)
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        mask = (pool.masks[i, 0] > 0.5).astype(np.uint8) * 255
        ipath = directory / "images" / f"{stem}.png"
        mpath = directory / "masks" / f"{stem}.png"
        Image.fromarray(img).save(ipath)
        Image.fromarray(mask).save(mpath)
        isum = hashlib.sha256(ipath.read_bytes()).hexdigest()
        msum = hashlib.sha256(mpath.read_bytes()).hexdigest()
        lines.append(f"{stem} {isum} {msum}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# episodic sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    n_ways: int = 2
    k_shots: int = 5
    q_queries: int | None = None   # None -> mirror k_shots
    num_tasks: int = 50
    setup: str = "exclusive"
    seed: int = 0

    def __post_init__(self):
        if self.k_shots < 1 or self.n_ways < 1 or self.num_tasks < 1:
            raise ValueError("k_shots, n_ways and num_tasks must be >= 1")
        if self.setup not in SETUPS:
            raise ValueError(f"setup must be one of {SETUPS}, got {self.setup!r}")

    @property
    def queries(self) -> int:
        return self.q_queries if self.q_queries is not None else self.k_shots


@dataclass
class Task:
    support_images: np.ndarray
    support_masks: np.ndarray
    query_images: np.ndarray
    query_masks: np.ndarray
    support_tags: tuple[str, ...]
    query_tags: tuple[str, ...]
    support_ids: tuple[tuple[str, int], ...] = field(default=())
    query_ids: tuple[tuple[str, int], ...] = field(default=())
    task_seed: int = 0
    index: int = 0


def sample_task(pools: list[DataPool], cfg: EpisodeConfig, task_index: int) -> Task:
    """Deterministic draw of one support/query episode.

    exclusive: the whole task comes from a single pool, alternating with
    the task index.  mixed (and same-category-cross-test, which only adds
    a category constraint checked at orchestration level): way i draws
    from pool i mod len(pools).  Within a task sampling is without
    replacement, so support and query never share an item.
    """
    if not pools:
        raise PoolError("sample_task: no pools")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, task_index)))
    need = cfg.k_shots + cfg.queries

    if cfg.setup == "exclusive":
        pool = pools[task_index % len(pools)]
        way_pools = [pool] * cfg.n_ways
    else:
        way_pools = [pools[i % len(pools)] for i in range(cfg.n_ways)]
        if cfg.setup == "same-category-cross-test":
            cats = {p.category for p in pools}
            if len(cats) > 1:
                raise PoolError(
                    f"same-category-cross-test: training pools span categories {sorted(cats)}"
                )

    # draw jointly per distinct pool so ways sharing a pool stay disjoint
    by_pool: dict[str, int] = {}
    for p in way_pools:
        by_pool[p.name] = by_pool.get(p.name, 0) + 1
    draws: dict[str, list[int]] = {}
    for p in {p.name: p for p in way_pools}.values():
        total = by_pool[p.name] * need
        if len(p) < total:
            raise PoolError(
                f"sample_task: pool {p.name!r} has {len(p)} items, task needs {total}"
            )
        draws[p.name] = list(rng.choice(len(p), size=total, replace=False))

    sup_i, sup_m, q_i, q_m = [], [], [], []
    sup_tags, q_tags, sup_ids, q_ids = [], [], [], []
    cursor = {name: 0 for name in draws}
    for p in way_pools:
        start = cursor[p.name]
        idx = draws[p.name][start:start + need]
        cursor[p.name] = start + need
        for j in idx[:cfg.k_shots]:
            sup_i.append(p.images[j])
            sup_m.append(p.masks[j])
            sup_tags.append(p.name)
            sup_ids.append((p.name, int(j)))
        for j in idx[cfg.k_shots:]:
            q_i.append(p.images[j])
            q_m.append(p.masks[j])
            q_tags.append(p.name)
            q_ids.append((p.name, int(j)))

    return Task(
        support_images=np.stack(sup_i),
        support_masks=np.stack(sup_m),
        query_images=np.stack(q_i),
        query_masks=np.stack(q_m),
        support_tags=tuple(sup_tags),
        query_tags=tuple(q_tags),
        support_ids=tuple(sup_ids),
        query_ids=tuple(q_ids),
        task_seed=cfg.seed,
        index=task_index,
    )
