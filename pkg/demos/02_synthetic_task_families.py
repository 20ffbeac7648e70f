"""Synthetic lesion families and episodic task sampling.

Each family is a seeded generator config (blob counts, radii, contrast,
texture); a pool is a frozen draw of image/mask pairs, and tasks are
pure functions of (pools, episode config, index).
"""

import numpy as np

from metaseg.tasks import EpisodeConfig, SynthFamilyConfig, generate_pool, sample_task

bright = generate_pool(
    SynthFamilyConfig(image_size=32, contrast=0.75, radius=(4, 8), seed=101),
    n=100, name="bright", category="blob")
dark = generate_pool(
    SynthFamilyConfig(image_size=32, contrast=-0.75, radius=(3, 6), seed=102),
    n=100, name="dark", category="blob")

for pool in (bright, dark):
    inside = np.mean([pool.images[i][pool.masks[i] > 0].mean() for i in range(50)])
    outside = np.mean([pool.images[i][pool.masks[i] == 0].mean() for i in range(50)])
    area = np.mean([pool.masks[i].mean() for i in range(50)])
    print(f"{pool.name:>6}: lesion {inside:+.2f} vs background {outside:+.2f}, "
          f"mean mask area {100 * area:.1f}%")

# a quick ASCII look at one sample
img, mask = bright.images[0, 0], bright.masks[0, 0]
shades = " .:-=+*#%@"
for r in range(0, 32, 2):
    row = "".join(shades[int((img[r, c] + 1) / 2 * 9.99)] for c in range(0, 32, 2))
    edge = "".join("#" if mask[r, c] else "." for c in range(0, 32, 2))
    print(f"  {row}   {edge}")

# --- episodic sampling ------------------------------------------------------
cfg = EpisodeConfig(n_ways=2, k_shots=5, setup="exclusive", seed=7)
for i in range(4):
    t = sample_task([bright, dark], cfg, i)
    print(f"task {i} (exclusive): tags {sorted(set(t.support_tags))}, "
          f"support {len(t.support_ids)}, query {len(t.query_ids)}")

mixed = sample_task([bright, dark], EpisodeConfig(setup="mixed", seed=7), 0)
print("task 0 (mixed): tags", sorted(set(mixed.support_tags)))

# support and query never share an item
t = sample_task([bright, dark], cfg, 0)
print("support/query overlap ->", set(t.support_ids) & set(t.query_ids))
