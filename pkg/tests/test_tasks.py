import numpy as np
import pytest

from metaseg.tasks import (
    EpisodeConfig, PoolError, SynthFamilyConfig, denormalize_image,
    generate_pool, load_pool, merge_pools, normalize_image, sample_task, write_pool,
)


class TestGenerator:
    def test_determinism(self):
        cfg = SynthFamilyConfig(seed=9)
        a = generate_pool(cfg, 6)
        b = generate_pool(cfg, 6)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.masks, b.masks)

    def test_masks_nonempty_and_binary(self):
        pool = generate_pool(SynthFamilyConfig(seed=1, radius=(2.0, 4.0)), 40)
        for i in range(len(pool)):
            m = pool.masks[i]
            assert m.sum() > 0
            assert set(np.unique(m)) <= {0.0, 1.0}

    def test_images_normalized(self):
        pool = generate_pool(SynthFamilyConfig(seed=2, contrast=1.5), 20)
        assert pool.images.min() >= -1.0 and pool.images.max() <= 1.0

    def test_distinct_configs_distinct_pools(self):
        bright = generate_pool(SynthFamilyConfig(seed=3, contrast=0.9), 30)
        dark = generate_pool(SynthFamilyConfig(seed=3, contrast=-0.9), 30)
        inside_b = np.mean([bright.images[i][bright.masks[i] > 0].mean()
                            - bright.images[i][bright.masks[i] == 0].mean()
                            for i in range(30)])
        inside_d = np.mean([dark.images[i][dark.masks[i] > 0].mean()
                            - dark.images[i][dark.masks[i] == 0].mean()
                            for i in range(30)])
        assert inside_b > 0.3 and inside_d < -0.3

    def test_zero_contrast_family_indistinct(self):
        # fine-grained texture decorrelates within blobs: with no intensity
        # offset, inside/outside means must agree on average
        cfg = SynthFamilyConfig(seed=4, contrast=0.0, texture_freq=16.0,
                                texture_amp=0.15, noise_sigma=0.05)
        pool = generate_pool(cfg, 100)
        diffs = []
        for i in range(100):
            m = pool.masks[i].astype(bool)
            diffs.append(abs(pool.images[i][m].mean() - pool.images[i][~m].mean()))
        assert float(np.mean(diffs)) < 0.05

    def test_degenerate_ranges_rejected(self):
        with pytest.raises(PoolError, match="blob_count"):
            SynthFamilyConfig(blob_count=(3, 1))
        with pytest.raises(PoolError, match="radius"):
            SynthFamilyConfig(radius=(5.0, 2.0))
        with pytest.raises(PoolError, match="n must be"):
            generate_pool(SynthFamilyConfig(), 0)


class TestLoader:
    def _write_pair(self, root, stem, size=16, mask_values=(0, 255)):
        from PIL import Image

        rng = np.random.default_rng(hash(stem) % 2**32)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        img = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
        Image.fromarray(img, "L").save(root / "images" / f"{stem}.png")
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[4:9, 4:9] = mask_values[1]
        Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")

    def test_three_matched_pairs(self, tmp_path):
        for stem in ("a", "b", "c"):
            self._write_pair(tmp_path, stem)
        pool = load_pool(tmp_path, image_size=16)
        assert len(pool) == 3
        assert pool.images.shape == (3, 1, 16, 16)
        assert pool.images.min() >= -1.0 and pool.images.max() <= 1.0

    def test_mask_binarized(self, tmp_path):
        self._write_pair(tmp_path, "x")
        pool = load_pool(tmp_path, image_size=16)
        assert set(np.unique(pool.masks)) == {0.0, 1.0}

    def test_missing_mask_lists_stems(self, tmp_path):
        self._write_pair(tmp_path, "good")
        from PIL import Image
        orphan = np.zeros((8, 8), dtype=np.uint8)
        Image.fromarray(orphan, "L").save(tmp_path / "images" / "orphan.png")
        with pytest.raises(PoolError, match="orphan"):
            load_pool(tmp_path, image_size=16)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(PoolError, match="no images"):
            load_pool(tmp_path, image_size=16)

    def test_resize_to_model_resolution(self, tmp_path):
        self._write_pair(tmp_path, "a", size=24)
        pool = load_pool(tmp_path, image_size=16)
        assert pool.images.shape[2:] == (16, 16)

    def test_normalize_roundtrip(self, rng):
        x = rng.uniform(-1, 1, size=(5, 5))
        back = normalize_image(denormalize_image(x))
        assert np.abs(back - x).max() < 1e-12

    def test_write_then_load_roundtrip(self, tmp_path):
        pool = generate_pool(SynthFamilyConfig(seed=5), 4, name="round")
        manifest = write_pool(tmp_path / "round", pool)
        assert manifest.is_file()
        assert len(manifest.read_text().splitlines()) == 4
        loaded = load_pool(tmp_path / "round", image_size=32)
        # PNG quantizes intensities to 1/127.5 steps; masks are exact
        assert np.abs(loaded.images - pool.images).max() <= (1 / 127.5)
        assert np.array_equal(loaded.masks, pool.masks)


def _two_pools(n=40, size=16):
    a = generate_pool(SynthFamilyConfig(seed=1, image_size=size), n, "alpha", "bright")
    b = generate_pool(SynthFamilyConfig(seed=2, image_size=size, contrast=-0.8),
                      n, "beta", "dark")
    return [a, b]


class TestSampler:
    def test_exclusive_alternates(self):
        pools = _two_pools()
        cfg = EpisodeConfig(n_ways=2, k_shots=3, seed=0, setup="exclusive")
        even = sample_task(pools, cfg, 0)
        odd = sample_task(pools, cfg, 1)
        assert set(even.support_tags) == {"alpha"} and set(even.query_tags) == {"alpha"}
        assert set(odd.support_tags) == {"beta"}

    def test_mixed_contains_both(self):
        pools = _two_pools()
        cfg = EpisodeConfig(n_ways=2, k_shots=5, seed=0, setup="mixed")
        task = sample_task(pools, cfg, 0)
        assert set(task.support_tags) == {"alpha", "beta"}
        assert len(task.support_ids) == 10
        assert len(task.query_ids) == 10

    def test_determinism(self):
        pools = _two_pools()
        cfg = EpisodeConfig(n_ways=2, k_shots=4, seed=7, setup="mixed")
        t1 = sample_task(pools, cfg, 3)
        t2 = sample_task(pools, cfg, 3)
        assert np.array_equal(t1.support_images, t2.support_images)
        assert t1.support_ids == t2.support_ids and t1.query_ids == t2.query_ids

    def test_no_support_query_leakage_over_1000_tasks(self):
        pools = _two_pools(n=30)
        for setup in ("exclusive", "mixed"):
            cfg = EpisodeConfig(n_ways=2, k_shots=3, q_queries=4, seed=5, setup=setup)
            for i in range(500):
                t = sample_task(pools, cfg, i)
                assert not (set(t.support_ids) & set(t.query_ids)), f"{setup} task {i}"

    def test_insufficient_pool(self):
        pools = _two_pools(n=5)
        cfg = EpisodeConfig(n_ways=2, k_shots=5, seed=0, setup="exclusive")
        with pytest.raises(PoolError, match="needs 20"):
            sample_task(pools, cfg, 0)

    def test_cross_test_requires_shared_category(self):
        pools = _two_pools()  # categories bright vs dark
        cfg = EpisodeConfig(n_ways=2, k_shots=2, seed=0,
                            setup="same-category-cross-test")
        with pytest.raises(PoolError, match="categories"):
            sample_task(pools, cfg, 0)
        same = [
            generate_pool(SynthFamilyConfig(seed=1), 30, "p1", "polyp"),
            generate_pool(SynthFamilyConfig(seed=2), 30, "p2", "polyp"),
        ]
        task = sample_task(same, cfg, 0)
        assert set(task.support_tags) == {"p1", "p2"}

    def test_queries_mirror_shots_by_default(self):
        cfg = EpisodeConfig(k_shots=4)
        assert cfg.queries == 4
        assert EpisodeConfig(k_shots=4, q_queries=7).queries == 7

    def test_setup_validated(self):
        with pytest.raises(ValueError, match="setup"):
            EpisodeConfig(setup="bogus")


def test_merge_pools():
    pools = _two_pools(n=10)
    merged = merge_pools("both", pools)
    assert len(merged) == 20
    assert merged.category == "bright+dark"
