import math

import numpy as np
import pytest
import torch

from cmpreid.config import scale_config
from cmpreid.data import (
    IR, RGB, Dataset, IngestionError, InsufficientDataError, Sample,
    augment, compute_stats, export_dataset, hflip, load_dataset,
    make_heatmaps, prefetch, sample_minibatch, synth_generate,
)


@pytest.fixture(scope="module")
def tiny_cfg():
    return scale_config("tiny", num_identities=6)


@pytest.fixture(scope="module")
def small_dataset(tiny_cfg):
    return synth_generate(6, 4, tiny_cfg, seed=123)


class TestSynthGenerate:
    def test_counts(self, tiny_cfg):
        ds = synth_generate(20, 10, tiny_cfg, seed=0)
        assert len(ds) == 400
        assert len(ds.identities()) == 20

    def test_same_seed_byte_identical(self, tiny_cfg):
        a = synth_generate(3, 2, tiny_cfg, seed=9)
        b = synth_generate(3, 2, tiny_cfg, seed=9)
        assert len(a) == len(b)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.equals(sb)

    def test_different_seed_differs(self, tiny_cfg):
        a = synth_generate(3, 2, tiny_cfg, seed=9)
        b = synth_generate(3, 2, tiny_cfg, seed=10)
        assert not all(sa.equals(sb) for sa, sb in zip(a.samples, b.samples))

    def test_paired_renders_share_keypoints(self, small_dataset):
        by_key = {}
        for s in small_dataset.samples:
            by_key.setdefault((s.identity, tuple(s.keypoints[:, :2].ravel())), []).append(s.modality)
        # every pose appears exactly once per modality
        assert all(sorted(v) == [IR, RGB] for v in by_key.values())

    def test_cameras_round_robin(self, small_dataset):
        cams = {s.camera for s in small_dataset.samples if s.modality == RGB}
        assert cams == {0, 1}
        cams_ir = {s.camera for s in small_dataset.samples if s.modality == IR}
        assert cams_ir == {2, 3}

    def test_visible_keypoints_inside_bounds(self, small_dataset, tiny_cfg):
        h, w = tiny_cfg.input_hw
        for s in small_dataset.samples:
            vis = s.keypoints[s.keypoints[:, 2] > 0]
            assert (vis[:, 0] >= 0).all() and (vis[:, 0] <= w - 1).all()
            assert (vis[:, 1] >= 0).all() and (vis[:, 1] <= h - 1).all()

    def test_needs_two_identities(self, tiny_cfg):
        with pytest.raises(ValueError):
            synth_generate(1, 2, tiny_cfg, seed=0)


class TestHeatmaps:
    def test_peak_at_pixel_center(self):
        kps = np.array([[8.0, 4.0, 1.0]])  # scales to (2, 1) on the map
        maps = make_heatmaps(kps, (6, 6), sigma=1.5)
        assert maps[0, 1, 2] == pytest.approx(1.0)

    def test_invisible_keypoint_zero_channel(self):
        kps = np.array([[8.0, 4.0, 0.0]])
        maps = make_heatmaps(kps, (6, 6), sigma=1.5)
        assert maps.sum() == 0.0

    def test_gaussian_value_at_distance(self):
        kps = np.array([[0.0, 0.0, 1.0]])
        maps = make_heatmaps(kps, (8, 8), sigma=2.0)
        assert maps[0, 0, 2] == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_mass_bound_and_peak(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            sigma = rng.uniform(0.5, 3.0)
            kps = np.array([[rng.uniform(0, 47), rng.uniform(0, 95), 1.0]])
            maps = make_heatmaps(kps, (24, 12), sigma=sigma)
            assert maps.max() <= 1.0 + 1e-6
            assert maps[0].sum() <= 2 * math.pi * sigma ** 2 + 1

    def test_peak_is_one_when_on_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, y = rng.integers(0, 12) * 4.0, rng.integers(0, 24) * 4.0
            maps = make_heatmaps(np.array([[x, y, 1.0]]), (24, 12), sigma=1.0)
            assert maps.max() == pytest.approx(1.0, abs=1e-6)


class TestAugment:
    def test_eval_mode_deterministic(self, small_dataset, tiny_cfg):
        s = small_dataset.samples[0]
        a = augment(s, tiny_cfg, small_dataset.stats, False, np.random.default_rng(0))
        b = augment(s, tiny_cfg, small_dataset.stats, False, np.random.default_rng(99))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.keypoints, b.keypoints)

    def test_flip_involution(self, small_dataset, tiny_cfg):
        s = small_dataset.samples[1]
        img1, kps1 = hflip(s.image, s.keypoints, tiny_cfg.flip_pairs)
        img2, kps2 = hflip(img1, kps1, tiny_cfg.flip_pairs)
        assert np.array_equal(img2, s.image)
        assert np.array_equal(kps2, s.keypoints)

    def test_flip_swaps_paired_rows(self, tiny_cfg):
        kps = np.arange(8 * 3, dtype=np.float64).reshape(8, 3)
        _, flipped = hflip(np.zeros((3, 96, 48), dtype=np.float32), kps, tiny_cfg.flip_pairs)
        for a, b in tiny_cfg.flip_pairs:
            assert flipped[a, 1] == kps[b, 1]
            assert flipped[b, 1] == kps[a, 1]

    def test_train_mode_standardized_output_shape(self, small_dataset, tiny_cfg):
        s = small_dataset.samples[2]
        out = augment(s, tiny_cfg, small_dataset.stats, True, np.random.default_rng(3))
        assert out.image.shape == (3, *tiny_cfg.input_hw)
        assert out.image.dtype == np.float32

    def test_resize_scales_keypoints(self, tiny_cfg):
        paper_cfg = scale_config("paper", num_identities=2)
        img = np.zeros((3, 96, 48), dtype=np.float32)
        kps = np.array([[24.0, 48.0, 1.0]])
        s = Sample(img, 0, RGB, 0, keypoints=kps)
        stats = {RGB: compute_stats([s])[RGB]}
        out = augment(s, paper_cfg, stats, False, np.random.default_rng(0))
        assert out.image.shape == (3, 288, 144)
        assert out.keypoints[0, 0] == pytest.approx(72.0)
        assert out.keypoints[0, 1] == pytest.approx(144.0)


class TestSampleMinibatch:
    def test_composition_contract(self, small_dataset, tiny_cfg):
        rng = np.random.default_rng(0)
        batch = sample_minibatch(small_dataset, 4, 2, rng, cfg=tiny_cfg)
        assert batch.images.shape == (16, 3, 96, 48)
        assert batch.heatmaps.shape == (16, 8, 24, 12)
        assert list(batch.modality_tags[:8]) == [RGB] * 8
        assert list(batch.modality_tags[8:]) == [IR] * 8
        labels = batch.labels.numpy()
        assert len(set(labels.tolist())) == 4
        for ident in set(labels.tolist()):
            assert (labels[:8] == ident).sum() == 2
            assert (labels[8:] == ident).sum() == 2

    def test_reproducible_given_rng_state(self, small_dataset, tiny_cfg):
        a = sample_minibatch(small_dataset, 4, 2, np.random.default_rng(5), cfg=tiny_cfg)
        b = sample_minibatch(small_dataset, 4, 2, np.random.default_rng(5), cfg=tiny_cfg)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)
        assert torch.equal(a.heatmaps, b.heatmaps)

    def test_with_replacement_fallback(self, tiny_cfg):
        base = synth_generate(2, 2, tiny_cfg, seed=3)
        batch = sample_minibatch(base, 2, 4, np.random.default_rng(0), cfg=tiny_cfg)
        assert batch.images.shape[0] == 16  # 2 ids x 4 imgs x 2 modalities

    def test_smallest_batch(self, tiny_cfg):
        base = synth_generate(2, 2, tiny_cfg, seed=3)
        batch = sample_minibatch(base, 1, 1, np.random.default_rng(0), cfg=tiny_cfg)
        assert batch.images.shape[0] == 2
        assert batch.labels[0] == batch.labels[1]

    def test_insufficient_identities(self, small_dataset, tiny_cfg):
        with pytest.raises(InsufficientDataError):
            sample_minibatch(small_dataset, 7, 2, np.random.default_rng(0), cfg=tiny_cfg)

    def test_composition_property_over_draws(self, small_dataset, tiny_cfg):
        rng = np.random.default_rng(42)
        for _ in range(50):
            batch = sample_minibatch(small_dataset, 3, 2, rng, cfg=tiny_cfg)
            labels = batch.labels.numpy()
            tags = batch.modality_tags
            assert len(set(labels.tolist())) == 3
            for ident in set(labels.tolist()):
                assert ((labels == ident) & (tags == RGB)).sum() == 2
                assert ((labels == ident) & (tags == IR)).sum() == 2
            assert batch.heatmaps.amax().item() <= 1.0 + 1e-6


class TestPrefetch:
    def test_preserves_sequence(self, small_dataset, tiny_cfg):
        def batches(seed):
            rng = np.random.default_rng(seed)
            for _ in range(6):
                yield sample_minibatch(small_dataset, 2, 2, rng, cfg=tiny_cfg)

        direct = list(batches(1))
        threaded = list(prefetch(batches(1), workers=2))
        assert len(direct) == len(threaded)
        for a, b in zip(direct, threaded):
            assert torch.equal(a.images, b.images)


class TestExportLoad:
    def test_round_trip(self, small_dataset, tmp_path):
        export_dataset(small_dataset, tmp_path)
        loaded = load_dataset(tmp_path, "synthetic")
        assert len(loaded) == len(small_dataset)
        assert loaded.keypoint_count == small_dataset.keypoint_count
        for a, b in zip(small_dataset.samples, loaded.samples):
            assert a.equals(b)
        for m in (RGB, IR):
            assert np.array_equal(loaded.stats[m].mean, small_dataset.stats[m].mean)
            assert np.array_equal(loaded.stats[m].std, small_dataset.stats[m].std)

    def test_sysu_like_layout(self, tmp_path, tiny_cfg):
        ds = synth_generate(3, 2, tiny_cfg, seed=4)
        root = tmp_path / "sysu"
        from PIL import Image
        for cam in range(1, 7):
            for ident in range(3):
                d = root / f"cam{cam}" / f"{ident:04d}"
                d.mkdir(parents=True)
                arr = (ds.samples[ident * 4].image * 255).astype(np.uint8)
                Image.fromarray(arr.transpose(1, 2, 0)).save(d / "0001.png")
        loaded = load_dataset(root, "sysu-like")
        ir_cams = {s.camera for s in loaded.samples if s.modality == IR}
        rgb_cams = {s.camera for s in loaded.samples if s.modality == RGB}
        assert ir_cams == {3, 6}
        assert rgb_cams == {1, 2, 4, 5}

    def test_sysu_missing_camera_dir(self, tmp_path):
        root = tmp_path / "sysu"
        for cam in (1, 2, 3, 4, 5):  # cam6 missing
            (root / f"cam{cam}" / "0001").mkdir(parents=True)
        with pytest.raises(IngestionError, match="cam6"):
            load_dataset(root, "sysu-like")

    def test_regdb_like_layout_with_trials(self, tmp_path, tiny_cfg):
        ds = synth_generate(4, 2, tiny_cfg, seed=5)
        root = tmp_path / "regdb"
        from PIL import Image
        for sub, modality in (("visible", RGB), ("thermal", IR)):
            for ident in range(4):
                d = root / sub / f"{ident:04d}"
                d.mkdir(parents=True)
                src = next(s for s in ds.samples if s.identity == ident and s.modality == modality)
                arr = (src.image * 255).astype(np.uint8)
                if modality == RGB:
                    Image.fromarray(arr.transpose(1, 2, 0)).save(d / "0.png")
                else:
                    Image.fromarray(arr[0], mode="L").save(d / "0.png")
        splits = root / "splits"
        splits.mkdir()
        for t in range(10):
            (splits / f"trial_{t}.txt").write_text("0\n1\n")
        loaded = load_dataset(root, "regdb-like")
        assert loaded.trial_splits is not None and len(loaded.trial_splits) == 10
        assert all(split == {0, 1} for split in loaded.trial_splits)
        ir = [s for s in loaded.samples if s.modality == IR]
        assert all(s.camera == 1 for s in ir)
        # IR image replicated across channels
        assert np.array_equal(ir[0].image[0], ir[0].image[1])

    def test_regdb_missing_trial_file(self, tmp_path):
        root = tmp_path / "regdb"
        (root / "visible" / "0000").mkdir(parents=True)
        (root / "thermal" / "0000").mkdir(parents=True)
        from PIL import Image
        Image.new("RGB", (4, 4)).save(root / "visible" / "0000" / "0.png")
        Image.new("L", (4, 4)).save(root / "thermal" / "0000" / "0.png")
        (root / "splits").mkdir()
        (root / "splits" / "trial_0.txt").write_text("0\n")
        with pytest.raises(IngestionError, match="trial_1"):
            load_dataset(root, "regdb-like")

    def test_counts_reported(self, small_dataset):
        counts = small_dataset.counts()
        assert sum(counts.values()) == len(small_dataset)
        assert counts[(RGB, 0)] == 12  # 6 ids x 4 imgs, even indices
