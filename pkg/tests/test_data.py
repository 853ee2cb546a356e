import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sptune.data import (DataConfig, DatasetPair, add_gaussian_noise, augment, bicubic_resize, crop_pair,
                         generate_pairs, load_dataset, make_pair, make_scene, read_manifest, read_ppm,
                         sample_patch, write_dataset, write_ppm)
from sptune.masks import oracle_segment


class TestScene:
    def test_deterministic(self):
        a, b = make_scene(5), make_scene(5)
        assert a.hq.tobytes() == b.hq.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_seeds_differ(self):
        assert make_scene(1).hq.tobytes() != make_scene(2).hq.tobytes()

    def test_no_shapes_single_region(self):
        assert make_scene(3, k_shapes=0).labels.max() == 0

    def test_region_count_bounds_100_seeds(self):
        for seed in range(100):
            scene = make_scene(seed, 32, 32, k_shapes=4)
            assert 1 <= scene.labels.max() + 1 <= 5

    def test_range_and_shape(self):
        s = make_scene(0, 48, 32)
        assert s.hq.shape == (3, 48, 32) and s.labels.shape == (48, 32)
        assert 0 <= s.hq.min() and s.hq.max() <= 1

    def test_labels_consistent_with_pixels(self):
        s = make_scene(9)
        for lab in range(1, s.labels.max() + 1):
            region = s.hq[:, s.labels == lab]
            assert np.ptp(region, axis=1).max() == 0  # shapes are flat-coloured

    def test_too_small(self):
        with pytest.raises(ValueError):
            make_scene(0, 8, 8)


class TestBicubic:
    def test_identity(self):
        img = make_scene(0).hq
        assert bicubic_resize(img, 1).tobytes() == img.tobytes()

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_constant_preserved(self, r):
        img = np.full((3, 24, 24), 0.37)
        np.testing.assert_allclose(bicubic_resize(img, r), 0.37, atol=1e-12)
        np.testing.assert_allclose(bicubic_resize(img, r, "up"), 0.37, atol=1e-12)

    def test_ramp_against_hand_weights(self):
        row = np.arange(8, dtype=np.float64)
        img = np.broadcast_to(row, (1, 8, 8)).copy()
        out = bicubic_resize(img, 2)[0, 0]
        # src = 2d + 0.5; taps 2d-1..2d+2 at distances 1.5, 0.5, 0.5, 1.5
        w = np.array([-0.0625, 0.5625, 0.5625, -0.0625])
        clamp = lambda t: min(max(t, 0), 7)  # noqa: E731
        expected = [sum(wi * row[clamp(2 * d - 1 + i)] for i, wi in enumerate(w)) for d in range(4)]
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out[1:3], [2.5, 4.5], atol=1e-12)

    def test_no_clipping(self):
        img = np.zeros((1, 8, 8))
        img[:, :, 4:] = 1.0
        out = bicubic_resize(img, 2)
        assert out.min() < 0 and out.max() > 1

    def test_indivisible(self):
        with pytest.raises(ValueError):
            bicubic_resize(np.zeros((3, 9, 8)), 2)

    def test_sr_pair_is_bicubic_of_gt(self):
        pair = make_pair(make_scene(4), "sr", r=2)
        assert bicubic_resize(pair.gt, 2).tobytes() == pair.lq.tobytes()
        assert pair.lq.shape == (3, 32, 32)


class TestNoise:
    def test_zero_sigma(self):
        img = make_scene(0).hq
        assert add_gaussian_noise(img, 0, 1).tobytes() == img.tobytes()

    def test_moments(self):
        sigma = 25
        noise = add_gaussian_noise(np.zeros(10 ** 6), sigma, 3)
        assert abs(noise.mean()) < 0.01 * sigma / 255
        assert abs(noise.std() - sigma / 255) < 0.01 * sigma / 255

    def test_deterministic(self):
        img = np.zeros((3, 8, 8))
        assert add_gaussian_noise(img, 15, 7).tobytes() == add_gaussian_noise(img, 15, 7).tobytes()

    def test_unclipped(self):
        out = add_gaussian_noise(np.zeros((3, 32, 32)), 50, 0)
        assert out.min() < 0


class TestPatch:
    def pair(self):
        return make_pair(make_scene(2), "sr", r=2)

    def test_full_size_is_identity(self):
        p = self.pair()
        c = crop_pair(p, 0, 0, 32)
        assert c.lq.tobytes() == p.lq.tobytes() and c.gt.tobytes() == p.gt.tobytes()

    def test_scaled_offset(self):
        p = self.pair()
        c = crop_pair(p, 3, 5, 8)
        assert c.lq.shape == (3, 8, 8) and c.gt.shape == (3, 16, 16)
        np.testing.assert_array_equal(c.gt, p.gt[:, 6:22, 10:26])
        np.testing.assert_array_equal(c.masks.masks, p.masks.masks[:, 3:11, 5:13])

    def test_inside_region_keeps_pixel_count(self):
        labels = np.zeros((32, 32), dtype=np.int32)
        labels[10:14, 12:15] = 1
        masks = np.stack([labels == 0, labels == 1]).astype(np.uint8)
        from sptune.masks import MaskStack
        p = DatasetPair(np.zeros((3, 32, 32)), np.zeros((3, 64, 64)), MaskStack(masks, 2), {"r": 2})
        assert crop_pair(p, 8, 8, 10).masks.masks[1].sum() == masks[1].sum()

    def test_sample_patch_deterministic_and_in_range(self):
        p = self.pair()
        a, b = sample_patch(p, 12, 5), sample_patch(p, 12, 5)
        assert a.lq.tobytes() == b.lq.tobytes() and a.lq.shape == (3, 12, 12)

    def test_too_large(self):
        with pytest.raises(ValueError):
            sample_patch(self.pair(), 40, 0)


class TestAugment:
    def pair(self):
        return make_pair(make_scene(6, 32, 32), "denoise", sigma=10, noise_seed=1)

    def test_hflip_involution(self):
        p = self.pair()
        assert augment(augment(p, "hflip"), "hflip").lq.tobytes() == p.lq.tobytes()

    def test_rot90_order_four(self):
        p = self.pair()
        q = p
        for _ in range(4):
            q = augment(q, "rot90")
        assert q.gt.tobytes() == p.gt.tobytes() and q.masks.masks.tobytes() == p.masks.masks.tobytes()

    def test_rot180_is_rot90_twice(self):
        p = self.pair()
        assert augment(p, "rot180").lq.tobytes() == augment(augment(p, "rot90"), "rot90").lq.tobytes()

    @pytest.mark.parametrize("op", ["hflip", "rot90", "rot180", "rot270"])
    def test_mask_alignment_iou_one(self, op):
        p = make_pair(make_scene(8, 32, 32), "denoise", sigma=5, noise_seed=0)
        q = augment(p, op)
        labels = oracle_segment(q.gt)
        for m in q.masks.masks[: p.masks.count_before_normalization]:
            region = labels == labels[m.astype(bool)][0]
            inter, union = np.logical_and(region, m).sum(), np.logical_or(region, m).sum()
            assert inter == union

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            augment(self.pair(), "vflip")


class TestDatasetIO:
    def test_ppm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(np.round(read_ppm(tmp_path / "a.ppm") * 255), np.round(img * 255))

    def test_manifest_regenerates_pairs(self, tmp_path):
        cfg = DataConfig(task="denoise", r=1, sigma=25, n=3, size=(32, 32), seed=4)
        write_dataset(tmp_path / "ds", cfg, generate_pairs(cfg))
        manifest = read_manifest(tmp_path / "ds")
        regen = generate_pairs(DataConfig(**{**manifest["config"], "size": tuple(manifest["config"]["size"])}))
        loaded = load_dataset(tmp_path / "ds", require_masks=True)
        for a, b in zip(regen, loaded):
            assert a.lq.tobytes() == b.lq.tobytes() and a.gt.tobytes() == b.gt.tobytes()
            assert a.masks.masks.tobytes() == b.masks.masks.tobytes()
        assert sorted(p.name for p in (tmp_path / "ds").iterdir())[:3] == [
            "manifest.json", "scene_00000.hq.sptt", "scene_00000.lq.sptt"]

    def test_missing_masks(self, tmp_path):
        cfg = DataConfig(n=1, size=(32, 32))
        pairs = generate_pairs(cfg)
        pairs[0].masks = None
        write_dataset(tmp_path / "ds", cfg, pairs)
        assert load_dataset(tmp_path / "ds")[0].masks is None
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "ds", require_masks=True)

    @pytest.mark.parametrize("kwargs", [dict(task="sr", r=1), dict(task="sr", sigma=5), dict(task="denoise", r=1),
                                        dict(task="denoise", r=2, sigma=5), dict(size=(30, 30), r=4), dict(n=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            DataConfig(**kwargs)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_oracle_recovers_generator_labels(seed):
    scene = make_scene(seed, 32, 32)
    np.testing.assert_array_equal(oracle_segment(scene.hq), scene.labels)
