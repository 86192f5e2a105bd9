import hashlib

import numpy as np
import pytest

from faceaudit import rng
from faceaudit.corpus import GREY, MASK, Manifest, rgb_variant, spread_variant
from faceaudit.errors import BadAmplitude, BadRadius, FaceNotFound
from faceaudit.variants import (
    MaskGeometry,
    apply_mask,
    generate_variants,
    greyscale,
    noise_bound,
    rgb_noise,
    spread,
)

from conftest import random_image, write_corpus


class TestRgbNoise:
    def test_zero_bound_is_identity(self):
        img = random_image(0)
        out = rgb_noise(img, 0.001, seed=42)  # round(0.001 * 255) == 0
        assert np.array_equal(out, img)

    def test_deterministic(self):
        img = random_image(1, h=64, w=64)
        a = rgb_noise(img, 0.3, seed=42)
        b = rgb_noise(img, 0.3, seed=42)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        img = random_image(1, h=64, w=64)
        assert not np.array_equal(rgb_noise(img, 0.3, 1), rgb_noise(img, 0.3, 2))

    def test_bad_amplitude(self):
        img = random_image(2)
        for amp in (0.0, -0.1, 1.5):
            with pytest.raises(BadAmplitude):
                rgb_noise(img, amp, seed=0)

    def test_bound_and_mean_against_brute_force_law(self):
        # amplitude 0.3: bound is round(0.3 * 255) = 77; the empirical mean
        # |delta| must sit within 3 sigma of the exact expectation of the
        # declared law |clamp(v + U{-77..77}) - v|, enumerated per pixel.
        img = random_image(3, h=64, w=64)
        amp = 0.3
        b = noise_bound(amp)
        assert b == 77
        out = rgb_noise(img, amp, seed=7)
        delta = np.abs(out.astype(np.int16) - img.astype(np.int16))
        assert delta.max() <= b
        assert delta.max() == b  # 12288 draws: an unclipped extreme is certain

        v = img.astype(np.int64).ravel()[:, None]  # (P, 1)
        n = np.arange(-b, b + 1, dtype=np.int64)[None, :]  # (1, 2b+1)
        d = np.abs(np.clip(v + n, 0, 255) - v).astype(np.float64)
        per_pixel_mean = d.mean(axis=1)
        per_pixel_var = (d ** 2).mean(axis=1) - per_pixel_mean ** 2
        exact_mean = per_pixel_mean.mean()
        sigma = np.sqrt(per_pixel_var.sum()) / v.shape[0]
        assert abs(delta.mean() - exact_mean) <= 3 * sigma


class TestSpread:
    def test_single_pixel_identity(self):
        img = random_image(0, h=1, w=1)
        assert np.array_equal(spread(img, radius=3, seed=0), img)

    def test_multiset_preserved(self):
        img = random_image(1, h=16, w=16)
        out = spread(img, radius=5, seed=3)
        assert np.array_equal(
            np.sort(out.reshape(-1, 3), axis=0), np.sort(img.reshape(-1, 3), axis=0)
        )

    def test_bad_radius(self):
        with pytest.raises(BadRadius):
            spread(random_image(2), radius=0, seed=0)

    def test_deterministic(self):
        img = random_image(3, h=16, w=16)
        assert np.array_equal(spread(img, 4, seed=9), spread(img, 4, seed=9))

    def test_matches_independent_swap_replay(self):
        # 4x4 image with distinct values; replay the declared schedule by
        # hand: visit pixels in raster order, swap each with the partner
        # drawn from the seeded stream, clamped to the Chebyshev ball.
        h = w = 4
        img = np.arange(h * w * 3, dtype=np.uint8).reshape(h, w, 3)
        radius, seed = 1, 21
        out = spread(img, radius, seed)

        g = rng.generator(seed, "spread")
        offsets = g.integers(-radius, radius + 1, size=(h * w, 2), dtype=np.int64)
        ref = img.reshape(h * w, 3).copy()
        for p in range(h * w):
            pr, pc = divmod(p, w)
            qr = min(max(pr + int(offsets[p, 0]), 0), h - 1)
            qc = min(max(pc + int(offsets[p, 1]), 0), w - 1)
            q = qr * w + qc
            ref[[p, q]] = ref[[q, p]]
        assert np.array_equal(out, ref.reshape(h, w, 3))
        # every swap in the schedule stays within the Chebyshev radius
        rows, cols = np.divmod(np.arange(h * w), w)
        qr = np.clip(rows + offsets[:, 0], 0, h - 1)
        qc = np.clip(cols + offsets[:, 1], 0, w - 1)
        assert np.maximum(np.abs(qr - rows), np.abs(qc - cols)).max() <= radius


class TestGreyscale:
    def test_grey_fixed_point(self):
        img = np.full((4, 4, 3), 128, dtype=np.uint8)
        assert np.array_equal(greyscale(img), img)

    def test_pure_red(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0] = (255, 0, 0)
        assert tuple(greyscale(img)[0, 0]) == (76, 76, 76)  # round(0.299 * 255)

    def test_channels_equal(self):
        out = greyscale(random_image(4))
        assert np.array_equal(out[:, :, 0], out[:, :, 1])
        assert np.array_equal(out[:, :, 1], out[:, :, 2])

    def test_idempotent(self):
        for seed in range(5):
            img = random_image(seed)
            once = greyscale(img)
            assert np.array_equal(greyscale(once), once)


def rect_geometry(x0, y0, x1, y1):
    return MaskGeometry(
        landmarks={
            "nose_bridge_l": (x0, y0),
            "nose_bridge_r": (x1, y0),
            "cheek_r": (x1, (y0 + y1) / 2),
            "chin_r": (x1, y1),
            "chin_l": (x0, y1),
            "cheek_l": (x0, (y0 + y1) / 2),
        }
    )


class TestApplyMask:
    def test_degenerate_polygon_is_identity(self):
        img = random_image(0, h=16, w=16)
        geom = rect_geometry(5, 5, 5, 5)
        assert np.array_equal(apply_mask(img, geom), img)

    def test_rectangle_changes_exactly_its_pixels(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        out = apply_mask(img, rect_geometry(2, 3, 10, 12))
        changed = (out != img).any(axis=2)
        expected = np.zeros((16, 16), dtype=bool)
        expected[3:12, 2:10] = True  # pixel centers strictly inside the rect
        assert np.array_equal(changed, expected)

    def test_outside_pixels_untouched(self):
        img = random_image(1, h=20, w=20)
        out = apply_mask(img, rect_geometry(4, 6, 12, 15))
        inside = np.zeros((20, 20), dtype=bool)
        inside[6:15, 4:12] = True
        assert np.array_equal(out[~inside], img[~inside])

    def test_missing_landmark_rejected(self):
        with pytest.raises(ValueError):
            MaskGeometry(landmarks={"nose_bridge_l": (0, 0)})


class TestGenerateVariants:
    def test_counts(self, tmp_path):
        manifest = write_corpus(tmp_path, per_cell=1, countries=("AUS", "IND"))
        # 4 ORIG with 4 filter kinds plus the originals -> 20 records
        kinds = [rgb_variant(0.3), rgb_variant(0.5), spread_variant(5), GREY]
        full, summary = generate_variants(manifest, kinds, tmp_path / "out",
                                          master_seed=0)
        assert len(full) == len(manifest) * 5
        assert summary.generated == len(manifest) * 4
        labels = {r.variant.label for r in full}
        assert labels == {"ORIG", "RGB0.3", "RGB0.5", "SPRD5", "GREY"}

    def test_mask_failures_shrink_only_mask_set(self, tmp_path):
        manifest = write_corpus(tmp_path, per_cell=1, countries=("AUS", "IND"))
        calls = {}

        def flaky_landmarks(img):
            key = calls.setdefault("n", 0)
            calls["n"] += 1
            if key < 2:  # first two images fail landmarking
                raise FaceNotFound("no face")
            from faceaudit.variants import frame_relative_landmarks

            return frame_relative_landmarks(img)

        full, summary = generate_variants(
            manifest, [GREY, MASK], tmp_path / "out", master_seed=0,
            landmark_provider=flaky_landmarks,
        )
        assert len(full.select(variant_label="GREY")) == 4
        assert len(full.select(variant_label="MASK")) == 2
        assert len(summary.failures) == 2

    def test_regeneration_stable_under_reordering(self, tmp_path):
        manifest = write_corpus(tmp_path, per_cell=1, countries=("AUS", "IND"))
        kinds = [rgb_variant(0.3), spread_variant(5)]
        _, _ = generate_variants(manifest, kinds, tmp_path / "a", master_seed=5)
        shuffled = Manifest(list(reversed(manifest.records)),
                            provenance=manifest.provenance)
        _, _ = generate_variants(shuffled, kinds, tmp_path / "b", master_seed=5)

        def digest(root):
            return {
                p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(root.rglob("*.png"))
            }

        assert digest(tmp_path / "a") == digest(tmp_path / "b")


class TestFilterInvariants:
    def test_dimension_preservation(self):
        img = random_image(0, h=24, w=18)
        for out in (rgb_noise(img, 0.3, 1), spread(img, 3, 1), greyscale(img)):
            assert out.shape == img.shape
            assert out.dtype == np.uint8

    def test_noise_bound_exhaustive_random_images(self):
        for seed in range(20):
            img = random_image(seed, h=32, w=25)
            for amp in (0.3, 0.5):
                out = rgb_noise(img, amp, seed=seed)
                delta = np.abs(out.astype(np.int16) - img.astype(np.int16))
                assert delta.max() <= noise_bound(amp)
