"""Augmentation: sampler statistics vs Monte Carlo oracles, photometric ops,
view construction and its determinism guarantees."""

import math

import numpy as np
import pytest

from mulan.augment import (
    AugRecord,
    CropRect,
    Recipe,
    ViewType,
    apply_cutout,
    blur_kernel_size,
    build_views,
    collate_views,
    gaussian_blur,
    photometric,
    rgb_to_grayscale,
    sample_cutout_rect,
    sample_resized_crop,
    solarize,
)
from mulan.data import DatasetStats, synth_shapes
from mulan.errors import ConfigError, ShapeError
from mulan.rng import DOMAIN_AUGMENT, stream


def _stats():
    return DatasetStats(mean=np.array([0.45, 0.5, 0.55], dtype=np.float32),
                        std=np.array([0.2, 0.25, 0.3], dtype=np.float32))


# ---------------------------------------------------------------------------
# crop sampler
# ---------------------------------------------------------------------------

def test_crop_full_area_unit_ratio_gives_whole_image():
    rng = np.random.default_rng(0)
    rect, fallback = sample_resized_crop(rng, 32, 32, (1.0, 1.0), (1.0, 1.0))
    assert rect == CropRect(0, 0, 32, 32)
    assert not fallback


def test_crop_forced_quarter_area_gives_16px_square():
    rng = np.random.default_rng(1)
    rect, _ = sample_resized_crop(rng, 32, 32, (0.25, 0.25), (1.0, 1.0))
    assert (rect.height, rect.width) == (16, 16)


def oracle_mean_area_fraction(rng, img_h, img_w, area_range, ratio_range, n_draws):
    """Independent re-implementation of the rejection sampler's accepted area."""
    area = img_h * img_w
    lo, hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    total = 0.0
    for _ in range(n_draws):
        for _ in range(10):
            ta = area * rng.uniform(area_range[0], area_range[1])
            ratio = math.exp(rng.uniform(lo, hi))
            w = round(math.sqrt(ta * ratio))
            h = round(math.sqrt(ta / ratio))
            if 0 < w <= img_w and 0 < h <= img_h:
                total += h * w / area
                break
        else:
            r = img_w / img_h
            if r < ratio_range[0]:
                w, h = img_w, min(img_h, round(img_w / ratio_range[0]))
            elif r > ratio_range[1]:
                h, w = img_h, min(img_w, round(img_h * ratio_range[1]))
            else:
                w, h = img_w, img_h
            total += h * w / area
    return total / n_draws


@pytest.mark.parametrize("area_range", [(0.08, 1.0), (0.25, 1.0)])
def test_crop_sampler_mean_area_matches_monte_carlo_oracle(area_range):
    n = 30_000
    rng = np.random.default_rng(2)
    mean_lib = np.mean([
        sample_resized_crop(rng, 32, 32, area_range)[0].area / 1024.0
        for _ in range(n)])
    mean_oracle = oracle_mean_area_fraction(
        np.random.default_rng(999), 32, 32, area_range, (0.75, 4 / 3), n)
    assert abs(mean_lib - mean_oracle) < 0.01


def test_crop_rects_always_inside_image():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        rect, _ = sample_resized_crop(rng, 24, 40, (0.08, 1.0))
        rect.validate_inside(24, 40)


def test_crop_area_bounds_hold_unless_fallback():
    rng = np.random.default_rng(4)
    for _ in range(5000):
        rect, fallback = sample_resized_crop(rng, 32, 32, (0.25, 1.0))
        if not fallback:
            frac = rect.area / 1024.0
            # rounding of the side lengths perturbs the drawn area slightly
            assert 0.25 * 0.9 <= frac <= 1.0


# ---------------------------------------------------------------------------
# cutout sampler / mask
# ---------------------------------------------------------------------------

def test_cutout_forced_quarter_area():
    rng = np.random.default_rng(5)
    rect, _ = sample_cutout_rect(rng, 32, 32, (0.25, 0.25), (1.0, 1.0))
    assert (rect.height, rect.width) == (16, 16)


def test_cutout_always_inside_image():
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        rect, _ = sample_cutout_rect(rng, 32, 32)
        rect.validate_inside(32, 32)


def test_cutout_mean_area_matches_oracle():
    n = 30_000
    rng = np.random.default_rng(7)
    mean_lib = np.mean([
        sample_cutout_rect(rng, 32, 32)[0].area / 1024.0 for _ in range(n)])
    mean_oracle = oracle_mean_area_fraction(
        np.random.default_rng(123), 32, 32, (0.20, 0.40), (0.75, 4 / 3), n)
    assert abs(mean_lib - mean_oracle) < 0.01


def test_apply_cutout_full_rect_gives_constant_mean_image():
    img = np.random.default_rng(8).random((3, 16, 16)).astype(np.float32)
    fill = np.array([0.4, 0.5, 0.6], dtype=np.float32)
    out = apply_cutout(img, CropRect(0, 0, 16, 16), fill)
    for c in range(3):
        assert np.all(out[c] == fill[c])


def test_apply_cutout_single_pixel():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    out = apply_cutout(img, CropRect(2, 3, 1, 1), np.array([1.0, 1.0, 1.0]))
    changed = np.argwhere(out != img)
    assert len(changed) == 3
    assert {(r, c) for _, r, c in changed} == {(2, 3)}


def test_apply_cutout_out_of_bounds_rejected():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(ShapeError):
        apply_cutout(img, CropRect(5, 5, 8, 8), np.zeros(3))


def test_masked_region_is_zero_after_normalization():
    stats = _stats()
    recipe = Recipe(n_global=1, n_cutout=1, global_size=32)
    rng = np.random.default_rng(9)
    images, _ = synth_shapes(0, 256)
    total, count = 0.0, 0
    for img in images[:1000]:
        views = build_views(img, recipe, rng, stats)
        cut = views[-1]
        rect = cut.record.cutout_rect
        region = cut.online[:, rect.top:rect.top + rect.height,
                            rect.left:rect.left + rect.width]
        total += float(region.sum())
        count += region.size
    assert abs(total / count) < 1e-3


# ---------------------------------------------------------------------------
# photometric chain
# ---------------------------------------------------------------------------

def _plain_record(**kw):
    base = dict(view_type=ViewType.GLOBAL, crop=CropRect(0, 0, 8, 8),
                crop_fallback=False, flipped=False, jitter_order=(),
                jitter_factors=None, grayscale=False, blur_sigma=None,
                solarized=False, cutout_rect=None, rng_stream_id=(0,))
    base.update(kw)
    return AugRecord(**base)


def test_flip_twice_is_identity():
    img = np.random.default_rng(10).random((3, 8, 8)).astype(np.float32)
    rec = _plain_record(flipped=True)
    once = photometric(img, rec)
    twice = photometric(once, rec)
    np.testing.assert_array_equal(twice, img)


def test_grayscale_of_gray_image_unchanged():
    gray = np.repeat(np.random.default_rng(11).random((1, 8, 8)), 3, axis=0).astype(np.float32)
    out = photometric(gray, _plain_record(grayscale=True))
    np.testing.assert_allclose(out, gray, atol=1e-6)


def blur_oracle_2d(img, sigma, ksize):
    """Direct 2-D convolution with the outer-product Gaussian, reflect padding."""
    half = ksize // 2
    xs = np.arange(ksize, dtype=np.float64) - half
    k1 = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    padded = np.pad(img.astype(np.float64), ((0, 0), (half, half), (half, half)),
                    mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for di in range(ksize):
        for dj in range(ksize):
            out += k2[di, dj] * padded[:, di:di + img.shape[1], dj:dj + img.shape[2]]
    return out


def test_blur_matches_direct_convolution_oracle():
    img = np.random.default_rng(12).random((3, 32, 32)).astype(np.float64)
    for sigma in (0.1, 0.8, 2.0):
        ours = gaussian_blur(img, sigma, 3)
        oracle = blur_oracle_2d(img, sigma, 3)
        np.testing.assert_allclose(ours, oracle, atol=1e-5)


def test_blur_kernel_size_rule():
    assert blur_kernel_size(224) == 23
    assert blur_kernel_size(32) == 3
    assert blur_kernel_size(16) == 1
    assert blur_kernel_size(45) == 5


def test_solarize_inverts_bright_pixels():
    img = np.array([[[0.2, 0.5], [0.7, 1.0]]] * 3, dtype=np.float32)
    out = solarize(img)
    np.testing.assert_allclose(out[0], [[0.2, 0.5], [0.3, 0.0]], atol=1e-6)


def test_photometric_normalization_applied_last():
    stats = _stats()
    img = np.full((3, 8, 8), 0.5, dtype=np.float32)
    out = photometric(img, _plain_record(), stats)
    expected = (0.5 - stats.mean) / stats.std
    for c in range(3):
        np.testing.assert_allclose(out[c], expected[c], atol=1e-6)


# ---------------------------------------------------------------------------
# build_views
# ---------------------------------------------------------------------------

def test_build_views_counts_two_global():
    stats = _stats()
    img = np.random.default_rng(13).random((3, 32, 32)).astype(np.float32)
    views = build_views(img, Recipe(n_global=2), np.random.default_rng(0), stats)
    assert [v.view_type for v in views] == [ViewType.GLOBAL, ViewType.GLOBAL]
    assert all(v.record.cutout_rect is None for v in views)


def test_build_views_full_recipe_multiset():
    stats = _stats()
    img = np.random.default_rng(14).random((3, 32, 32)).astype(np.float32)
    recipe = Recipe(n_global=2, n_local=2, n_cutout=1)
    views = build_views(img, recipe, np.random.default_rng(0), stats)
    kinds = [v.view_type for v in views]
    assert kinds.count(ViewType.GLOBAL) == 2
    assert kinds.count(ViewType.LOCAL) == 2
    assert kinds.count(ViewType.CUTOUT) == 1
    assert views[2].online.shape == (3, 16, 16)
    assert views[4].online.shape == (3, 32, 32)


def test_build_views_same_stream_bit_identical():
    stats = _stats()
    img = np.random.default_rng(15).random((3, 32, 32)).astype(np.float32)
    recipe = Recipe(n_global=2, n_local=2, n_cutout=1)
    v1 = build_views(img, recipe, stream(3, DOMAIN_AUGMENT, 0, 5), stats)
    v2 = build_views(img, recipe, stream(3, DOMAIN_AUGMENT, 0, 5), stats)
    for a, b in zip(v1, v2):
        assert np.array_equal(a.online, b.online)
        assert np.array_equal(a.target, b.target)
        assert a.record == b.record


def test_build_views_zero_globals_rejected():
    stats = _stats()
    img = np.zeros((3, 32, 32), dtype=np.float32)
    with pytest.raises(ConfigError):
        build_views(img, Recipe(n_global=0, n_local=2), np.random.default_rng(0), stats)


def test_cutout_target_copy_is_unmasked():
    stats = _stats()
    img = np.random.default_rng(16).random((3, 32, 32)).astype(np.float32)
    recipe = Recipe(n_global=1, n_cutout=1)
    views = build_views(img, recipe, np.random.default_rng(1), stats)
    cut = views[-1]
    rect = cut.record.cutout_rect
    assert cut.target is not cut.online
    # target equals the un-masked crop: outside the rect online == target,
    # inside the rect online is the (normalized) fill while target is not
    mask = np.zeros((32, 32), dtype=bool)
    mask[rect.top:rect.top + rect.height, rect.left:rect.left + rect.width] = True
    np.testing.assert_array_equal(cut.online[:, ~mask], cut.target[:, ~mask])
    assert np.allclose(cut.online[:, mask], 0.0, atol=1e-6)
    assert not np.allclose(cut.target[:, mask], 0.0, atol=1e-6)


def test_non_cutout_views_share_online_and_target():
    stats = _stats()
    img = np.random.default_rng(17).random((3, 32, 32)).astype(np.float32)
    views = build_views(img, Recipe(n_global=2, n_local=1), np.random.default_rng(2), stats)
    for v in views:
        assert v.target is v.online


def test_symmetric_mode_masks_targets_too():
    stats = _stats()
    img = np.random.default_rng(18).random((3, 32, 32)).astype(np.float32)
    recipe = Recipe(n_global=1, n_cutout=1, symmetric_cutout=True)
    views = build_views(img, recipe, np.random.default_rng(3), stats)
    for v in views:
        assert v.record.target_cutout_rect is not None
        assert v.target is not v.online or v.record.cutout_rect is None


def test_crop_area_fraction_respects_view_type_bounds():
    stats = _stats()
    images, _ = synth_shapes(1, 16)
    recipe = Recipe(n_global=2, n_local=2, n_cutout=1)
    rng = np.random.default_rng(19)
    bounds = {ViewType.GLOBAL: (0.25, 1.0), ViewType.LOCAL: (0.08, 0.25),
              ViewType.CUTOUT: (0.25, 1.0)}
    for img in images:
        for v in build_views(img, recipe, rng, stats):
            if not v.record.crop_fallback:
                frac = v.record.crop.area / 1024.0
                lo, hi = bounds[v.view_type]
                assert lo * 0.85 <= frac <= hi * 1.05


def test_collate_views_scheduling_independent():
    stats = _stats()
    images, _ = synth_shapes(2, 4)
    recipe = Recipe(n_global=2, n_local=1)
    full = collate_views(images, recipe, seed=11, epoch=3,
                         sample_indices=np.arange(4), stats=stats)
    solo = collate_views(images[2:3], recipe, seed=11, epoch=3,
                         sample_indices=np.array([2]), stats=stats)
    for slot in range(recipe.n_views):
        np.testing.assert_array_equal(full[slot]["online"][2], solo[slot]["online"][0])
        np.testing.assert_array_equal(full[slot]["target"][2], solo[slot]["target"][0])
