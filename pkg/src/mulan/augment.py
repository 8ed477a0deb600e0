"""Multi-view augmentation: global / local / cutout views.

Views are built from images in [0, 1] as (C, H, W) float32 arrays.  Each view
records every random draw in an AugRecord, and all randomness comes from a
counter-based stream addressed by (seed, epoch, sample index), so the output
is identical regardless of how many augmentation workers run.

Pipeline per view: random resized crop -> bilinear resize to the view
resolution -> photometric chain (flip, color jitter, grayscale, blur,
solarize) -> cutout mask on the online copy (cutout views) -> channel
normalization.  The cutout fill is the per-channel dataset mean, which the
final normalization maps to exactly zero.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import DatasetStats
from .errors import ConfigError, ShapeError

LOG_RATIO_DEFAULT = (3.0 / 4.0, 4.0 / 3.0)
JITTER_RANGES = (0.4, 0.4, 0.2, 0.1)  # brightness, contrast, saturation, hue
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)
SOLARIZE_THRESHOLD = 0.5
MAX_CROP_ATTEMPTS = 10


class ViewType(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"
    CUTOUT = "cutout"


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int

    def validate_inside(self, img_h: int, img_w: int) -> None:
        if (self.height < 1 or self.width < 1 or self.top < 0 or self.left < 0
                or self.top + self.height > img_h or self.left + self.width > img_w):
            raise ShapeError(f"{self} does not lie inside a {img_h}x{img_w} image")

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class AugRecord:
    """Provenance of one view: every random draw, reproducible from the stream id."""
    view_type: ViewType
    crop: CropRect
    crop_fallback: bool
    flipped: bool
    jitter_order: tuple
    jitter_factors: tuple  # (brightness, contrast, saturation, hue) or None
    grayscale: bool
    blur_sigma: Optional[float]
    solarized: bool
    cutout_rect: Optional[CropRect]
    rng_stream_id: tuple
    target_cutout_rect: Optional[CropRect] = None  # symmetric-cutout diagnostic only


@dataclass
class Recipe:
    """View composition and augmentation settings of one experiment."""
    n_global: int = 2
    n_local: int = 0
    n_cutout: int = 0
    global_size: int = 32
    local_size: int = 16
    global_area: tuple = (0.25, 1.0)
    local_area: tuple = (0.08, 0.25)
    cutout_crop_area: tuple = (0.25, 1.0)   # cutout views crop like globals
    cutout_mask_area: tuple = (0.20, 0.40)
    ratio_range: tuple = LOG_RATIO_DEFAULT
    crop: bool = True
    flip: bool = True
    jitter: bool = True
    grayscale: bool = True
    blur: bool = True
    solarize: bool = True
    symmetric_cutout: bool = False
    lambda_global: float = 1.0
    lambda_local: float = 1.0
    lambda_cutout: float = 1.0

    def validate(self) -> None:
        if self.n_global < 1:
            raise ConfigError("at least one global view is required (targets are global)")
        if min(self.n_local, self.n_cutout) < 0:
            raise ConfigError("view counts must be nonnegative")
        if min(self.lambda_global, self.lambda_local, self.lambda_cutout) < 0:
            raise ConfigError("loss weights must be nonnegative")
        for name, (lo, hi) in (("global_area", self.global_area),
                               ("local_area", self.local_area),
                               ("cutout_crop_area", self.cutout_crop_area),
                               ("cutout_mask_area", self.cutout_mask_area)):
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.global_size < 8 or self.local_size < 8:
            raise ConfigError("view resolutions below 8 px are not encodable")

    def view_types(self) -> list[ViewType]:
        """View slots in canonical order: globals, locals, cutouts."""
        return ([ViewType.GLOBAL] * self.n_global
                + [ViewType.LOCAL] * self.n_local
                + [ViewType.CUTOUT] * self.n_cutout)

    def lambda_for(self, vt: ViewType) -> float:
        return {ViewType.GLOBAL: self.lambda_global,
                ViewType.LOCAL: self.lambda_local,
                ViewType.CUTOUT: self.lambda_cutout}[vt]

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local + self.n_cutout


@dataclass
class View:
    view_type: ViewType
    online: np.ndarray            # (C, h, w) normalized
    target: np.ndarray            # un-masked counterpart (same array when identical)
    record: AugRecord


# ---------------------------------------------------------------------------
# geometric sampling
# ---------------------------------------------------------------------------

def sample_resized_crop(rng: np.random.Generator, img_h: int, img_w: int,
                        area_range: tuple, ratio_range: tuple = LOG_RATIO_DEFAULT,
                        ) -> tuple[CropRect, bool]:
    """Random rect with area fraction in area_range and log-uniform aspect ratio.

    Up to 10 rejection attempts; afterwards, the largest centered crop with a
    ratio clamped into range (the fallback is flagged).
    """
    area = img_h * img_w
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * rng.uniform(area_range[0], area_range[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = round(math.sqrt(target_area * ratio))
        h = round(math.sqrt(target_area / ratio))
        if 0 < w <= img_w and 0 < h <= img_h:
            top = int(rng.integers(0, img_h - h + 1))
            left = int(rng.integers(0, img_w - w + 1))
            return CropRect(top, left, h, w), False
    in_ratio = img_w / img_h
    if in_ratio < ratio_range[0]:
        w = img_w
        h = min(img_h, round(w / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        h = img_h
        w = min(img_w, round(h * ratio_range[1]))
    else:
        w, h = img_w, img_h
    return CropRect((img_h - h) // 2, (img_w - w) // 2, h, w), True


def sample_cutout_rect(rng: np.random.Generator, img_h: int, img_w: int,
                       area_range: tuple = (0.20, 0.40),
                       ratio_range: tuple = LOG_RATIO_DEFAULT) -> tuple[CropRect, bool]:
    """Mask rect with area fraction in [0.20, 0.40] by default; same sampler
    family as the resized crop (uniform area, log-uniform ratio, uniform
    placement, 10-attempt rejection with centered fallback)."""
    if img_h < 4 or img_w < 4:
        raise ShapeError(f"image {img_h}x{img_w} too small for a cutout mask")
    return sample_resized_crop(rng, img_h, img_w, area_range, ratio_range)


def apply_cutout(img: np.ndarray, rect: CropRect, fill: np.ndarray) -> np.ndarray:
    """Replace the pixels inside rect with the per-channel fill values."""
    c, h, w = img.shape
    rect.validate_inside(h, w)
    out = img.copy()
    out[:, rect.top:rect.top + rect.height, rect.left:rect.left + rect.width] = \
        np.asarray(fill, dtype=img.dtype).reshape(c, 1, 1)
    return out


# ---------------------------------------------------------------------------
# resampling and photometric transforms
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=512)
def _resize_axis_coords(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample (half-pixel centers)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fy = _resize_axis_coords(h, out_h)
    c0, c1, fx = _resize_axis_coords(w, out_w)
    fy = fy.astype(img.dtype, copy=False)
    fx = fx.astype(img.dtype, copy=False)
    rows = img[:, r0, :] * (1 - fy)[None, :, None] + img[:, r1, :] * fy[None, :, None]
    out = rows[:, :, c0] * (1 - fx)[None, None, :] + rows[:, :, c1] * fx[None, None, :]
    return np.ascontiguousarray(out)


def crop_resize(img: np.ndarray, rect: CropRect, size: int) -> np.ndarray:
    rect.validate_inside(img.shape[1], img.shape[2])
    patch = img[:, rect.top:rect.top + rect.height, rect.left:rect.left + rect.width]
    return resize_bilinear(patch, size, size)


def rgb_to_grayscale(img: np.ndarray) -> np.ndarray:
    lum = np.tensordot(GRAY_WEIGHTS.astype(img.dtype), img, axes=([0], [0]))
    return np.repeat(lum[None], 3, axis=0)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    dz = np.maximum(delta, 1e-12)
    rc = (maxc - r) / dz
    gc = (maxc - g) / dz
    bc = (maxc - b) / dz
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0, 0.0, h / 6.0 % 1.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    hh = h * 6.0
    i = np.floor(hh).astype(np.int64) % 6
    f = hh - np.floor(hh)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, (v, q, p, p, t, v))
    g = np.choose(i, (t, v, v, q, p, p))
    b = np.choose(i, (p, p, t, v, v, q))
    return np.stack([r, g, b])


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    mean = rgb_to_grayscale(img)[0].mean(dtype=np.float64)
    return np.clip((img - mean) * factor + mean, 0.0, 1.0).astype(img.dtype)


def adjust_saturation(img, factor):
    gray = rgb_to_grayscale(img)
    return np.clip(gray + (img - gray) * factor, 0.0, 1.0)


def adjust_hue(img, offset):
    hsv = _rgb_to_hsv(img)
    hsv[0] = (hsv[0] + offset) % 1.0
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0).astype(img.dtype)


_JITTER_FNS = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def blur_kernel_size(side: int) -> int:
    """Nearest odd integer to 0.1 x side (scales a 23/224 reference kernel)."""
    k = round(0.1 * side)
    if k % 2 == 0:
        k += 1 if (0.1 * side) >= k else -1
    return max(k, 1)


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    """Separable Gaussian with reflect padding."""
    if ksize <= 1:
        return img.copy()
    half = ksize // 2
    xs = np.arange(ksize, dtype=np.float64) - half
    kern = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    kern = (kern / kern.sum()).astype(img.dtype)
    out = np.pad(img, ((0, 0), (half, half), (0, 0)), mode="reflect")
    out = sum(out[:, i:i + img.shape[1], :] * kern[i] for i in range(ksize))
    out = np.pad(out, ((0, 0), (0, 0), (half, half)), mode="reflect")
    out = sum(out[:, :, i:i + img.shape[2]] * kern[i] for i in range(ksize))
    return out


def solarize(img: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


def normalize_channels(img: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return ((img - stats.mean.reshape(3, 1, 1)) / stats.std.reshape(3, 1, 1)).astype(np.float32)


def photometric(img: np.ndarray, record: AugRecord,
                stats: Optional[DatasetStats] = None) -> np.ndarray:
    """Replay the photometric chain of a record (inputs scaled to [0, 1]).

    Order: horizontal flip, color jitter, grayscale, Gaussian blur, solarize,
    then channel normalization when stats are given.
    """
    out = img
    if record.flipped:
        out = out[:, :, ::-1].copy()
    if record.jitter_factors is not None:
        for idx in record.jitter_order:
            out = _JITTER_FNS[idx](out, record.jitter_factors[idx])
    if record.grayscale:
        out = rgb_to_grayscale(out)
    if record.blur_sigma is not None:
        out = gaussian_blur(out, record.blur_sigma, blur_kernel_size(out.shape[1]))
    if record.solarized:
        out = solarize(out)
    if stats is not None:
        out = normalize_channels(out, stats)
    return out


# ---------------------------------------------------------------------------
# view construction
# ---------------------------------------------------------------------------

def _draw_record(rng: np.random.Generator, vt: ViewType, global_index: int,
                 recipe: Recipe, img_h: int, img_w: int,
                 stream_id: tuple) -> AugRecord:
    """Draw every random decision for one view, in a fixed order."""
    if vt is ViewType.GLOBAL:
        area, size = recipe.global_area, recipe.global_size
    elif vt is ViewType.LOCAL:
        area, size = recipe.local_area, recipe.local_size
    else:
        area, size = recipe.cutout_crop_area, recipe.global_size

    if recipe.crop:
        crop, fallback = sample_resized_crop(rng, img_h, img_w, area, recipe.ratio_range)
    else:
        crop, fallback = CropRect(0, 0, img_h, img_w), False

    flipped = recipe.flip and rng.uniform() < 0.5

    jitter_factors = None
    jitter_order = ()
    if recipe.jitter:
        jb, jc, js, jh = JITTER_RANGES
        jitter_factors = (float(rng.uniform(1 - jb, 1 + jb)),
                          float(rng.uniform(1 - jc, 1 + jc)),
                          float(rng.uniform(1 - js, 1 + js)),
                          float(rng.uniform(-jh, jh)))
        jitter_order = tuple(int(i) for i in rng.permutation(4))

    grayscale = recipe.grayscale and rng.uniform() < 0.2

    # blur/solarize probabilities follow the two-view asymmetry; extra global
    # views alternate between the first- and second-view settings
    if vt is ViewType.GLOBAL:
        first_style = (global_index % 2 == 0)
        blur_p = 1.0 if first_style else 0.1
        solarize_p = 0.0 if first_style else 0.2
    else:
        blur_p, solarize_p = 0.5, 0.0
    blur_sigma = None
    if recipe.blur and rng.uniform() < blur_p:
        blur_sigma = float(rng.uniform(0.1, 2.0))
    solarized = recipe.solarize and rng.uniform() < solarize_p

    cutout_rect = None
    if vt is ViewType.CUTOUT:
        cutout_rect, _ = sample_cutout_rect(rng, size, size, recipe.cutout_mask_area,
                                            recipe.ratio_range)

    target_cutout_rect = None
    if recipe.symmetric_cutout:
        target_cutout_rect, _ = sample_cutout_rect(rng, size, size,
                                                   recipe.cutout_mask_area,
                                                   recipe.ratio_range)

    return AugRecord(
        view_type=vt, crop=crop, crop_fallback=fallback, flipped=flipped,
        jitter_order=jitter_order, jitter_factors=jitter_factors,
        grayscale=grayscale, blur_sigma=blur_sigma, solarized=solarized,
        cutout_rect=cutout_rect, rng_stream_id=stream_id,
        target_cutout_rect=target_cutout_rect)


def build_views(img: np.ndarray, recipe: Recipe, rng: np.random.Generator,
                stats: DatasetStats, stream_id: tuple = ()) -> list[View]:
    """Augment one image into its full set of views, in canonical slot order."""
    recipe.validate()
    img_h, img_w = img.shape[1], img.shape[2]
    views = []
    global_index = 0
    for vt in recipe.view_types():
        record = _draw_record(rng, vt, global_index, recipe, img_h, img_w, stream_id)
        if vt is ViewType.GLOBAL:
            global_index += 1
        size = recipe.local_size if vt is ViewType.LOCAL else recipe.global_size
        raw = photometric(crop_resize(img, record.crop, size), record)

        online_raw = raw
        if record.cutout_rect is not None:
            online_raw = apply_cutout(raw, record.cutout_rect, stats.mean)
        target_raw = raw
        if record.target_cutout_rect is not None:
            target_raw = apply_cutout(raw, record.target_cutout_rect, stats.mean)

        online = normalize_channels(online_raw, stats)
        target = online if target_raw is online_raw else normalize_channels(target_raw, stats)
        views.append(View(vt, online, target, record))
    return views


def collate_views(images: np.ndarray, recipe: Recipe, seed: int, epoch: int,
                  sample_indices: np.ndarray, stats: DatasetStats) -> list[dict]:
    """Build views for a batch and stack them per view slot.

    Returns one dict per view slot with keys ``view_type``, ``online``,
    ``target`` (stacked (B, C, h, w) arrays), and ``records``.
    """
    from .rng import DOMAIN_AUGMENT, stream

    per_image = []
    for img, idx in zip(images, sample_indices):
        rng = stream(seed, DOMAIN_AUGMENT, int(epoch), int(idx))
        per_image.append(build_views(img, recipe, rng, stats,
                                     stream_id=(seed, int(epoch), int(idx))))
    slots = []
    for slot in range(recipe.n_views):
        vt = per_image[0][slot].view_type
        online = np.stack([vb[slot].online for vb in per_image])
        target = np.stack([vb[slot].target for vb in per_image])
        slots.append({
            "view_type": vt,
            "online": online,
            "target": target,
            "records": [vb[slot].record for vb in per_image],
        })
    return slots
