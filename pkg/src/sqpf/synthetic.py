"""Desk-scale synthetic segmentation data.

Each case holds one image per shape family: a single filled shape on a
background, with per-image foreground/background intensities drawn from
configured ranges, an optional linear bias field, and Gaussian noise. The
per-image intensity draw is what makes a support and a query of the same
family look different.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import SliceSample, normalize_slice
from .errors import DataError

MIN_SHAPE_PIXELS = 16

DEFAULT_RANGES = {
    "background": (0.0, 0.4),
    "ellipse": (0.5, 1.0),
    "rectangle": (0.45, 0.95),
    "crescent": (0.55, 1.0),
    "distractor": (0.3, 1.0),
}


@dataclass(frozen=True)
class SyntheticConfig:
    n_cases: int = 30
    image_size: int = 256
    shape_families: tuple[str, ...] = ("ellipse", "rectangle", "crescent")
    noise_sigma: float = 0.08
    intensity_ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    # shape radius as a fraction of the image side
    min_scale: float = 0.12
    max_scale: float = 0.3
    bias_field: float = 0.0
    # unlabeled blobs placed off the target; they share the foreground's intensity band
    n_distractors: int = 0
    distractor_scale: float = 0.08
    k_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.shape_families) - set(SHAPES)
        if unknown:
            raise DataError(f"unknown shape families {sorted(unknown)}")
        if self.n_cases < self.k_folds:
            raise DataError(f"n_cases={self.n_cases} < k_folds={self.k_folds}")
        if not 0 < self.min_scale <= self.max_scale:
            raise DataError("need 0 < min_scale <= max_scale")
        required = {"background", *self.shape_families}
        if self.n_distractors:
            required.add("distractor")
        missing = required - set(self.intensity_ranges)
        if missing:
            raise DataError(f"intensity_ranges lacks {sorted(missing)}")


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _rotated(yy, xx, cy, cx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def _ellipse(yy, xx, cy, cx, r, rng):
    u, v = _rotated(yy, xx, cy, cx, rng.uniform(0, math.pi))
    b = r * rng.uniform(0.5, 1.0)
    return (u / r) ** 2 + (v / b) ** 2 <= 1


def _rectangle(yy, xx, cy, cx, r, rng):
    # r is the half-diagonal so the shape stays inside a radius-r disk
    aspect = rng.uniform(0.4, 1.0)
    half_w = r / math.sqrt(1 + aspect**2)
    half_h = aspect * half_w
    u, v = _rotated(yy, xx, cy, cx, rng.uniform(0, math.pi))
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)


def _crescent(yy, xx, cy, cx, r, rng):
    theta = rng.uniform(0, 2 * math.pi)
    offset = 0.45 * r
    oy, ox = cy + offset * math.sin(theta), cx + offset * math.cos(theta)
    outer = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    inner = (yy - oy) ** 2 + (xx - ox) ** 2 <= (0.8 * r) ** 2
    return outer & ~inner


SHAPES = {"ellipse": _ellipse, "rectangle": _rectangle, "crescent": _crescent}


def _is_valid(mask: np.ndarray) -> bool:
    if mask.sum() < MIN_SHAPE_PIXELS:
        return False
    _, n = ndimage.label(mask)
    return n == 1


def render_shape(family: str, size: int, config: SyntheticConfig, rng: np.random.Generator):
    """Binary mask of one randomly placed shape that fits inside the image."""
    r_min = config.min_scale * size
    r_max = min(config.max_scale * size, size / 2 - 1)
    if r_min > r_max:
        raise DataError(f"{family}: minimum radius {r_min:.1f} does not fit a {size}px image")
    yy, xx = _grid(size)
    for _ in range(100):
        r = rng.uniform(r_min, r_max)
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = SHAPES[family](yy, xx, cy, cx, r, rng)
        if _is_valid(mask):
            return mask.astype(np.uint8)
    raise DataError(f"{family}: could not render a connected shape of >= {MIN_SHAPE_PIXELS} px")


def render_distractors(mask, config, rng):
    """Label-free blobs that stay at least two pixels away from the target."""
    size = mask.shape[0]
    yy, xx = _grid(size)
    keep_out = ndimage.binary_dilation(mask > 0, iterations=2)
    lo, hi = config.intensity_ranges.get("distractor", (0.0, 0.0))
    layers = []
    for _ in range(config.n_distractors):
        r = config.distractor_scale * size * rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(r, size - r, size=2)
        blob = _ellipse(yy, xx, cy, cx, r, rng) & ~keep_out
        layers.append((blob, rng.uniform(lo, hi)))
    return layers


def render_image(mask, family, config, rng):
    lo, hi = config.intensity_ranges[family]
    blo, bhi = config.intensity_ranges["background"]
    fg_level = rng.uniform(lo, hi)
    bg_level = rng.uniform(blo, bhi)
    image = np.where(mask > 0, fg_level, bg_level)
    for blob, level in render_distractors(mask, config, rng):
        image[blob] = level
    if config.bias_field > 0:
        size = mask.shape[0]
        yy, xx = _grid(size)
        direction = rng.uniform(0, 2 * math.pi)
        ramp = (math.cos(direction) * xx + math.sin(direction) * yy) / size - 0.5
        image = image + config.bias_field * ramp
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=mask.shape)
    return image


def synth_generate(config: SyntheticConfig) -> list[SliceSample]:
    """One normalized slice per (case, family); a pure function of ``config``."""
    samples = []
    for i in range(config.n_cases):
        rng = np.random.default_rng([config.seed, i])
        case_id = f"case{i:04d}"
        for family in config.shape_families:
            mask = render_shape(family, config.image_size, config, rng)
            image = render_image(mask, family, config, rng)
            samples.append(
                SliceSample(
                    case_id=case_id,
                    slice_index=0,
                    image=normalize_slice(image),
                    mask=mask,
                    class_label=family,
                )
            )
    return samples
