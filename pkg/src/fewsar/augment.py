"""Stochastic chip augmentations and the two-view pipeline.

The view pipeline applies, in order: random resized crop, random horizontal
flip, then five intensity transforms (linear re-scale, power scaling,
speckle replacement, additive Gaussian noise, Gaussian blur), each gated by
its own apply probability. All transforms map valid chips to valid chips
(values stay in [0, 1]) and are bit-reproducible given the same rng state.

Each random transform has a deterministic core (``apply_*``) taking explicit
parameter values, plus a thin wrapper that draws those values from an rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import Chip
from .errors import ParameterError

TRANSFORM_ORDER = (
    "clip_and_scale",
    "pow_scale",
    "speckle_noise",
    "gaussian_noise",
    "gaussian_blur",
)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_out_size: int = 32
    crop_scale: tuple = (0.5, 1.0)
    flip_prob: float = 0.5
    clip_scale_range: tuple = (0.5, 1.0)
    pow_range: tuple = (0.5, 2.0)
    speckle_frac_range: tuple = (0.0, 0.05)
    gauss_noise_std_range: tuple = (0.0, 0.10)
    blur_sigma_range: tuple = (0.1, 2.0)
    per_transform_apply_prob: dict = field(
        default_factory=lambda: {name: 0.5 for name in TRANSFORM_ORDER}
    )

    def __post_init__(self):
        if self.crop_out_size < 8:
            raise ParameterError("crop_out_size must be >= 8")
        _check_range("crop_scale", self.crop_scale, 0.0, 1.0, lo_open=True)
        _check_prob("flip_prob", self.flip_prob)
        _check_range("clip_scale_range", self.clip_scale_range, 0.0, 1.0, lo_open=True)
        a, b = self.pow_range
        if not (0.0 < a <= 1.0 <= b):
            raise ParameterError(f"pow_range must satisfy 0 < a <= 1 <= b, got {(a, b)}")
        _check_range("speckle_frac_range", self.speckle_frac_range, 0.0, 1.0)
        _check_range("gauss_noise_std_range", self.gauss_noise_std_range, 0.0, math.inf)
        _check_range("blur_sigma_range", self.blur_sigma_range, 0.0, math.inf, lo_open=True)
        probs = dict(self.per_transform_apply_prob)
        unknown = set(probs) - set(TRANSFORM_ORDER)
        if unknown:
            raise ParameterError(f"unknown transform names in apply probs: {sorted(unknown)}")
        for name in TRANSFORM_ORDER:
            probs.setdefault(name, 0.5)
            _check_prob(f"apply prob for {name}", probs[name])
        object.__setattr__(self, "per_transform_apply_prob", probs)


def _check_range(name, rng_pair, lo, hi, lo_open=False):
    a, b = rng_pair
    if not (a <= b):
        raise ParameterError(f"{name} must be nondecreasing, got {(a, b)}")
    if a < lo or (lo_open and a <= lo) or b > hi:
        raise ParameterError(f"{name} out of bounds: {(a, b)}")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"{name} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class ViewPair:
    view_a: Chip
    view_b: Chip


# ---------------------------------------------------------------------------
# deterministic cores


def apply_clip_and_scale(chip: Chip, max_val: float) -> Chip:
    if not 0.0 < max_val <= 1.0:
        raise ParameterError(f"max_val must lie in (0, 1], got {max_val}")
    m = np.float32(max_val)
    return Chip(np.clip(chip.pixels, np.float32(0.0), m) / m)


def apply_pow(chip: Chip, val: float) -> Chip:
    if val <= 0:
        raise ParameterError(f"exponent must be > 0, got {val}")
    return Chip(np.power(chip.pixels, np.float32(val)))


def apply_speckle(chip: Chip, frac: float, rng) -> Chip:
    if not 0.0 <= frac <= 1.0:
        raise ParameterError(f"speckle fraction must lie in [0, 1], got {frac}")
    h, w = chip.pixels.shape
    count = int(np.rint(frac * h * w))
    out = chip.pixels.copy()
    if count:
        flat = out.reshape(-1)
        positions = rng.choice(h * w, size=count, replace=False)
        flat[positions] = rng.random(count, dtype=np.float32)
    return Chip(out)


def apply_gaussian_noise(chip: Chip, std: float, rng) -> Chip:
    if std < 0:
        raise ParameterError(f"noise std must be >= 0, got {std}")
    noise = rng.standard_normal(chip.pixels.shape, dtype=np.float32)
    return Chip(np.clip(chip.pixels + np.float32(std) * noise, 0.0, 1.0))


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at ceil(3 * sigma)."""
    if sigma <= 0:
        raise ParameterError(f"blur sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(chip: Chip, sigma: float) -> Chip:
    """Separable Gaussian convolution with reflected borders."""
    k = blur_kernel(sigma)
    out = chip.pixels.astype(np.float64)
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return Chip(np.clip(out, 0.0, 1.0).astype(np.float32))


def bilinear_resize(pixels: np.ndarray, out_size: int) -> np.ndarray:
    """Resize with corner-aligned bilinear sampling; same-size is identity."""
    h, w = pixels.shape
    if (h, w) == (out_size, out_size):
        return pixels.copy()

    def grid(n_in):
        if out_size == 1 or n_in == 1:
            return np.zeros(out_size), np.zeros(out_size, dtype=int)
        src = np.arange(out_size) * ((n_in - 1) / (out_size - 1))
        i0 = np.floor(src).astype(int)
        i0 = np.minimum(i0, n_in - 2)
        return src - i0, i0

    fy, y0 = grid(h)
    fx, x0 = grid(w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    px = pixels.astype(np.float64)
    out = (
        px[np.ix_(y0, x0)] * np.outer(1 - fy, 1 - fx)
        + px[np.ix_(y0, x1)] * np.outer(1 - fy, fx)
        + px[np.ix_(y1, x0)] * np.outer(fy, 1 - fx)
        + px[np.ix_(y1, x1)] * np.outer(fy, fx)
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# random wrappers


def clip_and_scale(chip: Chip, a: float, b: float, rng) -> Chip:
    if not 0.0 < a <= b <= 1.0:
        raise ParameterError(f"clip range must satisfy 0 < a <= b <= 1, got {(a, b)}")
    return apply_clip_and_scale(chip, float(rng.uniform(a, b)))


def pow_scale(chip: Chip, a: float, b: float, rng) -> Chip:
    if not (0.0 < a <= 1.0 <= b):
        raise ParameterError(f"pow range must satisfy 0 < a <= 1 <= b, got {(a, b)}")
    if rng.integers(0, 2) == 0:
        val = float(rng.uniform(a, 1.0))
    else:
        val = float(rng.uniform(1.0, b))
    return apply_pow(chip, val)


def speckle_noise(chip: Chip, a: float, b: float, rng) -> Chip:
    if not 0.0 <= a <= b <= 1.0:
        raise ParameterError(f"speckle range must satisfy 0 <= a <= b <= 1, got {(a, b)}")
    return apply_speckle(chip, float(rng.uniform(a, b)), rng)


def gaussian_noise(chip: Chip, a: float, b: float, rng) -> Chip:
    if not 0.0 <= a <= b:
        raise ParameterError(f"noise range must satisfy 0 <= a <= b, got {(a, b)}")
    return apply_gaussian_noise(chip, float(rng.uniform(a, b)), rng)


def random_resized_crop(chip: Chip, out_size: int, scale: tuple, rng) -> Chip:
    if out_size < 8:
        raise ParameterError("out_size must be >= 8")
    lo, hi = scale
    if not (0.0 < lo <= hi <= 1.0):
        raise ParameterError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {scale}")
    h, w = chip.pixels.shape
    frac = rng.uniform(lo, hi)
    side = int(np.rint(math.sqrt(frac * h * w)))
    side = max(1, min(side, h, w))
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    window = chip.pixels[y : y + side, x : x + side]
    return Chip(bilinear_resize(window, out_size))


def random_horizontal_flip(chip: Chip, p: float, rng) -> Chip:
    _check_prob("flip probability", p)
    if rng.random() < p:
        return Chip(chip.pixels[:, ::-1].copy())
    return Chip(chip.pixels.copy())


def _augment_view(chip: Chip, cfg: AugmentationConfig, rng) -> Chip:
    out = random_resized_crop(chip, cfg.crop_out_size, cfg.crop_scale, rng)
    out = random_horizontal_flip(out, cfg.flip_prob, rng)
    probs = cfg.per_transform_apply_prob
    if rng.random() < probs["clip_and_scale"]:
        out = clip_and_scale(out, *cfg.clip_scale_range, rng)
    if rng.random() < probs["pow_scale"]:
        out = pow_scale(out, *cfg.pow_range, rng)
    if rng.random() < probs["speckle_noise"]:
        out = speckle_noise(out, *cfg.speckle_frac_range, rng)
    if rng.random() < probs["gaussian_noise"]:
        out = gaussian_noise(out, *cfg.gauss_noise_std_range, rng)
    if rng.random() < probs["gaussian_blur"]:
        out = gaussian_blur(out, float(rng.uniform(*cfg.blur_sigma_range)))
    return out


def make_view_pair(chip: Chip, cfg: AugmentationConfig, rng) -> ViewPair:
    """Two independently augmented views of one chip (draws come from rng in
    a fixed order, so a seeded rng reproduces the pair bit for bit)."""
    return ViewPair(_augment_view(chip, cfg, rng), _augment_view(chip, cfg, rng))


def stage2_augment(chip: Chip, noise_std: float, flip_prob: float, rng) -> Chip:
    """Light augmentation for classifier training: noise then flip."""
    out = apply_gaussian_noise(chip, noise_std, rng)
    return random_horizontal_flip(out, flip_prob, rng)
