"""Deterministic image corruptions at five severity levels.

Each corruption maps a (3, H, W) float image with values in [0, 1] to
another such image. Severity tables are fixed here; level 5 is the
harshest. Stochastic kinds (the three noises) consume a seed, the rest
are pure functions of the input.
"""

import dataclasses
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import DatasetContainer
from .seeding import derive_rng

SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # sigma
    "shot_noise": (500.0, 250.0, 100.0, 75.0, 50.0),    # lambda
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),    # pixel fraction
    "defocus_blur": (1, 2, 3, 4, 6),                    # disk radius, px
    "motion_blur": (3, 5, 7, 9, 11),                    # line length, px
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),       # additive shift
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),            # scale toward mean
    "pixelate": (1.33, 1.6, 2.0, 2.67, 4.0),            # downsample factor
}

CORRUPTION_NAMES = tuple(SEVERITY_TABLES)
STOCHASTIC_KINDS = frozenset({"gaussian_noise", "shot_noise", "impulse_noise"})


@dataclasses.dataclass(frozen=True)
class CorruptionSpec:
    name: str
    severity: int
    seed: int = None

    def __post_init__(self):
        if self.name not in SEVERITY_TABLES:
            raise ValueError(f"unknown corruption {self.name!r}; "
                             f"choose from {sorted(SEVERITY_TABLES)}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity {self.severity} outside 1..5")

    @property
    def param(self):
        return SEVERITY_TABLES[self.name][self.severity - 1]


def _check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    return image


def _clip(image):
    return np.clip(image, 0.0, 1.0)


def gaussian_noise(image, sigma, rng):
    return _clip(image + rng.normal(0.0, sigma, size=image.shape))


def shot_noise(image, lam, rng):
    return _clip(rng.poisson(image * lam) / lam)


def impulse_noise(image, fraction, rng):
    """Salt-and-pepper on whole pixels: an affected spatial location has
    all three channels forced to a single value drawn from {0, 1}."""
    _, h, w = image.shape
    hit = rng.random((h, w)) < fraction
    value = rng.integers(0, 2, size=(h, w)).astype(np.float64)
    out = image.copy()
    out[:, hit] = value[hit]
    return out


def disk_kernel(radius):
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    mask = (yy * yy + xx * xx) <= radius * radius
    kernel = mask.astype(np.float64)
    return kernel / kernel.sum()


def line_kernel(length):
    """Normalized 45-degree line of `length` taps (odd lengths only)."""
    if length % 2 != 1:
        raise ValueError(f"line kernel length must be odd, got {length}")
    kernel = np.eye(length)[::-1]  # anti-diagonal
    return kernel / kernel.sum()


def _convolve_channels(image, kernel):
    """Per-channel 2-D convolution with edge-replicate padding, so a
    constant image comes back bit-for-bit constant."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,ij->chw", windows, kernel)


def defocus_blur(image, radius):
    return _clip(_convolve_channels(image, disk_kernel(int(radius))))


def motion_blur(image, length):
    return _clip(_convolve_channels(image, line_kernel(int(length))))


def brightness(image, shift):
    return _clip(image + shift)


def contrast(image, scale):
    mean = image.mean()
    return _clip((image - mean) * scale + mean)


def _area_downsample(channel, out_h, out_w):
    """Exact box-filter resize: replicate up to the LCM grid, then
    average integer-sized blocks."""
    h, w = channel.shape
    lh = math.lcm(h, out_h)
    lw = math.lcm(w, out_w)
    up = np.repeat(np.repeat(channel, lh // h, axis=0), lw // w, axis=1)
    bh, bw = lh // out_h, lw // out_w
    return up.reshape(out_h, bh, out_w, bw).mean(axis=(1, 3))


def pixelate(image, factor):
    _, h, w = image.shape
    out_h = max(1, round(h / factor))
    out_w = max(1, round(w / factor))
    rows = np.arange(h) * out_h // h
    cols = np.arange(w) * out_w // w
    small = np.stack([_area_downsample(c, out_h, out_w) for c in image])
    return _clip(small[:, rows[:, None], cols[None, :]])


_STOCHASTIC = {
    "gaussian_noise": gaussian_noise,
    "shot_noise": shot_noise,
    "impulse_noise": impulse_noise,
}
_PURE = {
    "defocus_blur": defocus_blur,
    "motion_blur": motion_blur,
    "brightness": brightness,
    "contrast": contrast,
    "pixelate": pixelate,
}


def corrupt(image, spec):
    """Apply one corruption at one severity; returns a new float64 image."""
    image = _check_image(image)
    if spec.name in _STOCHASTIC:
        if spec.seed is None:
            raise ValueError(f"{spec.name} is stochastic and needs a seed")
        rng = np.random.default_rng(spec.seed)
        return _STOCHASTIC[spec.name](image, spec.param, rng)
    return _PURE[spec.name](image, spec.param)


def corrupt_dataset(dataset, specs, seed):
    """Apply each spec to every image of `dataset`, yielding one tagged
    container per spec. The input container is never mutated; sample
    order and labels carry over. Per-sample randomness comes from seeds
    derived as (seed, sample index, name, severity), so results do not
    depend on iteration order or sharding.
    """
    out = {}
    for spec in specs:
        images = np.empty_like(dataset.images)
        for i in range(len(dataset)):
            if spec.name in _STOCHASTIC:
                rng = derive_rng(seed, i, spec.name, spec.severity)
                corrupted = _STOCHASTIC[spec.name](
                    dataset.images[i].astype(np.float64), spec.param, rng)
            else:
                corrupted = _PURE[spec.name](
                    dataset.images[i].astype(np.float64), spec.param)
            images[i] = corrupted.astype(dataset.images.dtype)
        meta = dict(dataset.meta)
        meta.update(corruption=spec.name, severity=spec.severity, seed=seed)
        out[(spec.name, spec.severity)] = DatasetContainer(
            images, dataset.labels.copy(), dataset.split, meta)
    return out
