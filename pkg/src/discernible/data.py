"""Procedural 10-class texture images used as the desk-scale proxy task.

Every class is a family of periodic or stochastic patterns rendered with
random colours, period, phase, orientation jitter, illumination gradient
and sensor noise. Class identity lives in mid spatial frequencies
(periods of 6 to 12 px), right where a 0.5 bpp code starts to smear
detail. A codec that only minimises pixel error tends to average those
patterns away, so the task shows whether compression keeps them
recognisable.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .codec import PATCH, tile
from .errors import ConfigError

CLASS_NAMES = (
    "horizontal", "vertical", "diagonal", "antidiagonal", "checker",
    "dots", "rings", "grid", "blobs", "speckle",
)
N_CLASSES = len(CLASS_NAMES)

# Pattern periods in pixels. The codec's latent cell is 8 px wide, so the low
# end sits just above what one cell can describe on its own.
PERIOD_MIN, PERIOD_MAX = 6.0, 12.0
SPECKLE_SIGMA = (1.0, 1.5)
# Bumped whenever rendering changes, so cached classifiers are not reused.
DATA_VERSION = 2


def _colours(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    while True:
        a, b = rng.uniform(0.05, 0.95, size=(2, 3))
        if abs(a.mean() - b.mean()) > 0.25:
            return a, b


def _grating(xx, yy, angle, period, phase):
    u = xx * np.cos(angle) + yy * np.sin(angle)
    return 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)


def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(PERIOD_MIN, PERIOD_MAX)
    phase = rng.uniform(0, 2 * np.pi)
    jitter = np.deg2rad(rng.uniform(-12, 12))
    if label in (0, 1, 2, 3):
        base = (np.pi / 2, 0.0, np.pi / 4, -np.pi / 4)[label]
        return _grating(xx, yy, base + jitter, period, phase)
    if label == 4:
        a = _grating(xx, yy, jitter, period, phase) - 0.5
        b = _grating(xx, yy, jitter + np.pi / 2, period, rng.uniform(0, 2 * np.pi)) - 0.5
        return 0.5 + 2.0 * a * b
    if label == 5:
        off = rng.uniform(0, period, size=2)
        u = np.mod(xx - off[0], period) - period / 2
        v = np.mod(yy - off[1], period) - period / 2
        r = period * rng.uniform(0.18, 0.3)
        return np.exp(-(u**2 + v**2) / (2 * r * r))
    if label == 6:
        cx, cy = rng.uniform(-0.25, 1.25, size=2) * size
        rad = np.hypot(xx - cx, yy - cy)
        return 0.5 + 0.5 * np.sin(2 * np.pi * rad / period + phase)
    if label == 7:
        width = rng.uniform(0.8, 1.5)
        off = rng.uniform(0, period, size=2)
        u = np.abs(np.mod(xx - off[0], period) - period / 2)
        v = np.abs(np.mod(yy - off[1], period) - period / 2)
        return np.maximum(np.exp(-(u**2) / width), np.exp(-(v**2) / width))
    if label == 8:
        field = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(4.0, 7.0), mode="wrap")
        return 1.0 / (1.0 + np.exp(-field / (field.std() + 1e-9) * 3))
    if label == 9:
        field = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(*SPECKLE_SIGMA), mode="wrap")
        return 1.0 / (1.0 + np.exp(-field / (field.std() + 1e-9) * 2))
    raise ConfigError(f"unknown class {label}")


def render(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``size x size x 3`` image of class ``label`` in [0, 1]."""
    mask = _pattern(label, size, rng)[..., None]
    bg, fg = _colours(rng)
    img = bg * (1 - mask) + fg * mask
    yy, xx = np.mgrid[0:size, 0:size] / size
    g = rng.uniform(-0.2, 0.2, size=2)
    img = img * (1 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5))[..., None]
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(n: int, size: int = 96, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced set of ``n`` images ``(n, size, size, 3)`` and integer labels."""
    if n < 1:
        raise ConfigError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % N_CLASSES
    rng.shuffle(labels)
    images = np.stack([render(int(c), size, rng) for c in labels])
    return images, labels.astype(np.int64)


def to_patches(images: np.ndarray) -> np.ndarray:
    """Non-overlapping 32x32 patches of every image (sides must be multiples of 32)."""
    images = np.asarray(images)
    if images.shape[1] % PATCH or images.shape[2] % PATCH:
        raise ConfigError(f"image sides must be multiples of {PATCH}, got {images.shape[1:3]}")
    return np.concatenate([tile(im) for im in images])
