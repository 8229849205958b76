"""Image quality measures: PSNR, SSIM, MS-SSIM and bits per pixel.

All functions take ``H x W x 3`` arrays with unit dynamic range. SSIM
statistics use an 11x11 Gaussian window (sigma 1.5) applied without
padding, C1 = 0.01**2 and C2 = 0.03**2. MS-SSIM follows Wang et al.:
2x2 average pooling between scales (odd sides are first padded by
mirroring the last row/column), contrast-structure terms at every scale
but the coarsest, the full SSIM at the coarsest, combined as a weighted
geometric mean per channel and then averaged over the three channels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.size == 0:
        raise ShapeError(f"expected H x W x C images, got {x.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """PSNR in dB with peak 1.0; ``inf`` when the images are identical."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gauss1d(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * coords**2 / sigma**2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, 'valid' support only; img is H x W x C
    out = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(out, g.size, axis=1) @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean SSIM and mean contrast-structure term."""
    g = _gauss1d()
    c1, c2 = K1**2, K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    num0 = 2.0 * mx * my
    den0 = mx**2 + my**2
    lum = (num0 + c1) / (den0 + c1)
    num1 = 2.0 * _filter_valid(x * y, g)
    den1 = _filter_valid(x * x + y * y, g)
    cs = (num1 - num0 + c2) / (den1 - den0 + c2)
    return (lum * cs).mean(axis=(0, 1)), cs.mean(axis=(0, 1))


def ssim(x, y) -> float:
    """Single-scale SSIM averaged over channels (may be negative)."""
    x, y = _pair(x, y)
    if min(x.shape[:2]) < WINDOW:
        raise ConfigError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {x.shape[:2]}")
    return float(_ssim_terms(x, y)[0].mean())


def min_size_for_scales(scales: int) -> int:
    return 2 ** (scales - 1) * WINDOW


def max_scales(h: int, w: int, limit: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Largest pyramid depth (<= limit) whose coarsest level still fits the window."""
    s = 0
    while s < limit and min(h, w) >= min_size_for_scales(s + 1):
        s += 1
    return s


def scale_weights(scales: int) -> np.ndarray:
    """Standard exponents; truncated pyramids renormalise the leading ones to sum 1."""
    w = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    return w if scales == len(MS_SSIM_WEIGHTS) else w / w.sum()


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2), (0, 0)), mode="symmetric")
        h, w = img.shape[:2]
    return img.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def ms_ssim(x, y, scales: int = 5) -> float:
    """Multi-scale SSIM, per channel then averaged, in [0, 1]."""
    x, y = _pair(x, y)
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ConfigError(f"scales must lie in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    need = min_size_for_scales(scales)
    if min(x.shape[:2]) < need:
        raise ConfigError(
            f"MS-SSIM with {scales} scales needs min(H, W) >= {need}, got {x.shape[0]}x{x.shape[1]}"
        )
    weights = scale_weights(scales)
    terms = []
    for k in range(scales):
        if k:
            x, y = _downsample(x), _downsample(y)
        s, cs = _ssim_terms(x, y)
        terms.append(np.maximum(cs, 0.0))
    terms[-1] = np.maximum(s, 0.0)
    stacked = np.stack(terms, axis=-1)  # C x scales
    per_channel = np.prod(stacked ** weights, axis=-1)
    return float(np.clip(per_channel.mean(), 0.0, 1.0))


def bpp(codes: Sequence, image_h: int, image_w: int) -> float:
    """Total code bits divided by the true (unpadded) pixel count."""
    if image_h <= 0 or image_w <= 0:
        raise ConfigError(f"image area must be positive, got {image_h}x{image_w}")
    if len(codes) == 0:
        raise ConfigError("bpp of an empty code list")
    return sum(c.n_bits for c in codes) / (image_h * image_w)


@dataclass
class QualityReport:
    path: str
    bpp: float
    psnr_db: float
    ssim: float
    ms_ssim: float

    @classmethod
    def measure(cls, path: str, original, decoded, rate: float, scales: int | None = None) -> "QualityReport":
        x, y = _pair(original, decoded)
        s = scales if scales is not None else max_scales(*x.shape[:2])
        msv = ms_ssim(x, y, s) if s >= 1 else float("nan")
        sv = ssim(x, y) if min(x.shape[:2]) >= WINDOW else float("nan")
        return cls(path, rate, psnr(x, y), sv, msv)


CSV_HEADER = [f.name for f in fields(QualityReport)]


def write_reports(fh, reports: Iterable[QualityReport]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        row = astuple(r)
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
