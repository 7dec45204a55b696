"""Paired multi-crop views: MS global views and RGB global + local views.

Global crops are shared between the two modalities (same rectangle, same
flip). MS views are only cropped and resized; RGB views additionally go
through photometric augmentation. Crops are resampled bilinearly with
half-pixel centres, so a full-image crop at the original size is exact.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, ParameterError, SizeError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ViewConfig:
    n_global: int = 2
    n_local: int = 8
    global_size: int = 128
    local_size: int = 96
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    grayscale_prob: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigurationError(f"need n_global >= 1 and n_local >= 0, got {self.n_global}, {self.n_local}")
        if self.local_size > self.global_size:
            raise ConfigurationError(f"local_size {self.local_size} exceeds global_size {self.global_size}")


class CropRecord(NamedTuple):
    top: int
    left: int
    height: int
    width: int
    flip: bool


@dataclass
class ViewBatch:
    ms_views: list[np.ndarray]
    rgb_views: list[np.ndarray]
    ms_crops: list[CropRecord] = field(default_factory=list)
    rgb_crops: list[CropRecord] = field(default_factory=list)


def sample_crop(rng: np.random.Generator, height: int, width: int, scale, ratio) -> tuple[int, int, int, int]:
    """Random-resized-crop rectangle (top, left, h, w); falls back to the whole image."""
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


@lru_cache(maxsize=4096)
def _interp_matrix(n_src: int, n_out: int) -> np.ndarray:
    """[n_out, n_src] bilinear weights with half-pixel centres (identity when sizes match)."""
    pos = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    m = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def resized_crop(x: np.ndarray, rec: CropRecord, out: int) -> np.ndarray:
    """Bilinear resample of ``x[:, top:top+h, left:left+w]`` to ``out x out``."""
    sub = x[:, rec.top:rec.top + rec.height, rec.left:rec.left + rec.width]
    wx = _interp_matrix(rec.width, out)
    if rec.flip:
        wx = wx[::-1]
    return _interp_matrix(rec.height, out) @ sub @ wx.T


def _luma(view: np.ndarray) -> np.ndarray:
    return GRAY_WEIGHTS[0] * view[0] + GRAY_WEIGHTS[1] * view[1] + GRAY_WEIGHTS[2] * view[2]


def grayscale(view: np.ndarray) -> np.ndarray:
    return np.repeat(_luma(view)[None], 3, axis=0)


def solarize(view: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(view >= threshold, 1.0 - view, view)


def photometric_rgb(view: np.ndarray, cfg: ViewConfig, rng: np.random.Generator) -> np.ndarray:
    """Colour jitter, grayscale, blur and solarisation on a [3, s, s] view in [0, 1]."""
    out = view
    s = cfg.jitter_strength
    if s > 0 and rng.uniform() < cfg.jitter_prob:
        bright, contrast, sat = rng.uniform(max(0.0, 1 - s), 1 + s, size=3)
        out = out * bright
        gray_mean = float(_luma(out).mean())
        out = (out - gray_mean) * contrast + gray_mean
        gray = _luma(out)[None]
        out = np.clip((out - gray) * sat + gray, 0.0, 1.0)
    if cfg.grayscale_prob > 0 and rng.uniform() < cfg.grayscale_prob:
        out = grayscale(out)
    if cfg.blur_prob > 0 and rng.uniform() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = gaussian_filter(out, sigma=(0.0, sigma, sigma), mode="reflect")
    if cfg.solarize_prob > 0 and rng.uniform() < cfg.solarize_prob:
        out = solarize(out, cfg.solarize_threshold)
    return out


def normalize_modality(view: np.ndarray, mean, std) -> np.ndarray:
    """Map channel c to (v - mean[c]) / std[c]."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ParameterError("normalisation std entries must be positive")
    return (view - mean[:, None, None]) / std[:, None, None]


def make_views(x_ms: np.ndarray, rgb_band_indices, cfg: ViewConfig,
               rng: np.random.Generator | None = None, ms_stats=None, rgb_stats=None) -> ViewBatch:
    """Build one sample's paired views.

    ``ms_stats``/``rgb_stats`` are optional (mean, std) pairs applied as the
    final per-modality normalisation.
    """
    x_ms = np.asarray(x_ms, dtype=np.float64)
    c, h, w = x_ms.shape
    bands = list(rgb_band_indices)
    if len(bands) != 3 or any(not 0 <= b < c for b in bands):
        raise ParameterError(f"invalid RGB band indices {bands} for {c} channels")
    if h < cfg.global_size or w < cfg.global_size:
        raise SizeError(f"image {h}x{w} is smaller than the {cfg.global_size}px global crop")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    x_rgb = x_ms[bands]

    ms_views, rgb_views, ms_crops, rgb_crops = [], [], [], []
    for _ in range(cfg.n_global):
        rec = CropRecord(*sample_crop(rng, h, w, cfg.global_scale, cfg.ratio), bool(rng.uniform() < cfg.hflip_prob))
        ms_view = resized_crop(x_ms, rec, cfg.global_size)
        ms_views.append(ms_view)
        rgb_views.append(photometric_rgb(ms_view[bands], cfg, rng))
        ms_crops.append(rec)
        rgb_crops.append(rec)
    for _ in range(cfg.n_local):
        rec = CropRecord(*sample_crop(rng, h, w, cfg.local_scale, cfg.ratio), bool(rng.uniform() < cfg.hflip_prob))
        rgb_views.append(photometric_rgb(resized_crop(x_rgb, rec, cfg.local_size), cfg, rng))
        rgb_crops.append(rec)

    if ms_stats is not None:
        ms_views = [normalize_modality(v, *ms_stats) for v in ms_views]
    if rgb_stats is not None:
        rgb_views = [normalize_modality(v, *rgb_stats) for v in rgb_views]
    return ViewBatch(ms_views, rgb_views, ms_crops, rgb_crops)
