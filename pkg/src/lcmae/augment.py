"""Two-view construction: an undistorted online view plus a photometrically
distorted target view sharing the same crop geometry and flip.

Images are plain numpy arrays [3, H, W] with values in [0, 1]; they only
become autograd tensors after patchification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import DataError

_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    crop_mode: str = "SRC"          # "SRC" | "RRC"
    out_size: int = 32
    rrc_scale: tuple[float, float] = (0.2, 1.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    three_augment: bool = True
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_threshold: float = 0.5
    hflip_prob: float = 0.5
    shared_geometry: bool = True    # independent crops only for experiments


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [c, h, w] with half-pixel centers."""
    c, h, w = img.shape
    if h == out_h and w == out_w:
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def simple_resized_crop(img: np.ndarray, out_size: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    """Resize shorter side to 9/8 of the target, then take a random square
    crop: aspect-preserving with a small translation jitter."""
    c, h, w = img.shape
    if h < 2 or w < 2:
        raise DataError(f"source image too small: {h}x{w}")
    short = min(h, w)
    scale = (out_size * 9 / 8) / short
    nh, nw = max(out_size, int(round(h * scale))), max(out_size, int(round(w * scale)))
    resized = resize_bilinear(img, nh, nw)
    top = int(rng.integers(0, nh - out_size + 1))
    left = int(rng.integers(0, nw - out_size + 1))
    crop = resized[:, top:top + out_size, left:left + out_size]
    return crop, ("SRC", top, left, out_size, out_size)


def random_resized_crop(img: np.ndarray, scale_range: tuple[float, float],
                        out_size: int, rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    """Sample an area fraction and aspect ratio (3/4..4/3), crop, resize.

    Falls back to a center crop after 10 failed attempts."""
    c, h, w = img.shape
    area = h * w
    lo, hi = scale_range
    for _ in range(10):
        target_area = area * rng.uniform(lo, hi)
        log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
        ratio = np.exp(log_ratio)
        cw = int(round(np.sqrt(target_area * ratio)))
        ch = int(round(np.sqrt(target_area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top:top + ch, left:left + cw]
            return resize_bilinear(crop, out_size, out_size), ("RRC", top, left, ch, cw)
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = img[:, top:top + side, left:left + side]
    return resize_bilinear(crop, out_size, out_size), ("RRC-center", top, left, side, side)


def _to_gray(img: np.ndarray) -> np.ndarray:
    g = np.tensordot(_GRAY, img, axes=(0, 0))
    return np.stack([g, g, g])


def photometric(img: np.ndarray, cfg: AugmentConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, list]:
    """Color jitter then exactly one of {blur, grayscale, solarize}."""
    record = []
    out = img
    if cfg.brightness > 0:
        f = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        out = out * f
        record.append(("brightness", f))
    if cfg.contrast > 0:
        f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        out = (out - out.mean()) * f + out.mean()
        record.append(("contrast", f))
    if cfg.saturation > 0:
        f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        gray = _to_gray(out)
        out = gray + (out - gray) * f
        record.append(("saturation", f))
    if cfg.three_augment:
        op = ("blur", "grayscale", "solarize")[int(rng.integers(0, 3))]
        if op == "blur":
            sigma = rng.uniform(*cfg.blur_sigma)
            if sigma > 0:
                out = gaussian_filter1d(out, sigma, axis=1, mode="nearest")
                out = gaussian_filter1d(out, sigma, axis=2, mode="nearest")
            record.append(("blur", sigma))
        elif op == "grayscale":
            out = _to_gray(out)
            record.append(("grayscale", None))
        else:
            thr = cfg.solarize_threshold
            out = np.where(out >= thr, 1.0 - out, out)
            record.append(("solarize", thr))
    return np.clip(out, 0.0, 1.0), record


@dataclass
class ViewPair:
    online_view: np.ndarray
    target_view: np.ndarray
    crop_record: tuple = ()
    photometric_record: list = field(default_factory=list)


def make_view_pair(img: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> ViewPair:
    """One crop plus shared flip makes the base view; the online view is the
    base unmodified, the target view is its photometric distortion."""
    if cfg.crop_mode == "SRC":
        base, crop_rec = simple_resized_crop(img, cfg.out_size, rng)
    elif cfg.crop_mode == "RRC":
        base, crop_rec = random_resized_crop(img, cfg.rrc_scale, cfg.out_size, rng)
    else:
        raise DataError(f"unknown crop mode: {cfg.crop_mode!r}")
    flip = rng.uniform() < cfg.hflip_prob
    if flip:
        base = base[:, :, ::-1].copy()
    crop_rec = crop_rec + (flip,)
    if not cfg.shared_geometry:
        # experimental: an independent crop for the target branch
        if cfg.crop_mode == "SRC":
            tgt_base, _ = simple_resized_crop(img, cfg.out_size, rng)
        else:
            tgt_base, _ = random_resized_crop(img, cfg.rrc_scale, cfg.out_size, rng)
        if rng.uniform() < cfg.hflip_prob:
            tgt_base = tgt_base[:, :, ::-1].copy()
    else:
        tgt_base = base
    target, photo_rec = photometric(tgt_base, cfg, rng)
    online = np.clip(base, 0.0, 1.0)
    return ViewPair(online_view=online, target_view=target,
                    crop_record=crop_rec, photometric_record=photo_rec)
