"""Tiny binary image dataset format and the synthetic dataset generator.

File layout ("LCIMG1"): magic, count u32, height u16, width u16, channels u8,
label flag u8, then per record channels*height*width u8 pixels followed by an
optional u16 little-endian label. Pixels decode to floats in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError

_MAGIC = b"LCIMG1"


@dataclass
class TinyImageDataset:
    images: np.ndarray           # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray | None    # [n] int or None

    def __len__(self):
        return len(self.images)


def save_dataset(ds: TinyImageDataset, path: str):
    n, c, h, w = ds.images.shape
    labeled = ds.labels is not None
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IHHBB", n, h, w, c, int(labeled)))
        pix = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
        for i in range(n):
            f.write(pix[i].tobytes())
            if labeled:
                f.write(struct.pack("<H", int(ds.labels[i])))


def load_dataset(path: str) -> TinyImageDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 10:
        raise CheckpointError(f"{path}: truncated dataset header")
    if blob[:6] != _MAGIC:
        raise CheckpointError(f"{path}: bad dataset magic {blob[:6]!r}")
    n, h, w, c, labeled = struct.unpack("<IHHBB", blob[6:16])
    rec = c * h * w + (2 if labeled else 0)
    body = blob[16:]
    if len(body) != n * rec:
        raise CheckpointError(
            f"{path}: expected {n * rec} payload bytes, found {len(body)}")
    images = np.empty((n, c, h, w))
    labels = np.empty(n, dtype=np.int64) if labeled else None
    for i in range(n):
        chunk = body[i * rec:(i + 1) * rec]
        images[i] = np.frombuffer(chunk[:c * h * w], dtype=np.uint8).reshape(c, h, w) / 255.0
        if labeled:
            labels[i] = struct.unpack("<H", chunk[c * h * w:])[0]
    return TinyImageDataset(images=images, labels=labels)


# ---------------------------------------------------------------------------
# synthetic images: class-determined global shape over local texture

N_SHAPES = 8  # circle, square, triangle, plus, ring, diamond, hstripes, vstripes


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == 0:    # circle
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == 1:    # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == 2:    # triangle (upward)
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == 3:    # plus
        return ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r))
    if kind == 4:    # ring
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == 5:    # diamond
        return np.abs(dx) + np.abs(dy) <= r
    if kind == 6:    # horizontal stripes inside a disc
        return (dx ** 2 + dy ** 2 <= r ** 2) & (np.floor(yy / 3) % 2 == 0)
    if kind == 7:    # vertical stripes inside a disc
        return (dx ** 2 + dy ** 2 <= r ** 2) & (np.floor(xx / 3) % 2 == 0)
    raise ConfigError(f"no shape {kind}")


def generate_synthetic(count: int, size: int = 32, n_classes: int = 8,
                       seed: int = 0) -> TinyImageDataset:
    """Parametric images whose class is the global structure (a shape drawn at
    random position and scale) over a noise-textured background."""
    if not 1 <= n_classes <= N_SHAPES:
        raise ConfigError(f"n_classes must lie in [1, {N_SHAPES}]")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        cls = i % n_classes
        base = rng.uniform(0.15, 0.55, size=3)
        texture = rng.normal(0.0, 0.08, size=(3, size, size))
        img = np.clip(base[:, None, None] + texture, 0.0, 1.0)
        r = rng.uniform(0.2, 0.38) * size
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        fg = rng.uniform(0.6, 1.0, size=3)
        mask = _shape_mask(cls, size, cx, cy, r)
        img[:, mask] = fg[:, None] + rng.normal(0.0, 0.04, size=(3, int(mask.sum())))
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = cls
    # quantize exactly as the file format would, so in-memory use matches disk
    images = np.round(images * 255.0) / 255.0
    return TinyImageDataset(images=images, labels=labels)
