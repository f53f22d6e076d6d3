"""Diagnostics: per-head attention maps for a query patch, mean attention
distance, and layer-wise singular-value spectra with cross-model gap curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .model import ModelState
from .tensor import Tensor
from .vit import AttentionRecord, block_forward, encoder_forward, patchify
from . import vit as _vit


@dataclass
class AttentionMapResult:
    query_index: int
    layer: int
    maps: np.ndarray  # [heads, gridH, gridW], each head sums to 1


@dataclass
class SpectrumResult:
    layer: int
    singular_values: np.ndarray  # descending, non-negative


def attention_maps(state: ModelState, image: np.ndarray, query_index: int,
                   layer: int = -1) -> AttentionMapResult:
    """Attention row of the query token at the chosen layer, one grid per head.

    Runs a full-token forward (no masking)."""
    cfg = state.vit
    n = cfg.n_tokens
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} outside [0, {n})")
    patches = Tensor(patchify(image[None], cfg.patch_size))
    idx = np.arange(n)[None, :]
    _, records = encoder_forward(state.online, patches, idx, cfg, capture=True)
    rec = records[layer]
    q = query_index + (1 if cfg.use_cls else 0)
    body = rec.weights[0, :, q, (1 if cfg.use_cls else 0):]
    # renormalize in the CLS case so each head's grid still sums to one
    body = body / body.sum(axis=-1, keepdims=True)
    g = cfg.grid
    return AttentionMapResult(query_index=query_index, layer=rec.layer,
                              maps=body.reshape(-1, g, g))


def mean_attention_distance(attn: AttentionRecord, grid) -> np.ndarray:
    """Per-head attention-weighted mean Euclidean distance between patch-grid
    centers, in patch units. `grid` is a side length or a (rows, cols) pair."""
    gh, gw = (grid, grid) if isinstance(grid, int) else grid
    w = attn.weights
    b, heads, q, k = w.shape
    if q != gh * gw or k != gh * gw:
        raise ContractError(
            f"attention {q}x{k} does not cover a full {gh}x{gw} grid")
    pos = np.stack(np.unravel_index(np.arange(gh * gw), (gh, gw)), axis=1)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    return (w * dist[None, None]).sum(axis=(2, 3)).mean(axis=0) / q


def layer_features(state: ModelState, images: np.ndarray, layer: int,
                   batch_size: int = 256) -> np.ndarray:
    """Mean-pooled token outputs of encoder block `layer` (0-based; depth-1 is
    the last block) per sample, full-token forward."""
    cfg = state.vit
    if not 0 <= layer < cfg.depth:
        raise ContractError(f"layer {layer} outside [0, {cfg.depth})")
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        patches = Tensor(patchify(chunk, cfg.patch_size))
        idx = np.broadcast_to(np.arange(cfg.n_tokens), (len(chunk), cfg.n_tokens))
        x = _vit.patch_embed(patches, state.online["patch_embed"]["w"],
                             state.online["patch_embed"]["b"],
                             state.online["pos"], np.ascontiguousarray(idx))
        for li, blk in enumerate(state.online["blocks"][:layer + 1]):
            x, _ = block_forward(x, blk, cfg.heads, layer=li)
        out.append(x.data.mean(axis=1))
    return np.concatenate(out, axis=0)


def sv_spectrum(features: np.ndarray, layer: int = 0) -> SpectrumResult:
    """Singular values of the column-centered feature matrix scaled by
    1/sqrt(n-1) (identical nonzero spectrum to the covariance eigen-roots)."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise DataError("sv_spectrum needs at least two samples")
    centered = features - features.mean(axis=0, keepdims=True)
    sv = np.linalg.svd(centered / np.sqrt(n - 1), compute_uv=False)
    return SpectrumResult(layer=layer, singular_values=np.sort(sv)[::-1])


def sv_spectrum_oracle(features: np.ndarray) -> np.ndarray:
    """Independent route: explicit covariance matrix, eigendecomposition,
    square roots of the eigenvalues."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    centered = features - features.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    eig = np.linalg.eigvalsh(cov)
    eig = np.clip(eig, 0.0, None)
    # eigenvalues at rounding-noise level are exact zeros of the true
    # covariance; without this cut their square roots read as ~1e-8
    if eig.size:
        eig[eig < eig.max() * 1e-12] = 0.0
    return np.sort(np.sqrt(eig))[::-1]


def sv_gap_curve(state_a: ModelState, state_b: ModelState, images: np.ndarray,
                 layer: int) -> np.ndarray:
    """log(sv_a[i]) - log(sv_b[i]) per rank, with a 1e-12 floor inside the log."""
    if state_a.vit != state_b.vit:
        raise ContractError("gap curve requires identical architectures")
    fa = layer_features(state_a, images, layer)
    fb = layer_features(state_b, images, layer)
    sa = sv_spectrum(fa, layer).singular_values
    sb = sv_spectrum(fb, layer).singular_values
    k = min(len(fa) - 1, fa.shape[1])
    sa, sb = sa[:k], sb[:k]
    return np.log(np.maximum(sa, 1e-12)) - np.log(np.maximum(sb, 1e-12))


# ---------------------------------------------------------------------------
# export formats


def write_pgm(path: str, values: np.ndarray):
    """Binary PGM (P5, maxval 255); values scaled to the [0, max] range."""
    v = np.asarray(values, dtype=np.float64)
    hi = v.max()
    scaled = np.zeros_like(v) if hi <= 0 else v / hi
    pix = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pix.tobytes())


def write_attention_csv(path: str, result: AttentionMapResult):
    heads, gh, gw = result.maps.shape
    with open(path, "w") as f:
        f.write("head,row,col,weight\n")
        for h in range(heads):
            for r in range(gh):
                for c in range(gw):
                    f.write(f"{h},{r},{c},{result.maps[h, r, c]:.10g}\n")


def write_gap_csv(path: str, curve: np.ndarray):
    with open(path, "w") as f:
        f.write("rank,log_gap\n")
        for i, g in enumerate(curve):
            f.write(f"{i},{g:.10g}\n")
