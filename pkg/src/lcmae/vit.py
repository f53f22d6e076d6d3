"""Minimal Vision Transformer encoder/decoder over arbitrary token subsets.

Parameters live in nested dicts of Tensors so the same forward code serves the
online encoder, the gradient-free target encoder, and the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (Tensor, activation, embed_rows, gather_rows, layer_norm,
                     matmul, softmax_lastdim)


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    channels: int = 3
    use_cls: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class AttentionRecord:
    layer: int
    weights: np.ndarray  # [b, heads, q_tokens, k_tokens]


# ---------------------------------------------------------------------------
# patch <-> image


def patchify(image, patch_size: int):
    """[b, c, H, W] -> [b, N, c*P*P]; patches row-major over the grid,
    each flattened channel-major then row-major."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    b, c, h, w = data.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = data.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # b, gh, gw, c, p, p
    out = x.reshape(b, gh * gw, c * p * p)
    if isinstance(image, Tensor):
        # keep lineage for composite checks; rebuild through Tensor ops
        t = image.reshape(b, c, gh, p, gw, p).transpose((0, 2, 4, 1, 3, 5))
        return t.reshape(b, gh * gw, c * p * p)
    return out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    """Exact inverse of patchify for square grids."""
    b, n, pd = patches.shape
    p = patch_size
    g = int(round(np.sqrt(n)))
    if g * g != n or pd != channels * p * p:
        raise ShapeError(f"cannot unpatchify shape {patches.shape} with P={p}")
    x = patches.reshape(b, g, g, channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, g * p, g * p)


# ---------------------------------------------------------------------------
# parameter construction


def _linear(rng, n_in, n_out, std=0.02):
    return {"w": Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True),
            "b": Tensor(np.zeros(n_out), requires_grad=True)}


def _block_params(rng, dim, mlp_ratio):
    hidden = int(dim * mlp_ratio)
    return {
        "ln1_g": Tensor(np.ones(dim), requires_grad=True),
        "ln1_b": Tensor(np.zeros(dim), requires_grad=True),
        "qkv": _linear(rng, dim, 3 * dim),
        "proj": _linear(rng, dim, dim),
        "ln2_g": Tensor(np.ones(dim), requires_grad=True),
        "ln2_b": Tensor(np.zeros(dim), requires_grad=True),
        "fc1": _linear(rng, dim, hidden),
        "fc2": _linear(rng, hidden, dim),
    }


def init_encoder(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    enc = {
        "patch_embed": _linear(rng, cfg.patch_dim, cfg.dim),
        "pos": Tensor(rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.dim)), requires_grad=True),
        "blocks": [_block_params(rng, cfg.dim, cfg.mlp_ratio) for _ in range(cfg.depth)],
        "ln_g": Tensor(np.ones(cfg.dim), requires_grad=True),
        "ln_b": Tensor(np.zeros(cfg.dim), requires_grad=True),
    }
    if cfg.use_cls:
        enc["cls"] = Tensor(rng.normal(0.0, 0.02, (cfg.dim,)), requires_grad=True)
    return enc


def init_decoder(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    return {
        "proj": _linear(rng, cfg.dim, cfg.decoder_dim),
        "pos": Tensor(rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.decoder_dim)), requires_grad=True),
        "blocks": [_block_params(rng, cfg.decoder_dim, cfg.mlp_ratio)
                   for _ in range(cfg.decoder_depth)],
        "ln_g": Tensor(np.ones(cfg.decoder_dim), requires_grad=True),
        "ln_b": Tensor(np.zeros(cfg.decoder_dim), requires_grad=True),
        "pred": _linear(rng, cfg.decoder_dim, cfg.patch_dim),
    }


# ---------------------------------------------------------------------------
# forward passes


def linear(x: Tensor, p: dict) -> Tensor:
    return matmul(x, p["w"]) + p["b"]


def patch_embed(patches: Tensor, w: Tensor, b: Tensor, pos_table: Tensor,
                grid_idx: np.ndarray) -> Tensor:
    """Project flattened patches and add positional rows looked up by the
    original grid index of each token (not the compacted position)."""
    grid_idx = np.asarray(grid_idx, dtype=np.int64)
    if grid_idx.shape != patches.shape[:2]:
        raise ContractError(
            f"grid index shape {grid_idx.shape} does not match tokens {patches.shape[:2]}")
    return matmul(patches, w) + b + embed_rows(pos_table, grid_idx)


def mhsa(x: Tensor, p: dict, heads: int, capture: bool = False,
         layer: int = 0) -> tuple[Tensor, AttentionRecord | None]:
    """Scaled dot-product attention; weights captured pre-residual when asked."""
    b, k, d = x.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by heads {heads}")
    dh = d // heads
    qkv = linear(x, p["qkv"])                      # [b, k, 3d]
    qkv = qkv.reshape(b, k, 3, heads, dh).transpose((2, 0, 3, 1, 4))  # [3, b, h, k, dh]
    q, kk, v = qkv[0], qkv[1], qkv[2]
    attn = matmul(q, kk.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    w = softmax_lastdim(attn)                      # [b, h, k, k]
    out = matmul(w, v)                             # [b, h, k, dh]
    out = out.transpose((0, 2, 1, 3)).reshape(b, k, d)
    out = linear(out, p["proj"])
    record = AttentionRecord(layer=layer, weights=w.data.copy()) if capture else None
    return out, record


def block_forward(x: Tensor, p: dict, heads: int, capture: bool = False,
                  layer: int = 0, eps: float = 1e-6):
    a, record = mhsa(layer_norm(x, p["ln1_g"], p["ln1_b"], eps), p, heads,
                     capture=capture, layer=layer)
    x = x + a
    h = linear(layer_norm(x, p["ln2_g"], p["ln2_b"], eps), p["fc1"])
    h = activation(h, "gelu")
    x = x + linear(h, p["fc2"])
    return x, record


def encoder_forward(enc: dict, patches: Tensor, grid_idx: np.ndarray,
                    cfg: ViTConfig, capture: bool = False):
    """Embed a (possibly partial) token set and run all pre-norm blocks.

    Returns (tokens, attention records). With use_cls a learned CLS token is
    prepended; its output is tokens[:, 0].
    """
    if patches.shape[1] == 0:
        raise ContractError("encoder_forward called with an empty token set")
    x = patch_embed(patches, enc["patch_embed"]["w"], enc["patch_embed"]["b"],
                    enc["pos"], grid_idx)
    if cfg.use_cls:
        b = x.shape[0]
        cls = enc["cls"].reshape(1, 1, cfg.dim) * Tensor(np.ones((b, 1, 1)))
        x = _concat_tokens(cls, x)
    records = []
    for i, blk in enumerate(enc["blocks"]):
        x, rec = block_forward(x, blk, cfg.heads, capture=capture, layer=i)
        if rec is not None:
            records.append(rec)
    x = layer_norm(x, enc["ln_g"], enc["ln_b"], 1e-6)
    return x, records


def _concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    from .tensor import concat
    return concat([a, b], axis=1)


def decoder_forward(dec: dict, assembled: Tensor, masked_idx: np.ndarray,
                    cfg: ViTConfig) -> Tensor:
    """Run decoder blocks over the full assembled sequence and predict the
    flattened patch at each masked position."""
    if assembled.shape[1] != cfg.n_tokens:
        raise ContractError(
            f"decoder input has {assembled.shape[1]} slots, expected {cfg.n_tokens}")
    x = assembled
    for i, blk in enumerate(dec["blocks"]):
        x, _ = block_forward(x, blk, cfg.decoder_heads, layer=i)
    x = layer_norm(x, dec["ln_g"], dec["ln_b"], 1e-6)
    masked_idx = np.asarray(masked_idx, dtype=np.int64)
    if masked_idx.shape[1] == 0:
        b = x.shape[0]
        return Tensor(np.zeros((b, 0, cfg.patch_dim)))
    picked = gather_rows(x, masked_idx)
    return linear(picked, dec["pred"])
