"""The pre-training objective: masked reconstruction plus global guidance.

`lcmae_forward` builds the full differentiable loss for one batch; the
optimizer step around it lives in trainer.py. With guidance disabled the
code path is exactly the plain-MAE baseline (`mae_baseline_forward`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, make_view_pair
from .errors import ConfigError, ContractError, DataError
from .masking import MaskPlan, assemble_decoder_input, sample_mask, split_tokens
from .model import GuidanceConfig, ModelState, head_forward
from .tensor import Tensor, l2_normalize, matmul, scatter_rows
from .vit import decoder_forward, encoder_forward, patchify
from . import vit as _vit


# ---------------------------------------------------------------------------
# losses


def mim_loss(pred: Tensor, targets: Tensor, norm_pix: bool) -> Tensor:
    """Mean squared error over masked patches; per-patch standardized targets
    when norm_pix is set. Returns exact 0 for an empty masked set."""
    if pred.shape != targets.shape:
        raise ContractError(f"prediction {pred.shape} vs targets {targets.shape}")
    if pred.shape[1] == 0:
        return Tensor(0.0)
    t = targets.data
    if norm_pix:
        mu = t.mean(axis=-1, keepdims=True)
        var = t.var(axis=-1, keepdims=True)
        t = (t - mu) / np.sqrt(var + 1e-6)
    return ((pred - Tensor(t)) ** 2).mean()


def _logsumexp_rows(z: Tensor) -> Tensor:
    shift = Tensor(z.data.max(axis=-1, keepdims=True))
    return (z - shift).exp().sum(axis=-1).log() + shift.reshape(z.shape[0])


def global_guidance_loss(u: Tensor, v: Tensor, kind: str,
                         temperature: float = 0.2) -> Tensor:
    """Distance between the online and target pooled representations.

    cosine: squared distance of l2-normalized vectors, batch mean, range [0,4].
    infonce: symmetric cross-view contrastive over the batch.
    smooth_l1: Huber (beta=1) on the raw pair.
    """
    if u.shape != v.shape:
        raise ContractError(f"representation widths differ: {u.shape} vs {v.shape}")
    if kind == "cosine":
        ub = l2_normalize(u)
        vb = l2_normalize(v)
        return ((ub - vb) ** 2).sum(axis=-1).mean()
    if kind == "infonce":
        b = u.shape[0]
        if b < 2:
            raise DataError("InfoNCE needs a batch of at least 2")
        ub = l2_normalize(u)
        vb = l2_normalize(v)
        logits = matmul(ub, vb.transpose((1, 0))) * (1.0 / temperature)
        diag_idx = (np.arange(b), np.arange(b))
        ce_uv = (_logsumexp_rows(logits) - logits[diag_idx]).mean()
        logits_t = logits.transpose((1, 0))
        ce_vu = (_logsumexp_rows(logits_t) - logits_t[diag_idx]).mean()
        return (ce_uv + ce_vu) * 0.5
    if kind == "smooth_l1":
        d = u - v
        absd = d * Tensor(np.sign(d.data))
        small = np.abs(d.data) < 1.0
        w = Tensor(small.astype(np.float64))
        return (w * (d ** 2) * 0.5 + (1.0 - w) * (absd - 0.5)).mean()
    raise ConfigError(f"unknown guidance distance: {kind!r}")


def token_wise_guidance_loss(online_tokens: Tensor, target_tokens: Tensor,
                             kind: str, temperature: float = 0.2) -> Tensor:
    """Per-token distance between aligned online and (detached) target tokens,
    mean over all guided tokens."""
    if online_tokens.shape != target_tokens.shape:
        raise ContractError(
            f"token alignment mismatch: {online_tokens.shape} vs {target_tokens.shape}")
    b, k, d = online_tokens.shape
    u = online_tokens.reshape(b * k, d)
    v = target_tokens.reshape(b * k, d)
    return global_guidance_loss(u, v, kind, temperature)


# ---------------------------------------------------------------------------
# per-step randomness


def step_seeds(seed: int, step: int) -> dict:
    """Independent integer seeds per purpose so optional branches never shift
    the random stream of the mandatory ones."""
    base = np.random.SeedSequence([seed, step])
    view, mask, target = base.spawn(3)
    return {
        "view": view,
        "mask": int(mask.generate_state(1)[0]),
        "target_mask": int(target.generate_state(1)[0]),
    }


def build_views(images: np.ndarray, aug: AugmentConfig, view_seq) -> tuple[np.ndarray, np.ndarray]:
    """Augment a batch; per-item child seeds keep results order-stable."""
    children = view_seq.spawn(len(images))
    online, target = [], []
    for img, child in zip(images, children):
        pair = make_view_pair(img, aug, np.random.default_rng(child))
        online.append(pair.online_view)
        target.append(pair.target_view)
    return np.stack(online), np.stack(target)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class LossBreakdown:
    total: Tensor
    mim: float
    guidance: float
    extras: dict = field(default_factory=dict)


def _encode_visible(state: ModelState, patches: Tensor, plan: MaskPlan):
    visible_patches, targets = split_tokens(patches, plan)
    tokens, _ = encoder_forward(state.online, visible_patches, plan.visible, state.vit)
    return tokens, targets


def _decode(state: ModelState, tokens: Tensor, plan: MaskPlan) -> Tensor:
    cfg = state.vit
    body = tokens[:, 1:, :] if cfg.use_cls else tokens
    projected = _vit.linear(body, state.decoder["proj"])
    assembled = assemble_decoder_input(projected, plan, state.mask_token,
                                       state.decoder["pos"])
    return decoder_forward(state.decoder, assembled, plan.masked, cfg)


def pooled_online_repr(tokens: Tensor, heads: dict, use_cls: bool = False) -> Tensor:
    """Mean over visible tokens (or the CLS output) -> projector -> predictor."""
    if tokens.shape[1] == 0:
        raise ContractError("cannot pool an empty token set")
    pooled = tokens[:, 0, :] if use_cls else tokens.mean(axis=1)
    return head_forward(head_forward(pooled, heads["projector"]), heads["predictor"])


def cls_guidance_repr(tokens: Tensor, heads: dict) -> Tensor:
    return pooled_online_repr(tokens, heads, use_cls=True)


def pooled_target_repr(state: ModelState, target_patches_data: np.ndarray,
                       target_mask_seed: int) -> tuple[Tensor, Tensor]:
    """Target branch: (optionally masked) full view through the EMA encoder,
    mean pool, target projector. Entirely outside the gradient graph.

    Returns (pooled representation, per-token target encodings with their
    grid indices resolved to the full grid, zeros at dropped positions).
    """
    cfg = state.vit
    gcfg = state.guidance
    b, n, _ = target_patches_data.shape
    if gcfg.target_mask_ratio > 0:
        plan = sample_mask(n, gcfg.target_mask_ratio, target_mask_seed, batch=b)
        idx = plan.visible
        patches = Tensor(np.take_along_axis(target_patches_data, idx[:, :, None], axis=1))
    else:
        idx = np.broadcast_to(np.arange(n), (b, n))
        patches = Tensor(target_patches_data)
    tokens, _ = encoder_forward(state.target["encoder"], patches, idx, cfg)
    body = tokens[:, 1:, :] if cfg.use_cls else tokens
    if cfg.use_cls and gcfg.guidance_source == "cls_token":
        pooled = tokens[:, 0, :]
    else:
        pooled = body.mean(axis=1)
    vhat = head_forward(pooled, state.target["projector"])
    # scatter per-token encodings back onto the full grid for token-wise modes
    token_grid = scatter_rows(body, np.ascontiguousarray(idx), n)
    return vhat.detach(), token_grid.detach()


def _token_head(x: Tensor, head: dict) -> Tensor:
    b, k, d = x.shape
    return head_forward(x.reshape(b * k, d), head).reshape(b, k, -1)


def lcmae_forward(state: ModelState, images: np.ndarray, aug: AugmentConfig,
                  seed: int, step: int) -> LossBreakdown:
    """Full objective for one batch: L_MIM + alpha * L_GG."""
    gcfg = state.guidance
    if gcfg.simmim_mode:
        return simmim_forward(state, images, aug, seed, step)
    if not gcfg.enabled:
        return mae_baseline_forward(state, images, aug, seed, step)
    seeds = step_seeds(seed, step)
    online_views, target_views = build_views(images, aug, seeds["view"])
    cfg = state.vit
    patches = Tensor(patchify(online_views, cfg.patch_size))
    plan = sample_mask(cfg.n_tokens, gcfg.mask_ratio, seeds["mask"], batch=len(images))
    tokens, targets = _encode_visible(state, patches, plan)
    pred = _decode(state, tokens, plan)
    l_mim = mim_loss(pred, targets, gcfg.norm_pix_targets)

    target_patches = patchify(target_views, cfg.patch_size)
    vhat, target_token_grid = pooled_target_repr(state, target_patches,
                                                 seeds["target_mask"])
    l_gg = Tensor(0.0)
    if gcfg.guidance_type in ("global", "global_plus_token_wise"):
        use_cls = cfg.use_cls and gcfg.guidance_source == "cls_token"
        if gcfg.guidance_source == "cls_token" and not cfg.use_cls:
            raise ConfigError("cls_token guidance requires a model with use_cls")
        uhat = pooled_online_repr(tokens, state.heads, use_cls=use_cls)
        l_gg = l_gg + global_guidance_loss(uhat, vhat, gcfg.distance,
                                           gcfg.infonce_temperature)
    if gcfg.guidance_type in ("token_wise", "global_plus_token_wise"):
        body = tokens[:, 1:, :] if cfg.use_cls else tokens
        online_proj = _token_head(body, state.heads["projector"])
        tgt_aligned = Tensor(np.take_along_axis(target_token_grid.data,
                                                plan.visible[:, :, None], axis=1))
        tgt_proj = _token_head(tgt_aligned, state.target["projector"]).detach()
        l_tok = token_wise_guidance_loss(online_proj, tgt_proj, gcfg.distance,
                                         gcfg.infonce_temperature)
        if gcfg.guided_tokens == "visible_and_mask":
            dec_feats = _decoder_mask_features(state, tokens, plan)
            mapped = _vit.linear(dec_feats, state.heads["mask_proj"])
            mask_proj = _token_head(mapped, state.heads["projector"])
            tgt_mask = Tensor(np.take_along_axis(target_token_grid.data,
                                                 plan.masked[:, :, None], axis=1))
            tgt_mask_proj = _token_head(tgt_mask, state.target["projector"]).detach()
            l_tok = (l_tok + token_wise_guidance_loss(
                mask_proj, tgt_mask_proj, gcfg.distance, gcfg.infonce_temperature)) * 0.5
        # equal weighting when combined with the global term
        l_gg = l_gg + l_tok
    total = l_mim + gcfg.alpha * l_gg
    return LossBreakdown(total=total, mim=float(l_mim.data), guidance=float(l_gg.data))


def _decoder_mask_features(state: ModelState, tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Decoder hidden states at masked positions (pre prediction head)."""
    cfg = state.vit
    body = tokens[:, 1:, :] if cfg.use_cls else tokens
    projected = _vit.linear(body, state.decoder["proj"])
    assembled = assemble_decoder_input(projected, plan, state.mask_token,
                                       state.decoder["pos"])
    x = assembled
    for blk in state.decoder["blocks"]:
        x, _ = _vit.block_forward(x, blk, cfg.decoder_heads)
    x = _vit.layer_norm(x, state.decoder["ln_g"], state.decoder["ln_b"], 1e-6)
    from .tensor import gather_rows
    return gather_rows(x, plan.masked)


def mae_baseline_forward(state: ModelState, images: np.ndarray, aug: AugmentConfig,
                         seed: int, step: int) -> LossBreakdown:
    """Plain MAE: single undistorted view, reconstruction loss only."""
    seeds = step_seeds(seed, step)
    online_views, _ = build_views(images, aug, seeds["view"])
    cfg = state.vit
    patches = Tensor(patchify(online_views, cfg.patch_size))
    plan = sample_mask(cfg.n_tokens, state.guidance.mask_ratio, seeds["mask"],
                       batch=len(images))
    tokens, targets = _encode_visible(state, patches, plan)
    pred = _decode(state, tokens, plan)
    l_mim = mim_loss(pred, targets, state.guidance.norm_pix_targets)
    return LossBreakdown(total=l_mim, mim=float(l_mim.data), guidance=0.0)


def simmim_forward(state: ModelState, images: np.ndarray, aug: AugmentConfig,
                   seed: int, step: int) -> LossBreakdown:
    """SimMIM-style variant: the encoder sees all N positions with masked
    slots substituted by a learned token; a one-layer head predicts pixels;
    the loss is l1 on masked patches plus the same guidance branch."""
    gcfg = state.guidance
    cfg = state.vit
    seeds = step_seeds(seed, step)
    online_views, target_views = build_views(images, aug, seeds["view"])
    patches_data = patchify(online_views, cfg.patch_size)
    b = len(images)
    plan = sample_mask(cfg.n_tokens, gcfg.mask_ratio, seeds["mask"], batch=b)

    emb = _vit.patch_embed(
        Tensor(np.take_along_axis(patches_data, plan.visible[:, :, None], axis=1)),
        state.online["patch_embed"]["w"], state.online["patch_embed"]["b"],
        state.online["pos"], plan.visible)
    vis_slots = scatter_rows(emb, plan.visible, cfg.n_tokens)
    ones = Tensor(np.ones((b, plan.n_masked, 1)))
    mask_block = state.enc_mask_token.reshape(1, 1, cfg.dim) * ones
    pos_mask = _vit.embed_rows(state.online["pos"], plan.masked)
    x = vis_slots + scatter_rows(mask_block + pos_mask, plan.masked, cfg.n_tokens)
    for i, blk in enumerate(state.online["blocks"]):
        x, _ = _vit.block_forward(x, blk, cfg.heads, layer=i)
    x = _vit.layer_norm(x, state.online["ln_g"], state.online["ln_b"], 1e-6)

    from .tensor import gather_rows
    masked_feats = gather_rows(x, plan.masked)
    pred = matmul(masked_feats, state.simmim_pred["w"]) + state.simmim_pred["b"]
    targets = np.take_along_axis(patches_data, plan.masked[:, :, None], axis=1)
    if gcfg.norm_pix_targets:
        mu = targets.mean(axis=-1, keepdims=True)
        var = targets.var(axis=-1, keepdims=True)
        targets = (targets - mu) / np.sqrt(var + 1e-6)
    d = pred - Tensor(targets)
    l_rec = (d * Tensor(np.sign(d.data))).mean()

    l_gg = Tensor(0.0)
    if gcfg.enabled:
        visible_feats = gather_rows(x, plan.visible)
        uhat = pooled_online_repr(visible_feats, state.heads)
        target_patches = patchify(target_views, cfg.patch_size)
        vhat, _ = pooled_target_repr(state, target_patches, seeds["target_mask"])
        l_gg = global_guidance_loss(uhat, vhat, gcfg.distance,
                                    gcfg.infonce_temperature)
    total = l_rec + gcfg.alpha * l_gg
    return LossBreakdown(total=total, mim=float(l_rec.data), guidance=float(l_gg.data))
