"""ViT encoder/decoder: patch bookkeeping, attention semantics, equivariance."""

import numpy as np
import pytest

from lcmae import ContractError, ShapeError, Tensor, ViTConfig, patchify
from lcmae.masking import assemble_decoder_input, sample_mask
from lcmae.tensor import grad_check
from lcmae.vit import (decoder_forward, encoder_forward, init_decoder,
                       init_encoder, mhsa, patch_embed, unpatchify)

RNG = np.random.default_rng(0)


def test_vit_config_defaults():
    cfg = ViTConfig()
    assert cfg.grid == 8 and cfg.n_tokens == 64 and cfg.patch_dim == 48


def test_vit_config_rejects_indivisible_image():
    with pytest.raises(Exception):
        ViTConfig(image_size=30, patch_size=4)


def test_vit_config_rejects_indivisible_heads():
    with pytest.raises(Exception):
        ViTConfig(dim=65, heads=4)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_ordering_single_channel():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(img, 2)
    assert patches.shape == (1, 4, 4)
    # patch 0 is the top-left 2x2 block
    assert np.array_equal(patches[0, 0], [0, 1, 4, 5])
    # patch 1 is the top-right block (row-major over the grid)
    assert np.array_equal(patches[0, 1], [2, 3, 6, 7])


def test_patchify_whole_image_patch():
    img = RNG.normal(size=(1, 3, 4, 4))
    patches = patchify(img, 4)
    assert patches.shape == (1, 1, 48)
    assert np.array_equal(patches[0, 0], img[0].reshape(-1))


def test_patchify_round_trip_exact():
    img = RNG.normal(size=(2, 3, 32, 32))
    assert np.array_equal(unpatchify(patchify(img, 4), 4), img)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 3, 30, 30)), 4)


def test_unpatchify_rejects_bad_shape():
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((1, 3, 10)), 2)


# ---------------------------------------------------------------------------
# patch embed


def test_patch_embed_zero_weights_gives_positions():
    pos = Tensor(RNG.normal(size=(4, 5)))
    w = Tensor(np.zeros((6, 5)))
    b = Tensor(np.zeros(5))
    patches = Tensor(RNG.normal(size=(1, 2, 6)))
    out = patch_embed(patches, w, b, pos, np.array([[2, 0]]))
    assert np.allclose(out.data[0, 0], pos.data[2], atol=1e-12)
    assert np.allclose(out.data[0, 1], pos.data[0], atol=1e-12)


def test_patch_embed_rejects_mismatched_index():
    pos = Tensor(np.zeros((4, 5)))
    w = Tensor(np.zeros((6, 5)))
    b = Tensor(np.zeros(5))
    with pytest.raises(ContractError):
        patch_embed(Tensor(np.zeros((1, 2, 6))), w, b, pos, np.array([[1]]))


def test_patch_embed_gradient():
    pos = Tensor(RNG.normal(0, 0.1, (4, 3)))
    w_mix = Tensor(RNG.normal(size=(1, 2, 3)))
    wt = Tensor(RNG.normal(0, 0.1, (5, 3)))
    bt = Tensor(RNG.normal(0, 0.1, 3))
    idx = np.array([[3, 1]])
    err = grad_check(
        lambda x: (patch_embed(x, wt, bt, pos, idx) * w_mix).sum(),
        RNG.normal(size=(1, 2, 5)))
    assert err < 1e-5


# ---------------------------------------------------------------------------
# attention


def _tiny_block(dim=4):
    rng = np.random.default_rng(3)
    from lcmae.vit import _block_params
    return _block_params(rng, dim, 1.0)


def test_mhsa_single_token_weight_is_one():
    p = _tiny_block()
    x = Tensor(RNG.normal(size=(1, 1, 4)))
    _, rec = mhsa(x, p, heads=2, capture=True)
    assert np.allclose(rec.weights, 1.0, atol=1e-12)


def test_mhsa_identical_tokens_uniform_weights():
    p = _tiny_block()
    row = RNG.normal(size=4)
    x = Tensor(np.stack([row, row])[None])
    _, rec = mhsa(x, p, heads=2, capture=True)
    assert np.allclose(rec.weights, 0.5, atol=1e-9)


def test_mhsa_gradient():
    p = _tiny_block()
    w_mix = Tensor(RNG.normal(size=(1, 3, 4)))

    def loss(x):
        out, _ = mhsa(x, p, heads=2)
        return (out * w_mix).sum()

    assert grad_check(loss, RNG.normal(size=(1, 3, 4))) < 1e-4


def test_attention_rows_sum_to_one_every_layer():
    cfg = ViTConfig(image_size=8, patch_size=4, dim=8, depth=2, heads=2,
                    mlp_ratio=1.0, decoder_dim=8, decoder_depth=1, decoder_heads=2)
    enc = init_encoder(cfg, np.random.default_rng(1))
    patches = Tensor(RNG.normal(size=(2, 4, cfg.patch_dim)))
    idx = np.broadcast_to(np.arange(4), (2, 4))
    _, records = encoder_forward(enc, patches, idx, cfg, capture=True)
    assert len(records) == 2
    for rec in records:
        assert np.allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# encoder


def _tiny_cfg(**kw):
    base = dict(image_size=8, patch_size=4, dim=8, depth=1, heads=2,
                mlp_ratio=1.0, decoder_dim=8, decoder_depth=1, decoder_heads=2)
    base.update(kw)
    return ViTConfig(**base)


def test_encoder_depth_zero_is_embed_plus_norm():
    cfg = _tiny_cfg(depth=0)
    enc = init_encoder(cfg, np.random.default_rng(2))
    patches = Tensor(RNG.normal(size=(1, 4, cfg.patch_dim)))
    idx = np.arange(4)[None]
    out, _ = encoder_forward(enc, patches, idx, cfg)
    from lcmae.tensor import layer_norm
    expected = layer_norm(
        patch_embed(patches, enc["patch_embed"]["w"], enc["patch_embed"]["b"],
                    enc["pos"], idx),
        enc["ln_g"], enc["ln_b"], 1e-6)
    assert np.allclose(out.data, expected.data, atol=1e-12)


def test_encoder_rejects_empty_token_set():
    cfg = _tiny_cfg()
    enc = init_encoder(cfg, np.random.default_rng(2))
    with pytest.raises(ContractError):
        encoder_forward(enc, Tensor(np.zeros((1, 0, cfg.patch_dim))),
                        np.zeros((1, 0), dtype=int), cfg)


def test_encoder_permutation_equivariance():
    cfg = _tiny_cfg(depth=2)
    enc = init_encoder(cfg, np.random.default_rng(5))
    patches = RNG.normal(size=(1, 4, cfg.patch_dim))
    idx = np.arange(4)[None]
    out, _ = encoder_forward(enc, Tensor(patches), idx, cfg)
    perm = np.array([2, 0, 3, 1])
    out_p, _ = encoder_forward(enc, Tensor(patches[:, perm]), idx[:, perm], cfg)
    assert np.allclose(out_p.data, out.data[:, perm], atol=1e-9)


def test_encoder_subset_shape_contract():
    cfg = _tiny_cfg()
    enc = init_encoder(cfg, np.random.default_rng(6))
    for k in (1, 2, 4):
        patches = Tensor(RNG.normal(size=(3, k, cfg.patch_dim)))
        idx = np.broadcast_to(np.arange(k), (3, k))
        out, _ = encoder_forward(enc, patches, idx, cfg)
        assert out.shape == (3, k, cfg.dim)


def test_encoder_full_set_independent_of_plan():
    # plans only select inputs; a full-token forward never consults one
    cfg = _tiny_cfg()
    enc = init_encoder(cfg, np.random.default_rng(7))
    patches = Tensor(RNG.normal(size=(1, 4, cfg.patch_dim)))
    idx = np.arange(4)[None]
    a, _ = encoder_forward(enc, patches, idx, cfg)
    b, _ = encoder_forward(enc, patches, idx, cfg)
    assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# decoder


def _decoder_setup(cfg, seed=8, batch=2, ratio=0.75):
    rng = np.random.default_rng(seed)
    enc = init_encoder(cfg, rng)
    dec = init_decoder(cfg, rng)
    plan = sample_mask(cfg.n_tokens, ratio, seed=seed, batch=batch)
    return enc, dec, plan


def test_decoder_output_shape_desk_default():
    cfg = ViTConfig()
    _, dec, plan = _decoder_setup(cfg, batch=2)
    assert plan.n_masked == 48
    assembled = Tensor(RNG.normal(size=(2, 64, cfg.decoder_dim)))
    out = decoder_forward(dec, assembled, plan.masked, cfg)
    assert out.shape == (2, 48, 48)


def test_decoder_empty_mask_empty_prediction():
    cfg = _tiny_cfg()
    _, dec, _ = _decoder_setup(cfg)
    assembled = Tensor(RNG.normal(size=(1, 4, cfg.decoder_dim)))
    out = decoder_forward(dec, assembled, np.zeros((1, 0), dtype=int), cfg)
    assert out.shape == (1, 0, cfg.patch_dim)


def test_decoder_rejects_wrong_slot_count():
    cfg = _tiny_cfg()
    _, dec, plan = _decoder_setup(cfg)
    with pytest.raises(ContractError):
        decoder_forward(dec, Tensor(np.zeros((1, 3, cfg.decoder_dim))),
                        plan.masked, cfg)


def test_mim_gradient_reaches_patch_embed():
    from lcmae import GuidanceConfig
    from lcmae.model import init_model, trainable_params, online_tree
    from lcmae.objective import mae_baseline_forward
    from lcmae.augment import AugmentConfig

    cfg = _tiny_cfg()
    state = init_model(cfg, GuidanceConfig(distance="none", head_hidden=8,
                                           head_out=8), seed=9)
    images = np.random.default_rng(10).uniform(size=(2, 3, 8, 8))
    losses = mae_baseline_forward(state, images, AugmentConfig(out_size=8),
                                  seed=0, step=0)
    losses.total.backward()
    w = state.online["patch_embed"]["w"].grad
    assert w is not None and np.abs(w).max() > 0
