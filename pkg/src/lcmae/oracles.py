"""Finite-difference oracle suite over every differentiable op and over the
full pre-training objective on a toy model. Used by tests and the CLI."""

from __future__ import annotations

import numpy as np

from .augment import AugmentConfig
from .model import GuidanceConfig, init_model, online_tree, trainable_params
from .objective import lcmae_forward
from .tensor import (Tensor, activation, batch_norm, BatchNormState, embed_rows,
                     gather_rows, grad_check, grad_check_params, l2_normalize,
                     layer_norm, matmul, scatter_rows, softmax_lastdim)
from .vit import ViTConfig


def tiny_vit_config() -> ViTConfig:
    return ViTConfig(image_size=8, patch_size=4, dim=8, depth=1, heads=2,
                     mlp_ratio=1.0, decoder_dim=8, decoder_depth=1, decoder_heads=2)


def tiny_guidance_config(**kw) -> GuidanceConfig:
    base = dict(alpha=0.25, head_hidden=8, head_out=8)
    base.update(kw)
    return GuidanceConfig(**base)


def tiny_augment_config() -> AugmentConfig:
    return AugmentConfig(out_size=8)


def tiny_batch(n: int = 2, seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 3, 8, 8))


def _mix(rng, shape):
    """Fixed random mixing weights so reductions exercise all coordinates."""
    return Tensor(rng.normal(0.0, 1.0, shape))


def op_checks(h: float = 1e-5) -> list[tuple[str, float]]:
    rng = np.random.default_rng(11)
    checks: list[tuple[str, float]] = []

    b_mat = Tensor(rng.normal(0, 1, (3, 3)))
    w = _mix(rng, (3, 3))
    checks.append(("matmul", grad_check(
        lambda x: (matmul(x, b_mat) * w).sum(), rng.normal(0, 1, (3, 3)), h)))

    w2 = _mix(rng, (2, 5))
    checks.append(("softmax_lastdim", grad_check(
        lambda x: (softmax_lastdim(x) * w2).sum(), rng.normal(0, 1, (2, 5)), h)))

    gamma = Tensor(rng.normal(1, 0.1, (4,)), requires_grad=False)
    beta = Tensor(rng.normal(0, 0.1, (4,)), requires_grad=False)
    w3 = _mix(rng, (2, 4))
    checks.append(("layer_norm", grad_check(
        lambda x: (layer_norm(x, gamma, beta, 1e-6) * w3).sum(),
        rng.normal(0, 1, (2, 4)), h)))

    w4 = _mix(rng, (4, 3))

    def bn_loss(x):
        st = BatchNormState.create(3)
        return (batch_norm(x, st) * w4).sum()

    checks.append(("batch_norm", grad_check(bn_loss, rng.normal(0, 1, (4, 3)), h)))

    w5 = _mix(rng, (2, 6))
    checks.append(("gelu", grad_check(
        lambda x: (activation(x, "gelu") * w5).sum(), rng.normal(0, 1, (2, 6)), h)))
    # keep relu inputs away from the kink
    x_relu = rng.normal(0, 1, (2, 6))
    x_relu[np.abs(x_relu) < 0.05] = 0.5
    checks.append(("relu", grad_check(
        lambda x: (activation(x, "relu") * w5).sum(), x_relu, h)))

    w6 = _mix(rng, (3, 4))
    checks.append(("l2_normalize", grad_check(
        lambda x: (l2_normalize(x, 1e-8) * w6).sum(),
        rng.normal(0, 1, (3, 4)) + 2.0, h)))

    idx = np.array([[2, 0], [1, 3]])
    w7 = _mix(rng, (2, 2, 3))
    checks.append(("gather_rows", grad_check(
        lambda x: (gather_rows(x, idx) * w7).sum(), rng.normal(0, 1, (2, 4, 3)), h)))

    w8 = _mix(rng, (2, 5, 3))
    checks.append(("scatter_rows", grad_check(
        lambda x: (scatter_rows(x, idx, 5) * w8).sum(), rng.normal(0, 1, (2, 2, 3)), h)))

    w9 = _mix(rng, (2, 2, 3))
    checks.append(("embed_rows", grad_check(
        lambda x: (embed_rows(x, idx) * w9).sum(), rng.normal(0, 1, (4, 3)), h)))

    # composite chain: matmul -> softmax -> mse
    target = Tensor(rng.uniform(0, 1, (2, 3)))
    m = Tensor(rng.normal(0, 1, (4, 3)))
    checks.append(("matmul_softmax_mse", grad_check(
        lambda x: ((softmax_lastdim(matmul(x, m)) - target) ** 2).mean(),
        rng.normal(0, 1, (2, 4)), h)))

    c = Tensor(rng.normal(0, 1, (3, 4)))
    checks.append(("l2norm_mse", grad_check(
        lambda x: ((l2_normalize(x, 1e-8) - c) ** 2).sum(),
        rng.normal(0, 1, (3, 4)) + 3.0, h)))
    return checks


def objective_check(h: float = 1e-5, sample: int | None = None) -> float:
    """Finite differences over every online parameter of a toy model against
    the full objective (reconstruction + guidance)."""
    state = init_model(tiny_vit_config(), tiny_guidance_config(), seed=3)
    images = tiny_batch()
    aug = tiny_augment_config()

    def build_loss():
        return lcmae_forward(state, images, aug, seed=5, step=0).total

    params = trainable_params(online_tree(state))
    # probe only parameters that participate in this code path
    params = {k: v for k, v in params.items()
              if not k.startswith(("simmim_pred", "enc_mask_token", "heads.mask_proj"))}
    return grad_check_params(build_loss, params, h=h, sample=sample,
                             rng=np.random.default_rng(2))


def run_gradcheck_suite(h: float = 1e-5,
                        objective_sample: int | None = None) -> tuple[float, list]:
    report = op_checks(h)
    report.append(("full_objective", objective_check(h, sample=objective_sample)))
    worst = max(err for _, err in report)
    return worst, report
