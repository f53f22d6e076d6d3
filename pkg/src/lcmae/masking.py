"""Random token masking and decoder-input assembly.

A MaskPlan is a per-sample partition of the N grid positions into a masked
set of exactly floor(r*N) indices and its visible complement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, embed_rows, gather_rows, scatter_rows


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    ratio: float
    masked: np.ndarray   # [b, m] ascending per sample
    visible: np.ndarray  # [b, n-m] ascending per sample
    seed: int

    @property
    def batch(self) -> int:
        return self.masked.shape[0]

    @property
    def n_masked(self) -> int:
        return self.masked.shape[1]


def sample_mask(n_tokens: int, ratio: float, seed: int, batch: int = 1) -> MaskPlan:
    """Uniform subset without replacement via a per-sample permutation prefix."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_tokens < 1:
        raise ConfigError(f"need at least one token, got {n_tokens}")
    m = int(np.floor(ratio * n_tokens))
    rng = np.random.default_rng(seed)
    masked = np.empty((batch, m), dtype=np.int64)
    visible = np.empty((batch, n_tokens - m), dtype=np.int64)
    for i in range(batch):
        perm = rng.permutation(n_tokens)
        masked[i] = np.sort(perm[:m])
        visible[i] = np.sort(perm[m:])
    return MaskPlan(n_tokens=n_tokens, ratio=ratio, masked=masked,
                    visible=visible, seed=seed)


def split_tokens(patches: Tensor, plan: MaskPlan) -> tuple[Tensor, Tensor]:
    """(visible patches, masked regression targets); targets are detached."""
    if patches.shape[1] != plan.n_tokens:
        raise ContractError(
            f"plan covers {plan.n_tokens} tokens but input has {patches.shape[1]}")
    if patches.shape[0] != plan.batch:
        raise ContractError(
            f"plan batch {plan.batch} does not match input batch {patches.shape[0]}")
    visible = gather_rows(patches, plan.visible)
    targets = gather_rows(patches.detach(), plan.masked)
    return visible, targets


def assemble_decoder_input(projected: Tensor, plan: MaskPlan, mask_token: Tensor,
                           dec_pos_table: Tensor) -> Tensor:
    """Restore the full N-slot sequence: projected encoder tokens at visible
    slots, the shared mask token at masked slots, decoder positions added by
    grid index."""
    b, k, d = projected.shape
    if k != plan.visible.shape[1] or b != plan.batch:
        raise ContractError(
            f"projected tokens {projected.shape} inconsistent with plan "
            f"({plan.batch} x {plan.visible.shape[1]})")
    n = plan.n_tokens
    out = scatter_rows(projected, plan.visible, n)
    if plan.n_masked > 0:
        ones = Tensor(np.ones((b, plan.n_masked, 1)))
        mask_block = mask_token.reshape(1, 1, d) * ones
        out = out + scatter_rows(mask_block, plan.masked, n)
    all_idx = np.broadcast_to(np.arange(n), (b, n))
    return out + embed_rows(dec_pos_table, all_idx)
