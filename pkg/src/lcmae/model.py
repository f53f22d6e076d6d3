"""Model state: online encoder/decoder, MLP heads, EMA target network.

Parameter trees are nested dicts of Tensors (plus BatchNormState leaves);
`flatten_params` gives the dotted-name view used by the optimizer, the EMA
update, and the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import BatchNormState, Tensor, batch_norm, matmul, relu
from .vit import ViTConfig, init_decoder, init_encoder


@dataclass
class GuidanceConfig:
    alpha: float = 0.25
    distance: str = "cosine"        # cosine | infonce | smooth_l1 | none
    guidance_type: str = "global"   # global | token_wise | global_plus_token_wise
    guidance_source: str = "visible_tokens_pooled"  # or cls_token
    guided_tokens: str = "visible_only"  # or visible_and_mask
    target_mask_ratio: float = 0.0
    tau: float = 0.996
    norm_pix_targets: bool = True
    mask_ratio: float = 0.75
    head_hidden: int = 256
    head_out: int = 64
    infonce_temperature: float = 0.2
    simmim_mode: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.target_mask_ratio < 1.0:
            raise ConfigError(
                f"target_mask_ratio must lie in [0, 1), got {self.target_mask_ratio}")
        if self.distance not in ("cosine", "infonce", "smooth_l1", "none"):
            raise ConfigError(f"unknown distance: {self.distance!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def enabled(self) -> bool:
        """The guidance branch runs only when it can contribute to the loss."""
        return self.distance != "none" and self.alpha > 0


def _mlp_head(rng, n_in: int, hidden: int, n_out: int) -> dict:
    """Two fully-connected layers with batch norm and ReLU in between."""
    return {
        "fc1": {"w": Tensor(rng.normal(0.0, 0.02, (n_in, hidden)), requires_grad=True),
                "b": Tensor(np.zeros(hidden), requires_grad=True)},
        "bn": BatchNormState.create(hidden),
        "fc2": {"w": Tensor(rng.normal(0.0, 0.02, (hidden, n_out)), requires_grad=True),
                "b": Tensor(np.zeros(n_out), requires_grad=True)},
    }


def head_forward(x: Tensor, head: dict) -> Tensor:
    h = matmul(x, head["fc1"]["w"]) + head["fc1"]["b"]
    h = relu(batch_norm(h, head["bn"]))
    return matmul(h, head["fc2"]["w"]) + head["fc2"]["b"]


@dataclass
class ModelState:
    vit: ViTConfig
    guidance: GuidanceConfig
    online: dict            # encoder
    decoder: dict
    heads: dict             # {"projector", "predictor"}
    target: dict            # {"encoder", "projector"} (gradient-free)
    mask_token: Tensor      # decoder-space shared mask token
    enc_mask_token: Tensor  # encoder-space mask token (SimMIM mode)
    simmim_pred: dict = field(default_factory=dict)  # one-layer head (SimMIM mode)


def flatten_params(tree, prefix: str = "") -> dict:
    """Dotted-name view of a parameter tree; values are Tensors or, for
    batch-norm running statistics, plain numpy arrays."""
    out: dict = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif isinstance(tree, BatchNormState):
        out[f"{prefix}.gamma"] = tree.gamma
        out[f"{prefix}.beta"] = tree.beta
        out[f"{prefix}.running_mean"] = tree
        out[f"{prefix}.running_var"] = tree
    elif isinstance(tree, dict):
        for k, v in tree.items():
            out.update(flatten_params(v, f"{prefix}.{k}" if prefix else k))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            out.update(flatten_params(v, f"{prefix}.{i}"))
    else:
        raise ContractError(f"unexpected node in parameter tree at {prefix!r}: {type(tree)}")
    return out


def trainable_params(tree, prefix: str = "") -> dict[str, Tensor]:
    return {k: v for k, v in flatten_params(tree, prefix).items()
            if isinstance(v, Tensor) and v.requires_grad}


def _leaf_arrays(tree, prefix: str = "") -> dict[str, np.ndarray]:
    """All float buffers (weights and running stats) as name -> array."""
    out = {}
    for k, v in flatten_params(tree, prefix).items():
        if isinstance(v, Tensor):
            out[k] = v.data
        else:  # BatchNormState running-stat marker
            stat = k.rsplit(".", 1)[1]
            out[k] = getattr(v, stat)
    return out


def _set_leaf(tree_entry, name: str, value: np.ndarray):
    if isinstance(tree_entry, Tensor):
        tree_entry.data = value
    else:
        setattr(tree_entry, name.rsplit(".", 1)[1], value)


def freeze_tree(tree):
    for v in flatten_params(tree).values():
        if isinstance(v, Tensor):
            v.requires_grad = False
        else:
            v.update_running = False
    return tree


def clone_tree(tree):
    """Structural deep copy with fresh Tensor buffers (no lineage)."""
    if isinstance(tree, Tensor):
        t = Tensor(tree.data.copy(), requires_grad=tree.requires_grad)
        return t
    if isinstance(tree, BatchNormState):
        return BatchNormState(
            gamma=clone_tree(tree.gamma), beta=clone_tree(tree.beta),
            running_mean=tree.running_mean.copy(), running_var=tree.running_var.copy(),
            momentum=tree.momentum, mode=tree.mode, update_running=tree.update_running)
    if isinstance(tree, dict):
        return {k: clone_tree(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [clone_tree(v) for v in tree]
    raise ContractError(f"unexpected node in parameter tree: {type(tree)}")


def init_model(vit_cfg: ViTConfig, guid_cfg: GuidanceConfig, seed: int) -> ModelState:
    rng = np.random.default_rng(seed)
    online = init_encoder(vit_cfg, rng)
    decoder = init_decoder(vit_cfg, rng)
    heads = {
        "projector": _mlp_head(rng, vit_cfg.dim, guid_cfg.head_hidden, guid_cfg.head_out),
        "predictor": _mlp_head(rng, guid_cfg.head_out, guid_cfg.head_hidden, guid_cfg.head_out),
        # maps decoder-space mask features into encoder space for the
        # visible_and_mask token-guidance ablation
        "mask_proj": {"w": Tensor(rng.normal(0.0, 0.02, (vit_cfg.decoder_dim, vit_cfg.dim)),
                                  requires_grad=True),
                      "b": Tensor(np.zeros(vit_cfg.dim), requires_grad=True)},
    }
    target = {
        "encoder": freeze_tree(clone_tree(online)),
        "projector": freeze_tree(clone_tree(heads["projector"])),
    }
    mask_token = Tensor(rng.normal(0.0, 0.02, (vit_cfg.decoder_dim,)), requires_grad=True)
    enc_mask_token = Tensor(rng.normal(0.0, 0.02, (vit_cfg.dim,)), requires_grad=True)
    simmim_pred = {
        "w": Tensor(rng.normal(0.0, 0.02, (vit_cfg.dim, vit_cfg.patch_dim)), requires_grad=True),
        "b": Tensor(np.zeros(vit_cfg.patch_dim), requires_grad=True),
    }
    return ModelState(vit=vit_cfg, guidance=guid_cfg, online=online,
                      decoder=decoder, heads=heads, target=target,
                      mask_token=mask_token, enc_mask_token=enc_mask_token,
                      simmim_pred=simmim_pred)


def online_tree(state: ModelState) -> dict:
    """Everything the optimizer updates."""
    return {"online": state.online, "decoder": state.decoder, "heads": state.heads,
            "mask_token": state.mask_token, "enc_mask_token": state.enc_mask_token,
            "simmim_pred": state.simmim_pred}


def ema_update(target_tree, online_tree, tau: float):
    """theta_t <- tau * theta_t + (1 - tau) * theta_o on every scalar,
    including batch-norm running statistics."""
    t_leaves = flatten_params(target_tree)
    o_leaves = flatten_params(online_tree)
    if set(t_leaves) != set(o_leaves):
        raise ContractError("target/online parameter trees differ in structure")
    for name in t_leaves:
        t, o = t_leaves[name], o_leaves[name]
        if isinstance(t, Tensor):
            ov = o.data if isinstance(o, Tensor) else getattr(o, name.rsplit(".", 1)[1])
            t.data = tau * t.data + (1.0 - tau) * ov
        else:
            stat = name.rsplit(".", 1)[1]
            tv = getattr(t, stat)
            ov = getattr(o, stat) if isinstance(o, BatchNormState) else o.data
            setattr(t, stat, tau * tv + (1.0 - tau) * ov)


def ema_update_state(state: ModelState):
    ema_update(state.target["encoder"], state.online, state.guidance.tau)
    ema_update(state.target["projector"], state.heads["projector"], state.guidance.tau)


def set_bn_mode(tree, mode: str):
    for v in flatten_params(tree).values():
        if isinstance(v, BatchNormState):
            v.mode = mode
