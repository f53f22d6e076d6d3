"""Optimization loop: AdamW, warmup + cosine schedule, layer-wise LR decay,
epoch orchestration, and linear probing of frozen features."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig
from .errors import ConfigError, ContractError, DataError
from .model import (GuidanceConfig, ModelState, ema_update_state, init_model,
                    online_tree, trainable_params)
from .objective import LossBreakdown, lcmae_forward
from .tensor import Tensor, softmax_lastdim
from .vit import ViTConfig, encoder_forward, patchify


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    base_lr: float = 2e-3
    min_lr: float = 1e-5
    batch_size: int = 128
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    layer_decay: float = 0.65
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0   # epochs; 0 disables periodic checkpoints
    lr_batch_scaling: bool = False  # base_lr * batch/256 when enabled
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")

    @property
    def effective_lr(self) -> float:
        if self.lr_batch_scaling:
            return self.base_lr * self.batch_size / 256.0
        return self.base_lr


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
               weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, lr_scales: dict[str, float] | None = None):
    """One AdamW update with decoupled weight decay and bias correction.

    Parameters without an accumulated gradient are skipped entirely."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        scale = lr_scales.get(name, 1.0) if lr_scales else 1.0
        step_lr = lr * scale
        p.data = p.data - step_lr * weight_decay * p.data
        p.data = p.data - step_lr * mhat / (np.sqrt(vhat) + eps)


def lr_at(step: int, total_steps: int, warmup_steps: int,
          base_lr: float, min_lr: float) -> float:
    """Linear ramp to base_lr over warmup, then cosine decay to min_lr."""
    if step < warmup_steps:
        return base_lr * step / max(warmup_steps, 1)
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress))


def layer_lr_scale(param_layer_index: int, n_layers: int, decay: float) -> float:
    return decay ** (n_layers - param_layer_index)


_BLOCK_RE = re.compile(r"^online\.blocks\.(\d+)\.")


def param_layer_index(name: str, depth: int) -> int:
    """MAE-style grouping: patch embed and positions at 0, encoder blocks at
    1..depth, everything else (decoder, heads, mask tokens) at depth + 1."""
    if name.startswith(("online.patch_embed", "online.pos", "online.cls")):
        return 0
    m = _BLOCK_RE.match(name)
    if m:
        return int(m.group(1)) + 1
    return depth + 1


def build_lr_scales(names, cfg: TrainConfig) -> dict[str, float]:
    depth = cfg.vit.depth
    n_layers = depth + 1
    return {n: layer_lr_scale(param_layer_index(n, depth), n_layers, cfg.layer_decay)
            for n in names}


# ---------------------------------------------------------------------------
# stepping


def lcmae_step(images: np.ndarray, state: ModelState, cfg: TrainConfig,
               opt: OptimizerState, step: int, lr: float | None = None,
               lr_scales: dict[str, float] | None = None) -> LossBreakdown:
    """One full training step: forward, backward, AdamW, EMA."""
    params = trainable_params(online_tree(state))
    for p in params.values():
        p.zero_grad()
    losses = lcmae_forward(state, images, cfg.augment, cfg.seed, step)
    losses.total.backward()
    if lr is None:
        lr = cfg.effective_lr
    adamw_step(params, opt, lr, cfg.weight_decay, cfg.betas, lr_scales=lr_scales)
    if state.guidance.enabled:
        ema_update_state(state)
    return losses


@dataclass
class LogRow:
    step: int
    lr: float
    l_mim: float
    l_gg: float
    total: float

    def as_csv(self) -> str:
        return f"{self.step},{self.lr:.8g},{self.l_mim:.8g},{self.l_gg:.8g},{self.total:.8g}"


def pretrain(cfg: TrainConfig, images: np.ndarray,
             checkpoint_path: str | None = None,
             progress: bool = False) -> tuple[list[LogRow], ModelState]:
    """Deterministic pre-training run over an image array [n, 3, H, W]."""
    if len(images) == 0:
        raise DataError("pretrain needs a non-empty dataset")
    state = init_model(cfg.vit, cfg.guidance, cfg.seed)
    opt = OptimizerState()
    params = trainable_params(online_tree(state))
    lr_scales = build_lr_scales(params.keys(), cfg)
    n = len(images)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    log: list[LogRow] = []
    step = 0
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD5]))
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for k in range(steps_per_epoch):
            batch = images[order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            lr = lr_at(step, total_steps, warmup_steps, cfg.effective_lr, cfg.min_lr)
            losses = lcmae_step(batch, state, cfg, opt, step, lr=lr,
                                lr_scales=lr_scales)
            step += 1
            if step == 1 or step % cfg.log_every == 0 or step == total_steps:
                log.append(LogRow(step=step, lr=lr, l_mim=losses.mim,
                                  l_gg=losses.guidance,
                                  total=float(losses.total.data)))
                if progress:
                    print(f"step {step}/{total_steps} lr {lr:.2e} "
                          f"mim {losses.mim:.4f} gg {losses.guidance:.4f} "
                          f"({time.time() - t0:.0f}s)")
        if (checkpoint_path and cfg.checkpoint_every
                and (epoch + 1) % cfg.checkpoint_every == 0):
            from .checkpoint import save_checkpoint
            save_checkpoint(state, checkpoint_path, opt_state=opt, step=step)
    return log, state


# ---------------------------------------------------------------------------
# linear probing


def extract_features(state: ModelState, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Mean-pooled final-layer features of the frozen online encoder on the
    full token set (no masking, no augmentation)."""
    cfg = state.vit
    feats = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        patches = Tensor(patchify(chunk, cfg.patch_size))
        idx = np.broadcast_to(np.arange(cfg.n_tokens), (len(chunk), cfg.n_tokens))
        tokens, _ = encoder_forward(state.online, patches, idx, cfg)
        body = tokens.data[:, 1:, :] if cfg.use_cls else tokens.data
        feats.append(body.mean(axis=1))
    return np.concatenate(feats, axis=0)


@dataclass
class ProbeConfig:
    epochs: int = 60
    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 256
    holdout_fraction: float = 0.25
    seed: int = 0


def _train_linear(
        feats: np.ndarray, labels: np.ndarray, n_classes: int,
        cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d = feats.shape[1]
    mu, sd = feats.mean(axis=0), feats.std(axis=0) + 1e-8
    feats = (feats - mu) / sd
    w = Tensor(rng.normal(0, 0.01, (d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = OptimizerState()
    n = len(feats)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            sel = order[i:i + cfg.batch_size]
            x = Tensor(feats[sel])
            y = labels[sel]
            w.zero_grad(); b.zero_grad()
            logits = x @ w + b
            probs = softmax_lastdim(logits)
            picked = probs[(np.arange(len(sel)), y)]
            loss = -(picked.clip_min(1e-12).log()).mean()
            loss.backward()
            adamw_step({"w": w, "b": b}, opt, cfg.lr, cfg.weight_decay)
    return w.data, b.data, mu, sd


def linear_probe(state: ModelState, images: np.ndarray, labels: np.ndarray,
                 cfg: ProbeConfig | None = None) -> float:
    """Top-1 accuracy of a linear classifier on frozen mean-pooled features,
    measured on a held-out split."""
    cfg = cfg or ProbeConfig()
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError("linear probe needs at least two classes")
    n_classes = int(classes.max()) + 1
    feats = extract_features(state, images)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9E]))
    order = rng.permutation(len(feats))
    n_hold = max(1, int(len(feats) * cfg.holdout_fraction))
    hold, train = order[:n_hold], order[n_hold:]
    if len(np.unique(labels[train])) < 2:
        raise DataError("training split collapsed to a single class")
    w, b, mu, sd = _train_linear(feats[train], labels[train], n_classes, cfg)
    logits = (feats[hold] - mu) / sd @ w + b
    return float((logits.argmax(axis=1) == labels[hold]).mean())
