"""Sweep the guidance ablation axes on a tiny model and report the losses
after a short run of each variant.

Every variant is reachable from the CLI too, e.g.:
  lcmae pretrain --data d.bin --out c.ckpt --override guidance.distance=infonce

Run:  python3 demos/03_ablation_grid.py
"""

import copy

from lcmae import TrainConfig, generate_synthetic, pretrain
from lcmae.oracles import tiny_augment_config, tiny_guidance_config, tiny_vit_config

ds = generate_synthetic(128, size=8, n_classes=4, seed=1)

BASE = TrainConfig(epochs=4, warmup_epochs=1, batch_size=32, log_every=100,
                   guidance=tiny_guidance_config(),
                   augment=tiny_augment_config(), vit=tiny_vit_config())

VARIANTS = [
    ("baseline (no guidance)", {"distance": "none"}),
    ("cosine / global", {}),
    ("infonce / global", {"distance": "infonce"}),
    ("smooth_l1 / global", {"distance": "smooth_l1"}),
    ("cosine / token-wise", {"guidance_type": "token_wise"}),
    ("cosine / global+token", {"guidance_type": "global_plus_token_wise"}),
    ("cosine / cls source", {"guidance_source": "cls_token"}),
    ("cosine / guide masked too", {"guided_tokens": "visible_and_mask"}),
    ("cosine / masked target view", {"target_mask_ratio": 0.25}),
    ("one-layer head, all tokens", {"simmim_mode": True}),
]

print(f"{'variant':28s} {'mim':>8s} {'gg':>8s} {'total':>8s}")
for name, overrides in VARIANTS:
    cfg = copy.deepcopy(BASE)
    for k, v in overrides.items():
        setattr(cfg.guidance, k, v)
    if overrides.get("guidance_source") == "cls_token":
        cfg.vit.use_cls = True
    log, _ = pretrain(cfg, ds.images)
    last = log[-1]
    print(f"{name:28s} {last.l_mim:8.4f} {last.l_gg:8.4f} {last.total:8.4f}")
