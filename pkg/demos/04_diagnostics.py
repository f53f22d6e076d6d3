"""Diagnostics on two short runs: attention maps for one image and the
layer-wise singular-value gap between a guided and an unguided model.

Writes attn_head*.pgm, attn.csv and svgap.csv into demos/out/.

Run:  python3 demos/04_diagnostics.py
"""

import copy
import os

import numpy as np

from lcmae import (TrainConfig, attention_maps, generate_synthetic, pretrain,
                   sv_gap_curve)
from lcmae.analysis import write_attention_csv, write_gap_csv, write_pgm

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

ds = generate_synthetic(512, size=32, n_classes=8, seed=0)
cfg = TrainConfig(epochs=3, warmup_epochs=1)

print("training the guided model ...")
_, guided = pretrain(cfg, ds.images)
baseline_cfg = copy.deepcopy(cfg)
baseline_cfg.guidance.distance = "none"
print("training the unguided baseline ...")
_, baseline = pretrain(baseline_cfg, ds.images)

# --- attention of the center patch at the last layer ----------------------
center = (guided.vit.grid // 2) * (guided.vit.grid + 1)
result = attention_maps(guided, ds.images[0], query_index=center)
for h in range(result.maps.shape[0]):
    write_pgm(os.path.join(out_dir, f"attn_head{h}.pgm"), result.maps[h])
write_attention_csv(os.path.join(out_dir, "attn.csv"), result)
print(f"attention maps for query patch {center} written to {out_dir}/attn_head*.pgm")

# --- last-layer spectrum gap: positive ranks mean the guided model keeps
# --- more variance in those directions ------------------------------------
curve = sv_gap_curve(guided, baseline, ds.images, layer=cfg.vit.depth - 1)
write_gap_csv(os.path.join(out_dir, "svgap.csv"), curve)
print(f"log singular-value gap (guided - baseline), last layer:")
print(f"  mean {curve.mean():+.4f} over {len(curve)} ranks; "
      f"top-5 gaps {np.round(curve[:5], 4)}")
