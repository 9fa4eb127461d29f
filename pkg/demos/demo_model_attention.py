"""The dual-branch attention network: shapes, attention maps, fusion gating.

Run:  python demos/demo_model_attention.py
"""

import math

import numpy as np

from petctseg.autograd import Tensor
from petctseg.model import (ModelConfig, encoder_forward, init_weights,
                            model_forward, parameter_count)

cfg = ModelConfig(levels=2, base_channels=8, input_dims=(16, 16, 16))
params = init_weights(cfg, seed=0)
print(f"config: {cfg.levels} levels, base {cfg.base_channels} channels, "
      f"attention kernels {cfg.attention_kernels}")
print(f"parameters: {parameter_count(cfg):,} across {len(params)} tensors")
print(f"(paper-scale config would hold {parameter_count(ModelConfig()):,})")

rng = np.random.default_rng(1)
ct = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
pet = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))

feats = encoder_forward(ct, params, "ct", cfg)
print("\nencoder features (channels double, extents halve):")
for level, f in enumerate(feats):
    print(f"  level {level}: {f.shape}")

maps = []
out = model_forward(params, cfg, ct=ct, pet=pet, collect_attention=maps)
print(f"\nforward output: {out.shape}, probabilities in "
      f"[{out.data.min():.3f}, {out.data.max():.3f}]")
print(f"{len(maps)} spatial attention maps collected; each sums to 1:")
for i, m in enumerate(maps):
    print(f"  map {i}: {m.shape}, sum {m.sum(dtype=np.float64):.6f}, "
          f"peak {m.max():.4f}")

# Fusion gating: alpha is the PET:CT weight ratio. At the endpoints one
# branch is removed bit-exactly.
zero = Tensor(np.zeros((1, 16, 16, 16), dtype=np.float32))
for alpha, gated in ((0.0, "PET"), (math.inf, "CT")):
    gcfg = ModelConfig(levels=2, base_channels=8, input_dims=(16, 16, 16),
                       fusion_alpha=alpha)
    gparams = init_weights(gcfg, seed=0)
    full = model_forward(gparams, gcfg, ct=ct, pet=pet)
    blank = model_forward(gparams, gcfg,
                          ct=zero if gated == "CT" else ct,
                          pet=zero if gated == "PET" else pet)
    same = full.data.tobytes() == blank.data.tobytes()
    print(f"alpha={alpha}: zeroing {gated} changes nothing: {same}")
