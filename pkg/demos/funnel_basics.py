"""
Halving a toy sequence and getting it back
==========================================

A funnel halves a sequence with a window-2 max.  Token-level heads then need
the full length back, which is rebuilt by tiling and mixing in activations
cached before the funnel.
"""

import numpy as np

from funnelkit import FunnelConfig, ModelConfig, RecoveryOp, max_pool_seq, recover, tile_upsample
from funnelkit.cost import flops_estimate
from funnelkit.funnel import LayerCache

# A batch of one sequence with six positions and a single feature.
x = np.array([[[1.0], [0.0], [3.0], [2.0], [4.0], [-1.0]]])
mask = np.ones((1, 6), dtype=bool)

# Max over adjacent pairs: 6 positions become 3.
pooled, pooled_mask = max_pool_seq(x, mask, 2)
print("pooled :", pooled.data[0, :, 0])

# Tiling repeats each pooled value, giving back six positions.
tiled = tile_upsample(pooled, 2, 6)
print("tiled  :", tiled.data[0, :, 0])

# The tiled copy has lost which member of each pair held the maximum.
# Recovery mixes in the last full-length activation seen before the funnel.
cache = LayerCache()
cache.push(x)
for op in RecoveryOp:
    print(f"{op.value:<13}", recover(tiled, cache, op).data[0, :, 0])

# %%
# What a funnel saves
# -------------------
# Analytic FLOPs of the default 16-layer model at 128 tokens, sentence head.
mc = ModelConfig()
for layer in range(0, 17, 4):
    rep = flops_estimate(mc, FunnelConfig.at_layer(16, layer), 128)
    print(f"funnel before layer {layer:>2}: {rep.total / 1e6:7.1f} MFLOPs, savings {rep.savings_ratio:6.1%}")
