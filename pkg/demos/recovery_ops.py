"""
Why token tasks need recovery
=============================

The synthetic token task tags a position when its token repeats the one
before it.  A window-2 max over such a pair cannot say which member was the
repeat, so a funneled model that only tiles its output should fail, while
one that mixes in a pre-funnel activation should not.

This trains a few small models; expect a couple of minutes on one core.
Pass a step count to trade accuracy for time, e.g. ``python recovery_ops.py 200``.
"""

import sys

from funnelkit import FunnelConfig, ModelConfig
from funnelkit.train import TrainConfig, make_task, run_scenario

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

mc = ModelConfig(n_layers=4, d_model=32, n_heads=4, head_dim=8, d_ff=64, vocab_size=9, max_seq=16)
data = make_task("token", seed=0, seq=16, vocab=mc.vocab_size - 1)
tc = TrainConfig(max_steps=steps, warmup_steps=min(100, steps // 10))

arms = {
    "no funnel": FunnelConfig.none(4),
    "funnel @1, tiling only": FunnelConfig.at_layer(4, 1, None),
    "funnel @1, avg_last": FunnelConfig.at_layer(4, 1, "avg_last"),
    "funnel @1, max_last": FunnelConfig.at_layer(4, 1, "max_last"),
}

# %%
# Each arm trains from the same initialisation and data order.
for name, fc in arms.items():
    res = run_scenario("normal_pretrain", mc, fc, tc, data, pretrain_steps=0)
    print(f"{name:<24} F1 {res.metric:.3f}")
