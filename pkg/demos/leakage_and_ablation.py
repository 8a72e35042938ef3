"""
Cross-shot isolation in the toy transformer
===========================================

Nudges one visual token and watches which outputs move, with and without
the mask. Then fits the model to a teacher for a few hundred steps.
"""

# %%
from dataclasses import replace

import numpy as np

from multishot.attention import BlockConfig, ToyTransformer, demo_layout, leakage_probe, synthetic_batch, train_demo

layout = demo_layout()
cfg = BlockConfig(layers=1, full_visibility_layers=0, d_model=16, n_heads=4)
batch = synthetic_batch(cfg, layout, seed=0)
v = layout.shots[2].frame_start * layout.tokens_per_frame  # first token of shot 2

# %%
for use_mask in (True, False):
    model = ToyTransformer.init(replace(cfg, use_mask=use_mask))
    delta = leakage_probe(model, layout, batch.z, batch.text, batch.poses, v, 0.5)
    for i in range(3):
        a, b = layout.shot_token_range(i)
        print(f"mask={use_mask!s:5}  shot {i} visual outputs moved by {delta[a:b].max():.3e}")

# %%
# a second masked layer relays the change through the global text
deep = ToyTransformer.init(replace(cfg, layers=2))
delta = leakage_probe(deep, layout, batch.z, batch.text, batch.poses, v, 0.5)
a, b = layout.shot_token_range(0)
print(f"2 layers: shot 0 moved by {delta[a:b].max():.3e}")

# %%
losses = train_demo(BlockConfig(), layout, steps=200, lr=0.2, seed=0)
print(f"loss {losses[0]:.3e} -> {losses[-1]:.3e}")
print(np.round(losses[::40], 6))
