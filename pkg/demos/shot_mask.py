"""
Shot-aware attention mask
=========================

Three shots over six frames, with global text and one caption per shot.
Prints the mask as characters, then the per-layer density schedule.
"""

# %%
import numpy as np

from multishot.attention import BlockConfig, demo_layout, layer_mask_densities
from multishot.shot_mask import build_mask, mask_blocks, mask_stats

layout = demo_layout()
mask = build_mask(layout)
names = layout.class_names()
print(layout.n_text, "text tokens,", layout.n_visual, "visual tokens")

# %%
# rows are queries, columns keys; '#' = may attend
for i, row in enumerate(mask.bits):
    print(f"{names[i]:>14} " + "".join("#" if b else "." for b in row))

# %%
for blk in mask_blocks(layout):
    print(blk)

# %%
stats = mask_stats(mask, layout)
print(f"density {stats.density:.3f} ({stats.visible_pairs} of {mask.bits.size} pairs)")
print("per layer:", layer_mask_densities(BlockConfig(layers=4, full_visibility_layers=2), layout))
