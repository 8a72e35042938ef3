"""
Evaluation metrics on made-up detector outputs
==============================================
"""

# %%
import numpy as np

from multishot.metrics import (
    TypedPrediction,
    consistency_scores,
    frechet_distance,
    transition_confidence,
    type_accuracy,
    type_distribution,
)

rng = np.random.default_rng(1)

# a clear cut around frame 40, and a clip with no cut at all
with_cut = rng.normal(-6, 1, 80)
with_cut[40] = 4.0
print("confidence:", transition_confidence(with_cut), transition_confidence(rng.normal(-6, 1, 80)))

# %%
truth = ["cut_in"] * 24 + ["cut_out"] * 26 + ["shot_reverse_shot"] * 25 + ["multi_angle"] * 15
preds = [TypedPrediction(str(i), "cut_in", t) for i, t in enumerate(truth)]
print("always cut_in:", type_accuracy(preds))
print(type_distribution(preds))

# %%
print(consistency_scores(rng.normal(size=32), rng.normal(size=32), [0.81, 0.77], [0.64, 0.70]))

# %%
# distance grows with a mean shift of the second feature set
base = rng.normal(size=(500, 8))
for shift in (0.0, 0.5, 1.0, 2.0):
    other = rng.normal(size=(500, 8)) + shift
    print(f"shift {shift}: {frechet_distance(base, other):.3f}  (about {8 * shift**2:.1f} + sampling noise)")
