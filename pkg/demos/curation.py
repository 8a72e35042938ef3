"""
Filtering clip records
======================

Scores a synthetic pool against the default thresholds, then draws a
training stream that mixes real and synthetic clips.
"""

# %%
import itertools
from collections import Counter

import numpy as np

from multishot.curation import ClipRecord, CurationThresholds, curate, mixing_sampler

rng = np.random.default_rng(3)


def fake_record(i):
    return ClipRecord(
        clip_id=f"clip{i:03d}",
        duration_seconds=float(rng.uniform(3, 15)),
        fps=24.0, width=1280, height=720,
        shot_count=int(rng.choice([1, 2, 2, 2, 3])),
        aesthetic_score=float(rng.normal(6.0, 1.0)),
        boundary_aesthetic_score=float(rng.normal(6.0, 1.0)),
        first_last_frame_similarity=float(rng.uniform(0.85, 1.0)),
        stitch_similarity=float(rng.uniform(0.5, 0.9)),
        clip_pair_similarity=float(rng.uniform(0.6, 1.0)),
        vlm_coherence_pass=bool(rng.random() < 0.9),
    )


records = [fake_record(i) for i in range(300)]
reports, summary = curate(records, None, CurationThresholds())
print(f"kept {summary['kept']} of {summary['total']}")
for rule, n in sorted(summary["failures_by_rule"].items(), key=lambda kv: -kv[1]):
    print(f"  {rule:28} {n}")

# %%
# one dropped clip in detail
print(next(r for r in reports if not r.kept).to_json())

# %%
kept = [r.clip_id for r in reports if r.kept]
synthetic = [f"syn{i:03d}" for i in range(40)]
stream = mixing_sampler(kept, synthetic, (7, 3), seed=0)
print(Counter(src for src, _ in itertools.islice(stream, 10_000)))
