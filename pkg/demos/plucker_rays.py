"""
Per-pixel rays for an orbiting camera
=====================================

Builds a six-frame orbit, turns each pose into a Plücker map, and checks the
two line constraints on every cell.
"""

# %%
import numpy as np

from multishot.attention import orbit_trajectory
from multishot.camera import CameraIntrinsics, plucker_map, relative_pose, rot_err, trans_err

K = CameraIntrinsics(fx=24.0, fy=24.0, cx=16.0, cy=12.0, width=32, height=24)
poses = orbit_trajectory(6, radius=4.0, start_angle=0.0, step=0.25, intrinsics=K)

# %%
# channels 0-2 hold the moment o x d, channels 3-5 the unit direction
for p in poses:
    pm = plucker_map(p, 6, 8)
    unit = np.abs(np.linalg.norm(pm.direction, axis=-1) - 1).max()
    ortho = np.abs((pm.moment * pm.direction).sum(-1)).max()
    print(f"frame {p.frame_index}: |d|-1 <= {unit:.1e}   m.d <= {ortho:.1e}")

# %%
# poses relative to the first frame; the first becomes the identity
rel = [relative_pose(poses[0].extrinsics, p.extrinsics) for p in poses]
print(np.round(rel[0].matrix, 12))

# %%
# a perturbed copy of the trajectory, scored against the original
est = [p.extrinsics for p in orbit_trajectory(6, radius=4.2, start_angle=0.05, step=0.25, intrinsics=K)]
gt = [p.extrinsics for p in poses]
print(f"RotErr  {rot_err(est, gt):.4f} rad")
print(f"TransErr {trans_err(est, gt):.4f}")
