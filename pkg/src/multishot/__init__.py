"""Building blocks for camera-conditioned multi-shot video generation.

Submodules:

``camera``        pinhole poses, Plücker ray maps, RotErr / TransErr
``conditioning``  extrinsic MLP and Plücker conv branches, token injection
``shot_mask``     token layouts and shot-aware attention masks
``attention``     masked multi-head attention and a toy conditioned stack
``curation``      clip filters, caption schema, dataset stats, mixing sampler
``metrics``       transition confidence/type metrics, consistency, Fréchet distance
``tensorio``      binary tensor container
"""

from .camera import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraPose,
    PluckerMap,
    plucker_map,
    ray_direction,
    relative_pose,
    rot_err,
    trans_err,
)
from .conditioning import ConvBranch, MlpBranch, encode_extrinsic, encode_plucker, inject
from .errors import DomainError, LoadError
from .shot_mask import AttentionMask, ShotSpec, TokenLayout, build_mask, mask_for_layer, mask_stats

__version__ = "0.1.0"
