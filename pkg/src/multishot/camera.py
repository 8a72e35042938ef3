"""Pinhole camera poses, Plücker ray maps, and trajectory pose errors.

Extrinsics are stored camera-to-world: ``rotation`` maps camera-frame
directions into the world frame and ``translation`` is the camera center in
world coordinates. Under that convention a pixel ray is simply
``R @ inv(K) @ [u, v, 1]``.

All geometry is float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, LoadError

ROTATION_TOL = 1e-6
PLUCKER_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        # closed form; avoids a general solve for an upper-triangular K
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """Camera-to-world rotation and camera center."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        try:
            R = _frozen(self.rotation, (3, 3))
            t = _frozen(self.translation, (3,))
        except ValueError as exc:
            raise DomainError(f"bad extrinsics shape: {exc}") from None
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("extrinsics contain non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise DomainError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        """The 3x4 matrix ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def flatten(self) -> np.ndarray:
        return self.matrix.reshape(12)

    def __eq__(self, other):
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True)
class CameraPose:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    frame_index: int = 0

    def __post_init__(self):
        if self.frame_index < 0:
            raise DomainError(f"frame_index must be nonnegative, got {self.frame_index}")


@dataclass(frozen=True, eq=False)
class PluckerMap:
    """``h x w`` grid of 6-vectors ``(o x d, d)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 6 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DomainError(f"Plücker data must have shape (h, w, 6), got {data.shape}")
        moment, direction = data[..., :3], data[..., 3:]
        if np.max(np.abs(np.linalg.norm(direction, axis=-1) - 1.0)) > PLUCKER_TOL:
            raise DomainError("Plücker directions are not unit length")
        if np.max(np.abs(np.sum(moment * direction, axis=-1))) > PLUCKER_TOL:
            raise DomainError("Plücker moments are not orthogonal to directions")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def moment(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def direction(self) -> np.ndarray:
        return self.data[..., 3:]


def ray_direction(pose: CameraPose, u: float, v: float) -> np.ndarray:
    """Unit world-frame direction of the ray through pixel ``(u, v)``."""
    K = pose.intrinsics
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise DomainError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    d = pose.extrinsics.rotation @ (K.inverse @ np.array([u, v, 1.0]))
    return d / np.linalg.norm(d)


def sample_pixels(intrinsics: CameraIntrinsics, h: int, w: int, center: bool = False):
    """Pixel coordinates ``(u, v)`` sampled by an ``h x w`` grid.

    Cell ``(i, j)`` maps to ``(j * width / w, i * height / h)``; with
    ``center=True`` the half-cell offset is added.
    """
    if h < 1 or w < 1:
        raise DomainError(f"grid must be at least 1x1, got {h}x{w}")
    off = 0.5 if center else 0.0
    u = (np.arange(w) + off) * (intrinsics.width / w)
    v = (np.arange(h) + off) * (intrinsics.height / h)
    return np.meshgrid(u, v)  # each (h, w)


def plucker_map(pose: CameraPose, h: int, w: int, center: bool = False) -> PluckerMap:
    uu, vv = sample_pixels(pose.intrinsics, h, w, center)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # (h, w, 3)
    M = pose.extrinsics.rotation @ pose.intrinsics.inverse
    d = pix @ M.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.extrinsics.translation, d.shape)
    return PluckerMap(np.concatenate([np.cross(o, d), d], axis=-1))


def relative_pose(reference: CameraExtrinsics, target: CameraExtrinsics) -> CameraExtrinsics:
    """Express ``target`` in the camera frame of ``reference``."""
    Rr = reference.rotation
    R = Rr.T @ target.rotation
    t = Rr.T @ (target.translation - reference.translation)
    return CameraExtrinsics(R, t)


def _check_pair(estimated, ground_truth):
    if len(estimated) == 0 or len(estimated) != len(ground_truth):
        raise DomainError(
            f"need equal-length nonempty sequences, got {len(estimated)} and {len(ground_truth)}"
        )


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in radians.

    Equal to ``arccos(clip((tr(Rb^T Ra) - 1) / 2, -1, 1))``, evaluated with
    atan2 so that small angles keep full precision.
    """
    if np.array_equal(Ra, Rb):
        return 0.0
    M = Rb.T @ Ra
    cos2 = np.sum(Ra * Rb) - 1.0
    sin2 = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.arctan2(sin2, cos2))


def rot_err(
    estimated: Sequence[CameraExtrinsics], ground_truth: Sequence[CameraExtrinsics]
) -> float:
    """Mean geodesic rotation error over frames, in radians."""
    _check_pair(estimated, ground_truth)
    angles = [rotation_angle(e.rotation, g.rotation) for e, g in zip(estimated, ground_truth)]
    return float(np.mean(angles))


def _normalized_translations(poses: Sequence[CameraExtrinsics]) -> np.ndarray:
    t = np.stack([p.translation for p in poses])
    scale = np.max(np.linalg.norm(t, axis=1))
    return t / scale if scale > 0 else t


def trans_err(
    estimated: Sequence[CameraExtrinsics], ground_truth: Sequence[CameraExtrinsics]
) -> float:
    """Mean L2 distance between max-norm-normalized camera centers."""
    _check_pair(estimated, ground_truth)
    diff = _normalized_translations(estimated) - _normalized_translations(ground_truth)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


# -- trajectory files ---------------------------------------------------------

def pose_to_dict(pose: CameraPose) -> dict:
    K, E = pose.intrinsics, pose.extrinsics
    return {
        "frame_index": pose.frame_index,
        "fx": K.fx,
        "fy": K.fy,
        "cx": K.cx,
        "cy": K.cy,
        "width": K.width,
        "height": K.height,
        "rotation": [float(x) for x in E.rotation.reshape(9)],
        "translation": [float(x) for x in E.translation],
    }


def pose_from_dict(d: dict) -> CameraPose:
    intr = CameraIntrinsics(
        float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
        int(d["width"]), int(d["height"]),
    )
    rot = d["rotation"]
    if len(rot) != 9 or len(d["translation"]) != 3:
        raise DomainError("rotation needs 9 numbers and translation 3")
    ext = CameraExtrinsics(np.array(rot, dtype=np.float64).reshape(3, 3), d["translation"])
    return CameraPose(intr, ext, int(d["frame_index"]))


def trajectory_from_json(doc: dict) -> list[CameraPose]:
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise LoadError("trajectory must be an object with a 'frames' list")
    poses = []
    for i, fr in enumerate(doc["frames"]):
        label = fr.get("frame_index", f"#{i}") if isinstance(fr, dict) else f"#{i}"
        try:
            poses.append(pose_from_dict(fr))
        except (DomainError, KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"frame {label}: {exc}") from None
    seen = set()
    for p in poses:
        if p.frame_index in seen:
            raise LoadError(f"frame {p.frame_index}: duplicate frame_index")
        seen.add(p.frame_index)
    return poses


def trajectory_to_json(poses: Sequence[CameraPose]) -> dict:
    return {"frames": [pose_to_dict(p) for p in poses]}


def load_trajectory(path: str | os.PathLike) -> list[CameraPose]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: {exc}") from None
    return trajectory_from_json(doc)


def save_trajectory(path: str | os.PathLike, poses: Sequence[CameraPose]) -> None:
    with open(path, "w") as f:
        json.dump(trajectory_to_json(poses), f, indent=2)
        f.write("\n")
