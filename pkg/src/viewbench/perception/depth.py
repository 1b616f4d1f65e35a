"""Pinhole depth rendering and back-projection."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..geometry.raycast import RayAccelerator
from ..viewspace import CameraIntrinsics, ViewPose, pixel_rays

_HEADER = struct.Struct("<4sIIdd12d")
_MAGIC = b"VBD1"


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Euclidean distance along each pixel ray (float32), +inf where nothing is hit."""
    intrinsics: CameraIntrinsics
    pose: ViewPose
    depths: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.depths, dtype=np.float32).reshape(self.intrinsics.height, self.intrinsics.width)
        finite = d[np.isfinite(d)]
        if finite.size and (finite.min() <= 0 or finite.max() > self.intrinsics.far):
            raise ValueError("finite depths must lie in (0, far]")
        d.flags.writeable = False
        object.__setattr__(self, "depths", d)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.depths)

    def to_bytes(self) -> bytes:
        intr = self.intrinsics
        head = _HEADER.pack(_MAGIC, intr.width, intr.height, intr.fov_deg, intr.far, *self.pose.as_floats())
        return head + self.depths.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DepthImage":
        magic, w, h, fov, far, *pose = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise ValueError("not a depth image payload")
        body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        if body.size != w * h:
            raise ValueError("depth payload size does not match its header")
        return cls(CameraIntrinsics(w, h, fov, far), ViewPose.from_floats(pose), body.astype(np.float32).reshape(h, w))


def render_depth(acc: RayAccelerator, pose: ViewPose, intrinsics: CameraIntrinsics,
                 method: str = "raster") -> DepthImage:
    """First-hit depth per pixel center; hits beyond the far range count as misses.

    `method` picks the traversal ("raster" bins triangles by screen footprint,
    "bvh" walks the hierarchy); both produce identical bits.
    """
    rays = pixel_rays(pose, intrinsics)
    if method == "raster":
        t, _ = acc.trace_pinhole(pose.position, pose.rotation, intrinsics.focal,
                                 intrinsics.width, intrinsics.height, rays)
    elif method == "bvh":
        t, _ = acc.intersect(pose.position, rays)
    else:
        raise ValueError(f"unknown render method {method!r}")
    depth = t.astype(np.float32)
    depth[~(depth <= np.float32(intrinsics.far))] = np.inf
    return DepthImage(intrinsics, pose, depth)


def depth_to_points(img: DepthImage) -> np.ndarray:
    """World-space hit points, row-major over hit pixels."""
    d = img.depths.ravel()
    hit = np.isfinite(d)
    if not hit.any():
        return np.zeros((0, 3))
    rays = pixel_rays(img.pose, img.intrinsics)[hit]
    return img.pose.position + d[hit].astype(np.float64)[:, None] * rays
