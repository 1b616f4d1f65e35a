"""Observed point clouds, coverage sets and surface-coverage scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geometry.raycast import RayAccelerator
from ..geometry.voxel import SurfacePatches, SurfacePointCloud, SurfaceVoxelGrid, surface_patches
from ..viewspace import CameraIntrinsics, ViewPose
from .depth import DepthImage, depth_to_points, render_depth

DEDUP_RESOLUTION = 0.005
_OFFSET = 1 << 20


def hash_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    """Packed integer key of the half-open cell containing each point."""
    cell = np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64) + _OFFSET
    return (cell[:, 0] << 42) | (cell[:, 1] << 21) | cell[:, 2]


@dataclass(frozen=True, eq=False)
class ObservedCloud:
    """Accumulated observation points with first-come voxel-hash dedup."""
    points: np.ndarray
    keys: np.ndarray
    resolution: float = DEDUP_RESOLUTION

    @classmethod
    def empty(cls, resolution: float = DEDUP_RESOLUTION) -> "ObservedCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), resolution)

    def __len__(self):
        return len(self.points)


def fuse_with_delta(cloud: ObservedCloud, points) -> tuple[ObservedCloud, np.ndarray]:
    """Fused cloud plus the representatives that were actually inserted."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return cloud, pts
    keys = hash_keys(pts, cloud.resolution)
    uniq, first = np.unique(keys, return_index=True)
    known = np.isin(uniq, cloud.keys, assume_unique=True)
    first = np.sort(first[~known])
    added = pts[first]
    merged = np.concatenate([cloud.keys, keys[first]])
    merged.sort()
    return ObservedCloud(np.concatenate([cloud.points, added]), merged, cloud.resolution), added


def fuse(cloud: ObservedCloud, points) -> ObservedCloud:
    return fuse_with_delta(cloud, points)[0]


def covered_mask(gt_points: np.ndarray, observed: np.ndarray, tau: float) -> np.ndarray:
    """True for ground-truth points with some observed point at distance <= tau."""
    out = np.zeros(len(gt_points), dtype=bool)
    if len(observed) == 0 or len(gt_points) == 0:
        return out
    tree = cKDTree(observed)
    d, _ = tree.query(gt_points, k=1, distance_upper_bound=tau * (1 + 1e-9))
    return d <= tau


def surface_coverage(gt: SurfacePointCloud, cloud: ObservedCloud, tau: float = 0.02) -> float:
    if len(gt) == 0:
        raise ValueError("ground-truth cloud is empty")
    return float(covered_mask(gt.points, cloud.points, tau).mean())


class CoverageTracker:
    """Incremental SC@tau: only still-uncovered ground-truth points are queried per update."""

    def __init__(self, gt: SurfacePointCloud, tau: float = 0.02):
        self.gt = gt.points
        self.tau = tau
        self.covered = np.zeros(len(self.gt), dtype=bool)

    def update(self, new_points: np.ndarray) -> float:
        if len(new_points):
            open_idx = np.flatnonzero(~self.covered)
            if len(open_idx):
                self.covered[open_idx[covered_mask(self.gt[open_idx], new_points, self.tau)]] = True
        return self.value

    @property
    def value(self) -> float:
        return float(self.covered.mean())


def voxel_count(points: np.ndarray, resolution: float, lo: float = -1.2, hi: float = 1.2) -> int:
    """Distinct half-open cells of the cube [lo, hi]^3 holding at least one point."""
    p = np.asarray(points).reshape(-1, 3)
    p = p[np.all((p >= lo) & (p <= hi), axis=1)]
    n = int(np.ceil((hi - lo) / resolution - 1e-9))
    cell = np.minimum(np.floor((p - lo) / resolution).astype(np.int64), n - 1)
    return len(np.unique((cell[:, 0] * n + cell[:, 1]) * n + cell[:, 2]))


class VoxelCounter:
    """Running count of distinct cells for the map-stabilization rule."""

    def __init__(self, resolution: float, lo: float = -1.2, hi: float = 1.2):
        self.resolution = resolution
        self.lo, self.hi = lo, hi
        self.n = int(np.ceil((hi - lo) / resolution - 1e-9))
        self.seen = np.zeros(self.n ** 3, dtype=bool)

    def add(self, points: np.ndarray) -> int:
        p = np.asarray(points).reshape(-1, 3)
        p = p[np.all((p >= self.lo) & (p <= self.hi), axis=1)]
        cell = np.minimum(np.floor((p - self.lo) / self.resolution).astype(np.int64), self.n - 1)
        self.seen[(cell[:, 0] * self.n + cell[:, 1]) * self.n + cell[:, 2]] = True
        return self.count

    @property
    def count(self) -> int:
        return int(self.seen.sum())


@dataclass(frozen=True, eq=False)
class CoverageSet:
    """Sorted ids of the surface voxels observed from one view."""
    ids: np.ndarray
    universe: int

    def __len__(self):
        return len(self.ids)

    def bitset(self) -> int:
        bits = np.zeros(self.universe, dtype=bool)
        bits[self.ids] = True
        return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


def voxels_of_points(svg: SurfaceVoxelGrid, points: np.ndarray) -> np.ndarray:
    ids = svg.lookup(points)
    return np.unique(ids[ids >= 0])


VISIBILITY_TOLERANCE = 2e-3
PLANE_SLACK_PIXELS = 3.0


def visible_patches(img: DepthImage, patches: SurfacePatches, acc: RayAccelerator,
                    tol: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """Depth-consistency test of surface representatives against a rendered image.

    A representative q is visible when it projects into the image within far
    range and the first hit of its pixel ray is not in front of the local
    surface plane through q (by more than `tol`). A pixel ray that hits
    nothing cannot occlude q. On grazing planes the plane depth can drift far
    from q's own range; those cases are settled by casting the exact ray to q.
    """
    intr, pose = img.intrinsics, img.pose
    v = patches.points - pose.position
    cam = v @ pose.rotation
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    col = np.floor(intr.focal * cam[:, 0] / zs + 0.5 * intr.width)
    row = np.floor(intr.focal * cam[:, 1] / zs + 0.5 * intr.height)
    dist = np.linalg.norm(v, axis=1)
    inside = front & (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height) & (dist <= intr.far)
    vis = np.zeros(len(v), dtype=bool)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return vis
    pix = row[idx].astype(np.int64) * intr.width + col[idx].astype(np.int64)
    depth = img.depths.ravel()[pix].astype(np.float64)
    ray = intr.camera_rays()[pix] @ pose.rotation.T
    d = dist[idx]
    n = patches.normals[idx]
    n_ray = np.einsum("ij,ij->i", n, ray)
    n_v = np.einsum("ij,ij->i", n, v[idx])
    same_side = n_ray * n_v > 0
    expected = np.where(same_side, n_v / np.where(same_side, n_ray, 1.0), d)
    vis[idx] = ~np.isfinite(depth) | (depth >= expected - tol)
    drift = np.flatnonzero(np.abs(expected - d) > PLANE_SLACK_PIXELS * d / intr.focal)
    if len(drift):
        sel = idx[drift]
        t, _ = acc.intersect(pose.position, v[sel] / dist[sel, None])
        vis[sel] = t >= dist[sel] - tol
    return vis


def coverage_from_image(img: DepthImage, patches: SurfacePatches, universe: int, acc: RayAccelerator,
                        tol: float = VISIBILITY_TOLERANCE) -> CoverageSet:
    return CoverageSet(np.unique(patches.voxel[visible_patches(img, patches, acc, tol)]), universe)


def coverage_set(acc: RayAccelerator, svg: SurfaceVoxelGrid, pose: ViewPose, intrinsics: CameraIntrinsics,
                 patches: SurfacePatches | None = None, method: str = "patches") -> CoverageSet:
    """Surface voxels observed by the view's rendered depth image.

    "patches" counts a voxel when one of its on-surface representatives is
    consistent with the depth image; "points" counts the voxels that contain
    a back-projected hit point (sensitive to how pixel samples fall on
    voxels that the surface only grazes).
    """
    img = render_depth(acc, pose, intrinsics)
    if method == "points":
        return CoverageSet(voxels_of_points(svg, depth_to_points(img)), len(svg))
    if method != "patches":
        raise ValueError(f"unknown coverage method {method!r}")
    if patches is None:
        patches = surface_patches(acc.mesh, svg)
    return coverage_from_image(img, patches, len(svg), acc)
