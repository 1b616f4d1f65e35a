"""Surface voxelization and area-uniform surface sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .mesh import TriangleMesh

# relative slack on the closed cell test so that faces lying on a grid plane touch both neighbours
# despite rounding in the cell centers
_CONTACT_SLACK = 1e-9


@nb.njit(cache=True, inline="always")
def _axis_test(a0, a1, a2, v0, v1, v2, half):
    # separating-axis test for axis a against triangle (v*) and box (half extents)
    p0 = a0 * v0[0] + a1 * v0[1] + a2 * v0[2]
    p1 = a0 * v1[0] + a1 * v1[1] + a2 * v1[2]
    p2 = a0 * v2[0] + a1 * v2[1] + a2 * v2[2]
    rad = half * (abs(a0) + abs(a1) + abs(a2))
    lo = min(p0, min(p1, p2))
    hi = max(p0, max(p1, p2))
    return not (lo > rad or hi < -rad)


@nb.njit(cache=True)
def tri_box_overlap(center, half, tri):
    """Closed cube (center, half size) vs triangle (3x3) overlap."""
    v0 = tri[0] - center
    v1 = tri[1] - center
    v2 = tri[2] - center
    for ax in range(3):
        lo = min(v0[ax], min(v1[ax], v2[ax]))
        hi = max(v0[ax], max(v1[ax], v2[ax]))
        if lo > half or hi < -half:
            return False
    e0 = v1 - v0
    e1 = v2 - v1
    e2 = v0 - v2
    # nine edge cross axes
    for e in (e0, e1, e2):
        if not _axis_test(0.0, -e[2], e[1], v0, v1, v2, half):
            return False
        if not _axis_test(e[2], 0.0, -e[0], v0, v1, v2, half):
            return False
        if not _axis_test(-e[1], e[0], 0.0, v0, v1, v2, half):
            return False
    # triangle plane
    nx = e0[1] * e1[2] - e0[2] * e1[1]
    ny = e0[2] * e1[0] - e0[0] * e1[2]
    nz = e0[0] * e1[1] - e0[1] * e1[0]
    d = nx * v0[0] + ny * v0[1] + nz * v0[2]
    rad = half * (abs(nx) + abs(ny) + abs(nz))
    return abs(d) <= rad


@nb.njit(cache=True)
def _voxelize(tri_pts, origin, r, dims):
    out = []
    half = 0.5 * r * (1.0 + _CONTACT_SLACK)
    center = np.empty(3)
    for k in range(tri_pts.shape[0]):
        tri = tri_pts[k]
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        for ax in range(3):
            mn = min(tri[0, ax], min(tri[1, ax], tri[2, ax]))
            mx = max(tri[0, ax], max(tri[1, ax], tri[2, ax]))
            # closed cells: include neighbours whose faces touch the bounds
            lo[ax] = max(0, int(np.floor((mn - origin[ax]) / r)) - 1)
            hi[ax] = min(dims[ax] - 1, int(np.floor((mx - origin[ax]) / r)) + 1)
        for i in range(lo[0], hi[0] + 1):
            center[0] = origin[0] + (i + 0.5) * r
            for j in range(lo[1], hi[1] + 1):
                center[1] = origin[1] + (j + 0.5) * r
                for l in range(lo[2], hi[2] + 1):
                    center[2] = origin[2] + (l + 0.5) * r
                    if tri_box_overlap(center, half, tri):
                        out.append((i * dims[1] + j) * dims[2] + l)
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class SurfaceVoxelGrid:
    """Occupied surface cells of a regular grid.

    Cell (i, j, k) spans [origin + i*r, origin + (i+1)*r) per axis; `keys`
    holds the sorted linear indices of occupied cells, and a voxel's id is
    its position in `keys`.
    """
    resolution: float
    origin: np.ndarray
    dims: tuple[int, int, int]
    keys: np.ndarray

    def __len__(self):
        return len(self.keys)

    @property
    def occupied(self) -> np.ndarray:
        """(n, 3) integer index triples."""
        return np.stack(np.unravel_index(self.keys, self.dims), axis=1)

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Integer cell triple containing each point (half-open cells)."""
        return np.floor((np.asarray(points) - self.origin) / self.resolution).astype(np.int64)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Voxel id per point, -1 where the containing cell is not occupied."""
        idx = self.cell_of(points)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)
        lin = np.full(len(idx), -1, np.int64)
        if inside.any():
            lin_in = np.ravel_multi_index(idx[inside].T, self.dims)
            pos = np.searchsorted(self.keys, lin_in)
            pos_c = np.minimum(pos, len(self.keys) - 1)
            hit = (pos < len(self.keys)) & (self.keys[pos_c] == lin_in)
            lin[np.flatnonzero(inside)[hit]] = pos[hit]
        return lin


def default_grid(r: float):
    """Origin and dims of the grid covering [-1-r, 1+r]^3."""
    origin = np.full(3, -1.0 - r)
    n = int(np.ceil(2.0 * (1.0 + r) / r - 1e-9))
    return origin, (n, n, n)


def voxelize_surface(mesh: TriangleMesh, r: float, origin=None) -> SurfaceVoxelGrid:
    """All grid cells that intersect some triangle (closed triangle-box test).

    Without `origin` the grid spans [-1-r, 1+r]^3; an explicit origin gives
    the grid spanning [origin, -origin] per axis.
    """
    if not r > 0:
        raise ValueError("resolution must be positive")
    if origin is None:
        origin, dims = default_grid(r)
    else:
        origin = np.asarray(origin, dtype=np.float64)
        dims = tuple(int(np.ceil(-2.0 * o / r - 1e-9)) for o in origin)
        if min(dims) <= 0:
            raise ValueError("explicit origin must be negative on every axis")
    keys = _voxelize(np.ascontiguousarray(mesh.corners()), origin, float(r), np.array(dims, np.int64))
    keys = np.unique(keys)
    keys.flags.writeable = False
    return SurfaceVoxelGrid(float(r), origin, tuple(int(d) for d in dims), keys)


@dataclass(frozen=True, eq=False)
class SurfacePointCloud:
    points: np.ndarray
    source: str = "ground-truth-sample"

    def __len__(self):
        return len(self.points)


def sample_surface_points(mesh: TriangleMesh, count: int, seed: int = 0) -> SurfacePointCloud:
    """Area-uniform samples on the mesh surface; deterministic for a given seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u = rng.random(count)
    v = rng.random(count)
    su = np.sqrt(u)
    b0, b1, b2 = 1.0 - su, su * (1.0 - v), su * v
    c = mesh.corners()[tri]
    pts = b0[:, None] * c[:, 0] + b1[:, None] * c[:, 1] + b2[:, None] * c[:, 2]
    pts.flags.writeable = False
    return SurfacePointCloud(pts, "ground-truth-sample")


@nb.njit(cache=True)
def _clip_centroid(tri, lo, hi):
    """Area centroid of triangle clipped to the closed box [lo, hi]; vertex mean if the piece is degenerate."""
    poly = np.empty((12, 3))
    buf = np.empty((12, 3))
    m = 3
    poly[:3] = tri
    for ax in range(3):
        for side in range(2):
            bound = lo[ax] if side == 0 else hi[ax]
            sgn = 1.0 if side == 0 else -1.0
            k = 0
            for a in range(m):
                p = poly[a]
                q = poly[(a + 1) % m]
                dp = sgn * (p[ax] - bound)
                dq = sgn * (q[ax] - bound)
                if dp >= 0.0:
                    buf[k] = p
                    k += 1
                if (dp >= 0.0) != (dq >= 0.0):
                    s = dp / (dp - dq)
                    buf[k] = p + s * (q - p)
                    k += 1
            m = k
            poly[:m] = buf[:m]
            if m == 0:
                return poly[0], False
    total = 0.0
    acc = np.zeros(3)
    for a in range(1, m - 1):
        e1 = poly[a] - poly[0]
        e2 = poly[a + 1] - poly[0]
        cx = e1[1] * e2[2] - e1[2] * e2[1]
        cy = e1[2] * e2[0] - e1[0] * e2[2]
        cz = e1[0] * e2[1] - e1[1] * e2[0]
        w = np.sqrt(cx * cx + cy * cy + cz * cz)
        total += w
        acc += w * (poly[0] + poly[a] + poly[a + 1]) / 3.0
    if total > 1e-14:
        return acc / total, True
    mean = np.zeros(3)
    for a in range(m):
        mean += poly[a]
    return mean / m, True


@nb.njit(cache=True)
def _patches(tri_pts, origin, r, dims):
    out_key = []
    out_tri = []
    out_pts = []
    half = 0.5 * r * (1.0 + _CONTACT_SLACK)
    center = np.empty(3)
    lo_b = np.empty(3)
    hi_b = np.empty(3)
    for k in range(tri_pts.shape[0]):
        tri = tri_pts[k]
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        for ax in range(3):
            mn = min(tri[0, ax], min(tri[1, ax], tri[2, ax]))
            mx = max(tri[0, ax], max(tri[1, ax], tri[2, ax]))
            lo[ax] = max(0, int(np.floor((mn - origin[ax]) / r)) - 1)
            hi[ax] = min(dims[ax] - 1, int(np.floor((mx - origin[ax]) / r)) + 1)
        for i in range(lo[0], hi[0] + 1):
            center[0] = origin[0] + (i + 0.5) * r
            for j in range(lo[1], hi[1] + 1):
                center[1] = origin[1] + (j + 0.5) * r
                for l in range(lo[2], hi[2] + 1):
                    center[2] = origin[2] + (l + 0.5) * r
                    if tri_box_overlap(center, half, tri):
                        for ax in range(3):
                            lo_b[ax] = center[ax] - half
                            hi_b[ax] = center[ax] + half
                        c, ok = _clip_centroid(tri, lo_b, hi_b)
                        if ok:
                            out_key.append((i * dims[1] + j) * dims[2] + l)
                            out_tri.append(k)
                            out_pts.append((c[0], c[1], c[2]))
    return np.array(out_key, np.int64), np.array(out_tri, np.int64), np.array(out_pts)


@dataclass(frozen=True, eq=False)
class SurfacePatches:
    """One on-surface representative per (surface voxel, triangle) overlap.

    `points` are area centroids of the triangle pieces clipped to the voxel,
    `normals` the unit normals of their triangles and `voxel` the voxel ids.
    """
    points: np.ndarray
    normals: np.ndarray
    voxel: np.ndarray

    def __len__(self):
        return len(self.voxel)


def surface_patches(mesh: TriangleMesh, svg: SurfaceVoxelGrid) -> SurfacePatches:
    keys, tri, pts = _patches(np.ascontiguousarray(mesh.corners()), np.asarray(svg.origin, np.float64),
                              svg.resolution, np.array(svg.dims, np.int64))
    pts = pts.reshape(-1, 3)
    vid = np.searchsorted(svg.keys, keys)
    ok = (vid < len(svg.keys)) & (svg.keys[np.minimum(vid, len(svg.keys) - 1)] == keys)
    c = mesh.corners()[tri[ok]]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    order = np.lexsort((tri[ok], vid[ok]))
    return SurfacePatches(pts[ok][order], n[order], vid[ok][order])
