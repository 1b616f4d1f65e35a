"""First-hit ray queries against triangle meshes.

Two traversal paths share one intersection kernel and one tie rule
(smaller distance wins, equal distances go to the lower triangle id):
a BVH for arbitrary ray batches and a screen-space binned loop for
pinhole images, where every triangle is tested against exactly the
pixel rays inside its projected bounding box.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from .mesh import TriangleMesh

T_MIN = 1e-9
DET_EPS = 1e-15
LEAF_SIZE = 4


@nb.njit(cache=True, inline="always")
def _intersect(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    # Moller-Trumbore, double sided, edges inclusive
    px = dy * e2[k, 2] - dz * e2[k, 1]
    py = dz * e2[k, 0] - dx * e2[k, 2]
    pz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
    if abs(det) < DET_EPS:
        return np.inf
    inv = 1.0 / det
    sx = ox - v0[k, 0]
    sy = oy - v0[k, 1]
    sz = oz - v0[k, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1[k, 2] - sz * e1[k, 1]
    qy = sz * e1[k, 0] - sx * e1[k, 2]
    qz = sx * e1[k, 1] - sy * e1[k, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
    if t > T_MIN:
        return t
    return np.inf


@nb.njit(cache=True)
def _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, n):
    t0 = 0.0
    t1 = np.inf
    a = (bmin[n, 0] - ox) * ix
    b = (bmax[n, 0] - ox) * ix
    t0 = max(t0, min(a, b))
    t1 = min(t1, max(a, b))
    a = (bmin[n, 1] - oy) * iy
    b = (bmax[n, 1] - oy) * iy
    t0 = max(t0, min(a, b))
    t1 = min(t1, max(a, b))
    a = (bmin[n, 2] - oz) * iz
    b = (bmax[n, 2] - oz) * iz
    t0 = max(t0, min(a, b))
    t1 = min(t1, max(a, b))
    if t0 <= t1:
        return t0
    return np.inf


@nb.njit(cache=True)
def _bvh_trace(origins, dirs, v0, e1, e2, bmin, bmax, left, right, start, count, order):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_id = np.full(n, -1, np.int64)
    stack = np.empty(128, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else 1e300
        iy = 1.0 / dy if dy != 0.0 else 1e300
        iz = 1.0 / dz if dz != 0.0 else 1e300
        best = np.inf
        best_id = -1
        sp = 0
        if _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, 0) < np.inf:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if left[node] < 0:
                for s in range(start[node], start[node] + count[node]):
                    k = order[s]
                    t = _intersect(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                    if t < best or (t == best and t < np.inf and k < best_id):
                        best = t
                        best_id = k
                continue
            a = left[node]
            b = right[node]
            ta = _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, a)
            tb = _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, b)
            # push the farther child first; equal entry distances must still be visited
            hit_a = ta < np.inf and ta <= best
            hit_b = tb < np.inf and tb <= best
            if ta <= tb:
                if hit_b:
                    stack[sp] = b
                    sp += 1
                if hit_a:
                    stack[sp] = a
                    sp += 1
            else:
                if hit_a:
                    stack[sp] = a
                    sp += 1
                if hit_b:
                    stack[sp] = b
                    sp += 1
        out_t[r] = best
        out_id[r] = best_id
    return out_t, out_id


@nb.njit(cache=True)
def _binned_trace(position, rot, focal, width, height, dirs, tri_pts, v0, e1, e2):
    npx = width * height
    best = np.full(npx, np.inf)
    best_id = np.full(npx, -1, np.int64)
    ox, oy, oz = position[0], position[1], position[2]
    cx = 0.5 * width
    cy = 0.5 * height
    for k in range(tri_pts.shape[0]):
        umin = np.inf
        umax = -np.inf
        vmin = np.inf
        vmax = -np.inf
        behind = False
        for c in range(3):
            px = tri_pts[k, c, 0] - ox
            py = tri_pts[k, c, 1] - oy
            pz = tri_pts[k, c, 2] - oz
            xc = rot[0, 0] * px + rot[1, 0] * py + rot[2, 0] * pz
            yc = rot[0, 1] * px + rot[1, 1] * py + rot[2, 1] * pz
            zc = rot[0, 2] * px + rot[1, 2] * py + rot[2, 2] * pz
            if zc <= 1e-6:
                behind = True
                break
            u = focal * xc / zc + cx
            v = focal * yc / zc + cy
            umin = min(umin, u)
            umax = max(umax, u)
            vmin = min(vmin, v)
            vmax = max(vmax, v)
        if behind:
            j0, j1, i0, i1 = 0, width - 1, 0, height - 1
        else:
            # pixel j has its center at j + 0.5; one pixel of slack against rounding
            j0 = max(0, int(np.floor(umin - 0.5)) - 1)
            j1 = min(width - 1, int(np.ceil(umax - 0.5)) + 1)
            i0 = max(0, int(np.floor(vmin - 0.5)) - 1)
            i1 = min(height - 1, int(np.ceil(vmax - 0.5)) + 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                p = i * width + j
                t = _intersect(ox, oy, oz, dirs[p, 0], dirs[p, 1], dirs[p, 2], v0, e1, e2, k)
                if t < best[p]:
                    best[p] = t
                    best_id[p] = k
    return best, best_id


def _build_bvh(centroids, lo, hi):
    """Median-split BVH over triangle bounds, flattened into arrays."""
    nodes_min, nodes_max, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(centroids))

    def build(first, n):
        idx = len(left)
        ids = order[first:first + n]
        nodes_min.append(lo[ids].min(axis=0))
        nodes_max.append(hi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(first)
        count.append(n)
        if n <= LEAF_SIZE:
            return idx
        c = centroids[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[first:first + n] = ids[srt]
        half = n // 2
        a = build(first, half)
        b = build(first + half, n - half)
        left[idx], right[idx] = a, b
        count[idx] = 0
        return idx

    build(0, len(centroids))
    pad = 1e-9
    return (np.array(nodes_min) - pad, np.array(nodes_max) + pad, np.array(left, np.int64),
            np.array(right, np.int64), np.array(start, np.int64), np.array(count, np.int64), order)


class RayAccelerator:
    """BVH over a mesh's triangles; read-only after construction."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        pts = mesh.corners() if mesh.n_triangles else np.zeros((0, 3, 3))
        self.tri_pts = np.ascontiguousarray(pts)
        self.v0 = np.ascontiguousarray(pts[:, 0])
        self.e1 = np.ascontiguousarray(pts[:, 1] - pts[:, 0])
        self.e2 = np.ascontiguousarray(pts[:, 2] - pts[:, 0])
        if mesh.n_triangles:
            self._bvh = _build_bvh(pts.mean(axis=1), pts.min(axis=1), pts.max(axis=1))
        else:
            self._bvh = None
        for arr in (self.tri_pts, self.v0, self.e1, self.e2):
            arr.flags.writeable = False

    def intersect(self, origins, dirs):
        """Nearest hit distance (inf if none) and triangle id (-1) per ray."""
        origins = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        if self._bvh is None:
            return np.full(len(dirs), np.inf), np.full(len(dirs), -1, np.int64)
        return _bvh_trace(origins, dirs, self.v0, self.e1, self.e2, *self._bvh)

    def trace_pinhole(self, position, rotation, focal, width, height, dirs):
        """First hits of a pinhole image's pixel rays (all sharing one origin)."""
        if self.mesh.n_triangles == 0:
            n = width * height
            return np.full(n, np.inf), np.full(n, -1, np.int64)
        return _binned_trace(np.asarray(position, np.float64), np.asarray(rotation, np.float64),
                             float(focal), int(width), int(height), np.ascontiguousarray(dirs),
                             self.tri_pts, self.v0, self.e1, self.e2)


def ray_first_hit(acc: RayAccelerator, origin, direction):
    """(triangle id, hit point, distance) of the nearest hit beyond 1e-9, or None."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t, k = acc.intersect(origin[None], direction[None])
    if k[0] < 0:
        return None
    return int(k[0]), origin + t[0] * direction, float(t[0])
