"""Three-state occupancy grid with voxel-walk carving and unknown-cell information gain."""
from __future__ import annotations

import numba as nb
import numpy as np

from ..viewspace import CameraIntrinsics, ViewPose, pixel_rays
from .depth import DepthImage

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
GRID_EXTENT = 1.2


@nb.njit(cache=True)
def _setup(n, lo, res, o, d, t_limit):
    """Entry cell, per-axis step, next-crossing and crossing-interval of a ray in the grid."""
    hi = lo + n * res
    t0 = 0.0
    t1 = t_limit
    for a in range(3):
        if d[a] != 0.0:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
        elif o[a] < lo or o[a] >= hi:
            t1 = -1.0
    cell = np.zeros(3, np.int64)
    step = np.zeros(3, np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    if not t0 < t1:
        return False, t0, t1, cell, step, tmax, tdelta
    for a in range(3):
        c = int(np.floor((o[a] + t0 * d[a] - lo) / res))
        cell[a] = min(max(c, 0), n - 1)
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (lo + (cell[a] + 1) * res - o[a]) / d[a]
            tdelta[a] = res / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (lo + cell[a] * res - o[a]) / d[a]
            tdelta[a] = -res / d[a]
    return True, t0, t1, cell, step, tmax, tdelta


@nb.njit(cache=True, inline="always")
def _advance(n, cell, step, tmax, tdelta):
    a = 0
    if tmax[1] < tmax[a]:
        a = 1
    if tmax[2] < tmax[a]:
        a = 2
    t = tmax[a]
    cell[a] += step[a]
    tmax[a] += tdelta[a]
    return t, 0 <= cell[a] < n


@nb.njit(cache=True)
def _carve(states, n, lo, res, origin, dirs, depths, far):
    for r in range(dirs.shape[0]):
        d = dirs[r]
        hit = np.isfinite(depths[r])
        t_end = depths[r] if hit else far
        hit_lin = -1
        if hit:
            inside = True
            lin = 0
            for a in range(3):
                c = int(np.floor((origin[a] + t_end * d[a] - lo) / res))
                if c < 0 or c >= n:
                    inside = False
                lin = lin * n + c
            if inside:
                hit_lin = lin
        ok, t0, t1, cell, step, tmax, tdelta = _setup(n, lo, res, origin, d, t_end)
        while ok:
            lin = (cell[0] * n + cell[1]) * n + cell[2]
            if lin != hit_lin and states[lin] == UNKNOWN:
                states[lin] = FREE
            t, ok = _advance(n, cell, step, tmax, tdelta)
            if t >= t1:
                break
        if hit_lin >= 0:
            states[hit_lin] = OCCUPIED


@nb.njit(cache=True)
def _gain(states, n, lo, res, origin, dirs, far):
    seen = np.zeros(states.shape[0], np.bool_)
    count = 0
    for r in range(dirs.shape[0]):
        ok, t0, t1, cell, step, tmax, tdelta = _setup(n, lo, res, origin, dirs[r], far)
        while ok:
            lin = (cell[0] * n + cell[1]) * n + cell[2]
            s = states[lin]
            if s == OCCUPIED:
                break
            if s == UNKNOWN and not seen[lin]:
                seen[lin] = True
                count += 1
            t, ok = _advance(n, cell, step, tmax, tdelta)
            if t >= t1:
                break
    return count


@nb.njit(cache=True)
def _first_occupied(states, n, lo, res, origin, dirs, far):
    out = np.full(dirs.shape[0], -1, np.int64)
    for r in range(dirs.shape[0]):
        ok, t0, t1, cell, step, tmax, tdelta = _setup(n, lo, res, origin, dirs[r], far)
        while ok:
            lin = (cell[0] * n + cell[1]) * n + cell[2]
            if states[lin] == OCCUPIED:
                out[r] = lin
                break
            t, ok = _advance(n, cell, step, tmax, tdelta)
            if t >= t1:
                break
    return out


class OccupancyGrid:
    """Cube [-1.2, 1.2]^3 split into ceil(2.4 / resolution)^3 cells, all unknown initially.

    States only move unknown -> free, unknown -> occupied or free -> occupied.
    """

    def __init__(self, resolution: float = 2 * GRID_EXTENT / 64):
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.lo = -GRID_EXTENT
        self.n = int(np.ceil(2 * GRID_EXTENT / resolution - 1e-9))
        self.states = np.zeros(self.n ** 3, dtype=np.uint8)

    @classmethod
    def with_cells(cls, n: int = 64) -> "OccupancyGrid":
        return cls(2 * GRID_EXTENT / n)

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid.__new__(OccupancyGrid)
        g.resolution, g.lo, g.n = self.resolution, self.lo, self.n
        g.states = self.states.copy()
        return g

    def counts(self) -> dict:
        c = np.bincount(self.states, minlength=3)
        return {"unknown": int(c[UNKNOWN]), "free": int(c[FREE]), "occupied": int(c[OCCUPIED])}

    def cube(self) -> np.ndarray:
        return self.states.reshape(self.n, self.n, self.n)

    def cell_centers(self, lin: np.ndarray) -> np.ndarray:
        idx = np.stack(np.unravel_index(lin, (self.n,) * 3), axis=1)
        return self.lo + (idx + 0.5) * self.resolution

    def frontier(self) -> np.ndarray:
        """Linear ids of occupied cells with at least one unknown face neighbour."""
        s = self.cube()
        unk = s == UNKNOWN
        near = np.zeros_like(unk)
        near[1:] |= unk[:-1]
        near[:-1] |= unk[1:]
        near[:, 1:] |= unk[:, :-1]
        near[:, :-1] |= unk[:, 1:]
        near[:, :, 1:] |= unk[:, :, :-1]
        near[:, :, :-1] |= unk[:, :, 1:]
        return np.flatnonzero(((s == OCCUPIED) & near).ravel())


def update_occupancy(grid: OccupancyGrid, img: DepthImage) -> OccupancyGrid:
    """Carve free space along every pixel ray and mark the hit cell occupied (in place)."""
    rays = pixel_rays(img.pose, img.intrinsics)
    depths = img.depths.ravel().astype(np.float64)
    _carve(grid.states, grid.n, grid.lo, grid.resolution, np.asarray(img.pose.position, np.float64),
           rays, depths, float(img.intrinsics.far))
    return grid


def information_gain(grid: OccupancyGrid, pose: ViewPose, intrinsics: CameraIntrinsics) -> int:
    """Distinct unknown cells seen by the view's rays before each ray meets an occupied cell."""
    rays = pixel_rays(pose, intrinsics)
    return int(_gain(grid.states, grid.n, grid.lo, grid.resolution,
                     np.asarray(pose.position, np.float64), rays, float(intrinsics.far)))


def first_occupied(grid: OccupancyGrid, pose: ViewPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    rays = pixel_rays(pose, intrinsics)
    return _first_occupied(grid.states, grid.n, grid.lo, grid.resolution,
                           np.asarray(pose.position, np.float64), rays, float(intrinsics.far))


def frontier_rows(grid: OccupancyGrid, poses: list[ViewPose], intrinsics: CameraIntrinsics) -> list[np.ndarray]:
    """Per pose, the frontier cells that are the first occupied cell along some pixel ray."""
    front = grid.frontier()
    rows = []
    for pose in poses:
        hits = first_occupied(grid, pose, intrinsics)
        hits = np.unique(hits[hits >= 0])
        rows.append(hits[np.isin(hits, front, assume_unique=True)])
    return rows
