"""Viewing-sphere candidate sets, camera poses, reachability masks and travel cost."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numba as nb
import numpy as np

DEFAULT_RADIUS = 2.5
TAMMES_RESTARTS = 8
TAMMES_ITERATIONS = 400


def cache_dir() -> Path:
    root = os.environ.get("VIEWBENCH_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "viewbench")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 256
    height: int = 256
    fov_deg: float = 50.0
    far: float = 5.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16")
        if not 10.0 <= self.fov_deg <= 120.0:
            raise ValueError("vertical field of view must lie in [10, 120] degrees")
        if not self.far > 0:
            raise ValueError("far range must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_deg) / 2.0)

    def camera_rays(self) -> np.ndarray:
        return _camera_rays(self.width, self.height, self.focal)


@lru_cache(maxsize=16)
def _camera_rays(width, height, focal):
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    x = (j + 0.5 - 0.5 * width) / focal
    y = (i + 0.5 - 0.5 * height) / focal
    d = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d.flags.writeable = False
    return d


@dataclass(frozen=True, eq=False)
class ViewSet:
    directions: np.ndarray
    radius: float = DEFAULT_RADIUS
    label: str = "custom"

    def __post_init__(self):
        d = np.ascontiguousarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if len(d) and np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
            raise ValueError("view directions must be unit vectors")
        d.flags.writeable = False
        object.__setattr__(self, "directions", d)

    def __len__(self):
        return len(self.directions)

    def positions(self) -> np.ndarray:
        return self.radius * self.directions

    def to_json(self) -> dict:
        return {"label": self.label, "radius": self.radius, "directions": self.directions.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "ViewSet":
        return cls(np.array(data["directions"], dtype=np.float64), float(data["radius"]), data["label"])


# ---------------------------------------------------------------------------
# Tammes

def min_angle(directions: np.ndarray) -> float:
    """Smallest pairwise angle in degrees."""
    d = np.asarray(directions)
    g = np.clip(d @ d.T, -1.0, 1.0)
    np.fill_diagonal(g, -1.0)
    return float(np.degrees(np.arccos(g.max())))


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@nb.njit(cache=True)
def _repel(x, iterations):
    n = x.shape[0]
    x = x.copy()
    force = np.empty((n, 3))
    for it in range(iterations):
        frac = it / max(1, iterations - 1)
        power = 8.0 + 72.0 * frac      # Riesz exponent grows toward the max-min limit
        step = 0.25 * (1.0 - frac) + 0.01
        dmin2 = np.inf
        for i in range(n):
            for j in range(i + 1, n):
                d2 = (x[i, 0] - x[j, 0]) ** 2 + (x[i, 1] - x[j, 1]) ** 2 + (x[i, 2] - x[j, 2]) ** 2
                dmin2 = min(dmin2, d2)
        dmin = np.sqrt(dmin2)
        half = 0.5 * (power + 2.0)
        force[:] = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                dx = x[i, 0] - x[j, 0]
                dy = x[i, 1] - x[j, 1]
                dz = x[i, 2] - x[j, 2]
                w = (dmin2 / (dx * dx + dy * dy + dz * dz)) ** half
                force[i, 0] += w * dx
                force[i, 1] += w * dy
                force[i, 2] += w * dz
                force[j, 0] -= w * dx
                force[j, 1] -= w * dy
                force[j, 2] -= w * dz
        mag = 0.0
        for i in range(n):
            radial = force[i, 0] * x[i, 0] + force[i, 1] * x[i, 1] + force[i, 2] * x[i, 2]
            for c in range(3):
                force[i, c] -= radial * x[i, c]
            mag = max(mag, np.sqrt(force[i, 0] ** 2 + force[i, 1] ** 2 + force[i, 2] ** 2))
        if mag == 0.0:
            break
        scale = step * dmin / mag
        for i in range(n):
            for c in range(3):
                x[i, c] += scale * force[i, c]
            nrm = np.sqrt(x[i, 0] ** 2 + x[i, 1] ** 2 + x[i, 2] ** 2)
            for c in range(3):
                x[i, c] /= nrm
    return x


def _sort_views(x: np.ndarray) -> np.ndarray:
    az = np.arctan2(x[:, 1], x[:, 0])
    order = np.lexsort((np.round(az, 12), np.round(x[:, 2], 12)))
    return x[order]


def _solve(n: int, seed: int, iterations: int) -> np.ndarray:
    if n == 2:
        return np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    rng = np.random.default_rng(seed)
    best, best_angle = None, -1.0
    for restart in range(TAMMES_RESTARTS):
        if restart == 0:
            x0 = fibonacci_sphere(n)
        else:
            x0 = rng.normal(size=(n, 3))
            x0 /= np.linalg.norm(x0, axis=1, keepdims=True)
        x = _repel(x0, iterations)
        a = min_angle(x)
        if a > best_angle:
            best, best_angle = x, a
    return _sort_views(best)


def solve_tammes(n: int, seed: int = 0, iterations: int = TAMMES_ITERATIONS,
                 radius: float = DEFAULT_RADIUS, use_cache: bool = True) -> ViewSet:
    """Approximately max-min-angle spread of n directions, sorted by (z, azimuth).

    Results are memoized on disk keyed by (n, seed, iterations).
    """
    if n < 2:
        raise ValueError("need at least 2 views")
    dirs = _cached_tammes(int(n), int(seed), int(iterations), use_cache)
    return ViewSet(dirs, float(radius), f"tammes-{n}")


@lru_cache(maxsize=64)
def _cached_tammes(n, seed, iterations, use_cache):
    path = cache_dir() / f"tammes-{n}-{seed}-{iterations}.json" if use_cache else None
    if path is not None and path.exists():
        return np.array(json.loads(path.read_text())["directions"], dtype=np.float64)
    dirs = _solve(n, seed, iterations)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if path is not None:
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"n": n, "seed": seed, "iterations": iterations,
                                   "directions": dirs.tolist()}))
        os.replace(tmp, path)
        # re-read so fresh and cached results are bit-identical
        dirs = np.array(json.loads(path.read_text())["directions"], dtype=np.float64)
    dirs.flags.writeable = False
    return dirs


# ---------------------------------------------------------------------------
# poses

@dataclass(frozen=True, eq=False)
class ViewPose:
    """Camera pose; rotation columns are the camera right, down and forward axes in world frame."""
    position: np.ndarray
    rotation: np.ndarray

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def up(self) -> np.ndarray:
        return -self.rotation[:, 1]

    def as_floats(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.position, self.rotation.ravel()])]

    @classmethod
    def from_floats(cls, values) -> "ViewPose":
        v = np.asarray(values, dtype=np.float64)
        return cls(v[:3].copy(), v[3:12].reshape(3, 3).copy())


def look_at_rotation(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    forward = -d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(forward @ ref) > 1.0 - 1e-9:
        ref = np.array([1.0, 0.0, 0.0])
    up = ref - (ref @ forward) * forward
    up /= np.linalg.norm(up)
    right = np.cross(forward, up)
    return np.stack([right, -up, forward], axis=1)


def view_pose(direction, radius: float = DEFAULT_RADIUS, intrinsics: CameraIntrinsics | None = None) -> ViewPose:
    """Camera on the sphere of `radius` looking at the origin, world +z as up."""
    if not radius > 1.0:
        raise ValueError("camera radius must exceed the unit object")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return ViewPose(radius * d, look_at_rotation(d))


def pixel_rays(pose: ViewPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """World-frame unit ray directions, row-major pixel order."""
    return np.ascontiguousarray(intrinsics.camera_rays() @ pose.rotation.T)


# ---------------------------------------------------------------------------
# reachability

@dataclass(frozen=True)
class ReachabilityMask:
    variant: str = "whole"
    indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.variant not in ("whole", "quarter", "explicit"):
            raise ValueError(f"unknown mask variant {self.variant!r}")

    def admits(self, views: ViewSet) -> np.ndarray:
        n = len(views)
        if self.variant == "whole":
            return np.ones(n, dtype=bool)
        if self.variant == "quarter":
            d = views.directions
            return (d[:, 2] >= -1e-12) & (d[:, 0] >= -1e-12)
        keep = np.zeros(n, dtype=bool)
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise IndexError("explicit mask index out of range")
        keep[idx] = True
        return keep

    def key(self) -> str:
        if self.variant == "explicit":
            return "explicit-" + "-".join(str(i) for i in sorted(set(self.indices)))
        return self.variant


class EmptyFeasibleSet(ValueError):
    pass


def apply_mask(views: ViewSet, mask: ReachabilityMask):
    """Feasible candidate indices (original order) and the corresponding sub-ViewSet."""
    idx = np.flatnonzero(mask.admits(views))
    if len(idx) == 0:
        raise EmptyFeasibleSet("no candidate view is reachable under this mask")
    return idx, ViewSet(views.directions[idx], views.radius, views.label)


# ---------------------------------------------------------------------------
# travel cost

def shell_distance_between(pa, pb) -> float:
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    ra, rb = np.linalg.norm(pa), np.linalg.norm(pb)
    if abs(ra - rb) > 1e-9 * max(ra, rb):
        raise ValueError("shell distance needs both poses on the same sphere")
    return float(shell_distance_matrix(np.stack([pa, pb]))[0, 1])


def shell_distance(a: ViewPose, b: ViewPose) -> float:
    """Chord length unless the chord passes within the unit sphere; then the great-circle arc."""
    return shell_distance_between(a.position, b.position)


def shell_distance_matrix(positions: np.ndarray, others: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(positions, dtype=np.float64)
    b = a if others is None else np.asarray(others, dtype=np.float64)
    diff = b[None, :, :] - a[:, None, :]
    chord2 = np.einsum("ijk,ijk->ij", diff, diff)
    chord = np.sqrt(chord2)
    # closest approach of segment a->b to the origin
    with np.errstate(invalid="ignore", divide="ignore"):
        t = -np.einsum("ik,ijk->ij", a, diff) / chord2
    t = np.where(chord2 > 0, np.clip(t, 0.0, 1.0), 0.0)
    closest = a[:, None, :] + t[..., None] * diff
    clearance = np.linalg.norm(closest, axis=-1)
    ra = np.linalg.norm(a, axis=1)[:, None]
    rb = np.linalg.norm(b, axis=1)[None, :]
    cosang = np.clip(np.einsum("ik,jk->ij", a, b) / (ra * rb), -1.0, 1.0)
    arc = 0.5 * (ra + rb) * np.arccos(cosang)
    out = np.where(clearance > 1.0, chord, arc)
    return np.where(chord2 > 0, out, 0.0)
