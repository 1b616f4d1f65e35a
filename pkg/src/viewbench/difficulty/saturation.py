"""Saturation curves of jointly observable surface voxels and the difficulty scores derived from them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry.raycast import RayAccelerator
from ..geometry.voxel import SurfacePatches, SurfaceVoxelGrid, surface_patches
from ..objects import ObjectAssets, direction_key
from ..perception.cloud import coverage_set
from ..viewspace import DEFAULT_RADIUS, CameraIntrinsics, ViewSet, solve_tammes, view_pose
from .setcover import CoverageMatrix

DEFAULT_SCHEDULE = (2, 4, 8, 16, 32, 48, 64, 96, 128, 192, 256, 320, 384, 512)
SLOW_SATURATION_VIEWS = 128


class CoverageCache:
    """Memoized per-direction coverage sets for one object, resolution and camera model."""

    def __init__(self, acc: RayAccelerator, svg: SurfaceVoxelGrid, intrinsics: CameraIntrinsics,
                 radius: float = DEFAULT_RADIUS, patches: SurfacePatches | None = None):
        self.acc, self.svg, self.intrinsics, self.radius = acc, svg, intrinsics, radius
        self.patches = patches if patches is not None else surface_patches(acc.mesh, svg)
        self._sets: dict[bytes, np.ndarray] = {}

    @classmethod
    def for_object(cls, assets: ObjectAssets, r: float, intrinsics: CameraIntrinsics,
                   radius: float = DEFAULT_RADIUS) -> "CoverageCache":
        return cls(assets.accelerator, assets.surface_grid(r), intrinsics, radius, assets.patches(r))

    def __call__(self, direction) -> np.ndarray:
        key = direction_key(direction)
        if key not in self._sets:
            pose = view_pose(direction, self.radius)
            self._sets[key] = coverage_set(self.acc, self.svg, pose, self.intrinsics, self.patches).ids
        return self._sets[key]

    def union_size(self, views: ViewSet) -> int:
        seen = np.zeros(len(self.svg), dtype=bool)
        for d in views.directions:
            seen[self(d)] = True
        return int(seen.sum())


@dataclass(frozen=True)
class SaturationCurve:
    schedule: tuple[int, ...]
    raw: tuple[int, ...]
    envelope: tuple[int, ...]
    surface_size: int


def envelope_of(raw) -> tuple[int, ...]:
    return tuple(int(v) for v in np.maximum.accumulate(np.asarray(raw, dtype=np.int64))) if len(raw) else ()


def _check_schedule(schedule):
    s = list(schedule)
    if not s or any(b <= a for a, b in zip(s, s[1:])) or s[0] < 2:
        raise ValueError("schedule must be strictly increasing view counts >= 2")
    return tuple(int(v) for v in s)


def saturation_curve(cache: CoverageCache, schedule=DEFAULT_SCHEDULE, seed: int = 0) -> SaturationCurve:
    """Jointly observable voxel counts under Tammes sets of each scheduled size."""
    schedule = _check_schedule(schedule)
    raw = [cache.union_size(solve_tammes(n, seed, radius=cache.radius)) for n in schedule]
    return SaturationCurve(schedule, tuple(raw), envelope_of(raw), len(cache.svg))


def _stable_at(env, epsilon: float, window: int) -> int | None:
    run = 0
    for i in range(1, len(env)):
        prev = env[i - 1]
        gain = (env[i] - prev) / prev if prev > 0 else (0.0 if env[i] == 0 else np.inf)
        run = run + 1 if gain < epsilon else 0
        if run >= window:
            return i
    return None


def detect_saturation(curve: SaturationCurve, epsilon: float = 0.01, window: int = 2) -> tuple[int, int]:
    """(N_star, Y_sat): end of the first run of `window` transitions with relative gain < epsilon.

    Falls back to the last schedule point when the envelope never stabilizes.
    """
    env = curve.envelope
    if len(env) < window + 1:
        raise ValueError("curve too short for the stability window")
    i = _stable_at(env, epsilon, window)
    if i is None:
        i = len(env) - 1
    return curve.schedule[i], env[i]


def saturate(cache: CoverageCache, schedule=DEFAULT_SCHEDULE, seed: int = 0, epsilon: float = 0.01,
             window: int = 2) -> tuple[SaturationCurve, int, int]:
    """Like detect_saturation(saturation_curve(...)) but stops evaluating once the envelope is stable.

    The envelope is a running maximum, so the evaluated prefix and the answer match the full curve.
    """
    schedule = _check_schedule(schedule)
    if len(schedule) < window + 1:
        raise ValueError("curve too short for the stability window")
    raw = []
    for n in schedule:
        raw.append(cache.union_size(solve_tammes(n, seed, radius=cache.radius)))
        i = _stable_at(envelope_of(raw), epsilon, window)
        if i is not None:
            break
    curve = SaturationCurve(schedule[:len(raw)], tuple(raw), envelope_of(raw), len(cache.svg))
    return (curve, *detect_saturation(curve, epsilon, window))


def self_occlusion_ratio(y_sat: int, surface_size: int) -> float:
    if surface_size <= 0:
        raise ValueError("surface grid is empty")
    return min(1.0, y_sat / surface_size)


def build_coverage_matrix(cache: CoverageCache, views: ViewSet) -> CoverageMatrix:
    """Universe = union of the views' coverage sets, densely re-indexed; one row per view."""
    if len(views) == 0:
        raise ValueError("candidate set is empty")
    sets = [cache(d) for d in views.directions]
    uni = np.unique(np.concatenate(sets))
    if len(uni) == 0:
        raise ValueError("object is invisible from every candidate view")
    return CoverageMatrix(uni, tuple(np.searchsorted(uni, s) for s in sets))
