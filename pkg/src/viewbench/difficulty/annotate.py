"""Per-object difficulty annotation records."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from ..objects import ObjectAssets
from ..viewspace import DEFAULT_RADIUS, CameraIntrinsics, solve_tammes
from .saturation import (DEFAULT_SCHEDULE, SLOW_SATURATION_VIEWS, CoverageCache, build_coverage_matrix, saturate,
                         self_occlusion_ratio)
from .setcover import solve_set_cover


@dataclass(frozen=True)
class DifficultyAnnotation:
    object_id: str
    r: float
    r_vis: float
    d_sat: int
    Y_sat: int
    S_gt: int
    d_plan: int
    d_plan_mode: str
    slow_saturation: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DifficultyAnnotation":
        return cls(**json.loads(line))


def is_slow(d_sat: int) -> bool:
    return d_sat > SLOW_SATURATION_VIEWS


def annotate_object(assets: ObjectAssets, r: float = 0.02, protocol_views: int = 128,
                    schedule=DEFAULT_SCHEDULE, seed: int = 0, intrinsics: CameraIntrinsics | None = None,
                    radius: float = DEFAULT_RADIUS, time_budget: float = 30.0,
                    epsilon: float = 0.01, window: int = 2) -> DifficultyAnnotation:
    intrinsics = intrinsics or CameraIntrinsics()
    svg = assets.surface_grid(r)
    cache = CoverageCache.for_object(assets, r, intrinsics, radius)
    _, n_star, y_sat = saturate(cache, schedule, seed, epsilon, window)
    matrix = build_coverage_matrix(cache, solve_tammes(protocol_views, seed, radius=radius))
    cover = solve_set_cover(matrix, "exact", time_budget)
    return DifficultyAnnotation(
        object_id=assets.object_id, r=r, r_vis=self_occlusion_ratio(y_sat, len(svg)), d_sat=n_star,
        Y_sat=y_sat, S_gt=len(svg), d_plan=cover.size,
        d_plan_mode="exact" if cover.certified_optimal else "greedy", slow_saturation=is_slow(n_star))
