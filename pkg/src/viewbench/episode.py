"""Online hidden-geometry evaluation episodes: budgets, stopping, feasibility and per-step metrics."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .objects import ObjectAssets
from .perception.cloud import CoverageTracker, ObservedCloud, VoxelCounter, fuse_with_delta, surface_coverage  # noqa: F401
from .perception.depth import DepthImage, depth_to_points, render_depth
from .viewspace import (DEFAULT_RADIUS, CameraIntrinsics, EmptyFeasibleSet, ReachabilityMask, ViewPose, ViewSet,
                        cache_dir, shell_distance_between, solve_tammes, view_pose)

AUTOMATIC_CAP = 128
MS_GAIN = 0.01
MS_STEPS = 3
TIME_BINS = ((0.1, "<0.1"), (0.5, "0.1-0.5"), (1.0, "0.5-1"), (3.0, "1-3"), (5.0, "3-5"), (np.inf, ">5"))
TERMINATIONS = ("budget", "native-stop", "ms-stop", "cap", "no-valid-view")


class EpisodeError(Exception):
    code = "episode_error"


class InfeasibleView(EpisodeError):
    code = "infeasible_view"


class DuplicateView(EpisodeError):
    code = "duplicate_view"


class EpisodeDone(EpisodeError):
    code = "episode_done"


class EpisodeRunning(EpisodeError):
    code = "episode_running"


class ViewIndexError(EpisodeError, IndexError):
    code = "index_out_of_range"


@dataclass(frozen=True)
class Budget:
    mode: str = "fixed"
    k: int = 30
    cap: int = AUTOMATIC_CAP
    ms_delta: float = 0.02

    def __post_init__(self):
        if self.mode not in ("fixed", "automatic"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.mode == "fixed" and self.k < 1:
            raise ValueError("fixed budget needs K >= 1")
        if self.cap < 1 or self.ms_delta <= 0:
            raise ValueError("cap and MS resolution must be positive")

    @property
    def limit(self) -> int:
        return self.k if self.mode == "fixed" else self.cap


@dataclass(frozen=True)
class ProtocolConfig:
    budget: Budget = Budget()
    mask: ReachabilityMask = ReachabilityMask()
    candidates: int = 128
    candidate_seed: int = 0
    tau: float = 0.02
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    radius: float = DEFAULT_RADIUS
    seed: int = 0
    map_stabilization: bool = True
    reference_views: int = 360
    dedup: float = 0.005
    occupancy_cells: int = 64

    def __post_init__(self):
        if self.candidates < 2 or self.reference_views < 2:
            raise ValueError("candidate and reference sets need at least 2 views")
        if not self.tau > 0 or not self.dedup > 0:
            raise ValueError("tau and dedup resolution must be positive")
        if not self.radius > 1:
            raise ValueError("camera radius must exceed the unit object")

    def candidate_set(self) -> ViewSet:
        return solve_tammes(self.candidates, self.candidate_seed, radius=self.radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = {"variant": self.mask.variant, "indices": list(self.mask.indices)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        d = dict(d)
        if "budget" in d:
            d["budget"] = Budget(**d["budget"])
        if "mask" in d:
            m = d["mask"]
            d["mask"] = ReachabilityMask(m["variant"], tuple(m.get("indices", ())))
        if "intrinsics" in d:
            d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        return cls(**d)


@dataclass(frozen=True)
class StepRecord:
    step: int
    view: int
    sc: float
    nsc: float
    path_increment: float
    time: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.view), repr(self.sc), repr(self.nsc),
                repr(self.path_increment), repr(self.time)]


TRACE_HEADER = ["step", "view", "sc", "nsc", "path_increment", "time"]


@dataclass(frozen=True)
class MetricsReport:
    object_id: str
    nsc: float
    sc: float
    views: int
    selected: int
    path_cost: float
    planning_time: float
    time_bin: str
    termination: str
    sc_ref: float

    def to_dict(self) -> dict:
        return asdict(self)


def time_bin(seconds: float) -> str:
    for hi, label in TIME_BINS:
        if seconds < hi:
            return label
    return TIME_BINS[-1][1]


def nsc(sc: float, sc_ref: float) -> float:
    if not sc_ref > 0:
        raise ValueError("reference coverage is zero; the object is invisible under this mask")
    return min(sc / sc_ref, 1.0)


def ms_should_stop(counts, gain: float = MS_GAIN, steps: int = MS_STEPS) -> bool:
    """True iff the last `steps` relative count gains are all below `gain`."""
    c = list(counts)
    if len(c) < steps + 1:
        return False
    return all((c[t] - c[t - 1]) / max(c[t - 1], 1) < gain for t in range(len(c) - steps, len(c)))


# ---------------------------------------------------------------------------
# reference coverage

def reference_views(config: ProtocolConfig) -> ViewSet:
    """Dense reference set under the episode's reachability rule.

    Explicit index masks refer to the candidate set, so their reference is
    the allowed candidate views themselves.
    """
    if config.mask.variant == "explicit":
        cand = config.candidate_set()
        idx = np.flatnonzero(config.mask.admits(cand))
        if len(idx) == 0:
            raise EmptyFeasibleSet("no candidate view is reachable under this mask")
        return ViewSet(cand.directions[idx], cand.radius, cand.label)
    dense = solve_tammes(config.reference_views, config.candidate_seed, radius=config.radius)
    keep = config.mask.admits(dense)
    if not keep.any():
        raise EmptyFeasibleSet("no reference view is reachable under this mask")
    return ViewSet(dense.directions[keep], dense.radius, dense.label)


def _reference_key(assets: ObjectAssets, config: ProtocolConfig) -> str:
    intr = config.intrinsics
    parts = [assets.fingerprint, config.mask.key(), repr(config.tau), f"{intr.width}x{intr.height}",
             repr(intr.fov_deg), repr(intr.far), repr(config.radius), str(config.reference_views),
             str(config.candidate_seed), repr(config.dedup), str(len(assets.gt_points))]
    return "-".join(parts).replace("/", "_")


def compute_reference(assets: ObjectAssets, config: ProtocolConfig, use_cache: bool = True) -> float:
    """SC@tau of the cloud fused from every reachable dense reference view (disk-cached)."""
    path = cache_dir() / "refs" / f"{_reference_key(assets, config)}.json"
    if use_cache and path.exists():
        return float(json.loads(path.read_text())["sc_ref"])
    views = reference_views(config)
    cloud = ObservedCloud.empty(config.dedup)
    tracker = CoverageTracker(assets.gt_points, config.tau)
    for d in views.directions:
        img = render_depth(assets.accelerator, view_pose(d, config.radius), config.intrinsics)
        cloud, added = fuse_with_delta(cloud, depth_to_points(img))
        tracker.update(added)
    value = tracker.value
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"sc_ref": value, "views": len(views)}))
        os.replace(tmp, path)
    return value


# ---------------------------------------------------------------------------
# episodes

@dataclass(eq=False)
class EpisodeState:
    object_id: str
    config: ProtocolConfig
    candidates: ViewSet
    feasible: np.ndarray
    sc_ref: float
    assets: ObjectAssets = field(repr=False)
    visited: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    records: list = field(default_factory=list)
    ms_history: list = field(default_factory=list)
    path_cost: float = 0.0
    planning_time: float = 0.0
    status: str = "running"
    reason: str | None = None
    cloud: ObservedCloud | None = None
    tracker: CoverageTracker | None = None
    counter: VoxelCounter | None = None
    last_image: DepthImage | None = None

    @property
    def selected(self) -> int:
        return max(0, len(self.visited) - 1)

    @property
    def running(self) -> bool:
        return self.status == "running"

    @property
    def feasible_indices(self) -> list[int]:
        return np.flatnonzero(self.feasible).tolist()

    def unvisited_feasible(self) -> list[int]:
        seen = set(self.visited)
        return [i for i in self.feasible_indices if i not in seen]

    def trace_csv(self) -> str:
        return trace_csv(self.records)


def trace_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_trace(text: str) -> list[StepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != TRACE_HEADER:
        raise ValueError("not an episode trace")
    return [StepRecord(int(a), int(b), float(c), float(d), float(e), float(f)) for a, b, c, d, e, f in rows[1:]]


def check_feasible(state_or_config, index: int) -> bool:
    """Mask membership of a candidate index; pure."""
    if isinstance(state_or_config, EpisodeState):
        feasible = state_or_config.feasible
    else:
        feasible = state_or_config.mask.admits(state_or_config.candidate_set())
    if not 0 <= index < len(feasible):
        raise ViewIndexError(f"view index {index} outside [0, {len(feasible)})")
    return bool(feasible[index])


def _observe(state: EpisodeState, index: int, planner_time: float) -> StepRecord:
    cfg = state.config
    pose = view_pose(state.candidates.directions[index], cfg.radius)
    img = render_depth(state.assets.accelerator, pose, cfg.intrinsics)
    pts = depth_to_points(img)
    state.cloud, added = fuse_with_delta(state.cloud, pts)
    sc = state.tracker.update(added)
    state.ms_history.append(state.counter.add(pts))
    inc = shell_distance_between(state.poses[-1].position, pose.position) if state.poses else 0.0
    state.visited.append(int(index))
    state.poses.append(pose)
    state.path_cost += inc
    state.planning_time += planner_time
    state.last_image = img
    rec = StepRecord(len(state.records), int(index), sc, nsc(sc, state.sc_ref), inc, float(planner_time))
    state.records.append(rec)
    return rec


def start_episode(object_id: str, assets: ObjectAssets, config: ProtocolConfig,
                  sc_ref: float | None = None) -> EpisodeState:
    """Create the episode and execute the standardized initial observation (max-z feasible view)."""
    candidates = config.candidate_set()
    feasible = config.mask.admits(candidates)
    if not feasible.any():
        raise EmptyFeasibleSet("no candidate view is reachable under this mask")
    if sc_ref is None:
        sc_ref = compute_reference(assets, config)
    state = EpisodeState(object_id, config, candidates, feasible, sc_ref, assets,
                         cloud=ObservedCloud.empty(config.dedup),
                         tracker=CoverageTracker(assets.gt_points, config.tau),
                         counter=VoxelCounter(config.budget.ms_delta))
    idx = np.flatnonzero(feasible)
    first = int(idx[np.argmax(candidates.directions[idx, 2])])
    _observe(state, first, 0.0)
    return state


def execute_step(state: EpisodeState, index: int, planner_time: float = 0.0) -> tuple[EpisodeState, StepRecord]:
    """Observe one algorithm-selected view, then apply the budget and stopping rules."""
    if not state.running:
        raise EpisodeDone(f"episode finished ({state.reason})")
    if not check_feasible(state, index):
        raise InfeasibleView(f"view {index} is not reachable")
    if index in state.visited:
        raise DuplicateView(f"view {index} was already observed")
    rec = _observe(state, index, planner_time)
    budget = state.config.budget
    if budget.mode == "fixed":
        if state.selected >= budget.k:
            _finish(state, "budget")
    elif state.selected >= budget.cap:
        _finish(state, "cap")
    elif state.config.map_stabilization and ms_should_stop(state.ms_history):
        _finish(state, "ms-stop")
    return state, rec


def _finish(state: EpisodeState, reason: str):
    state.status = "done"
    state.reason = reason


def stop_episode(state: EpisodeState, reason: str = "native-stop") -> EpisodeState:
    if reason not in ("native-stop", "no-valid-view"):
        raise ValueError("planners may only stop natively or for lack of a valid view")
    if not state.running:
        raise EpisodeDone(f"episode finished ({state.reason})")
    _finish(state, reason)
    return state


def report_from_records(object_id: str, records, sc_ref: float, termination: str) -> MetricsReport:
    last = records[-1]
    total = float(sum(r.time for r in records))
    return MetricsReport(object_id, last.nsc, last.sc, len(records), len(records) - 1,
                         float(sum(r.path_increment for r in records)), total, time_bin(total),
                         termination, sc_ref)


def finalize(state: EpisodeState) -> MetricsReport:
    if state.running:
        raise EpisodeRunning("metrics are withheld until the episode terminates")
    rep = report_from_records(state.object_id, state.records, state.sc_ref, state.reason)
    return replace(rep, path_cost=state.path_cost, planning_time=state.planning_time,
                   time_bin=time_bin(state.planning_time))
