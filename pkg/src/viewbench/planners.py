"""Classical and oracle view planners behind one contract, plus the episode runner."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .difficulty.saturation import CoverageCache, build_coverage_matrix
from .difficulty.setcover import CoverageMatrix, InfeasibleCover, greedy_cover
from .episode import (DuplicateView, EpisodeDone, EpisodeState, InfeasibleView, MetricsReport, ProtocolConfig,
                      execute_step, finalize, start_episode, stop_episode)
from .perception.cloud import ObservedCloud, fuse
from .perception.depth import DepthImage, depth_to_points
from .perception.occupancy import OccupancyGrid, frontier_rows, information_gain, update_occupancy
from .viewspace import CameraIntrinsics, ViewPose, ViewSet, shell_distance_matrix, view_pose

MODES = ("iterative", "budgeted-plan", "set-cover-plan")
POLICIES = ("next-best", "terminate")
PLANNER_INTRINSICS = CameraIntrinsics(32, 32)


class NoValidView(Exception):
    pass


# ---------------------------------------------------------------------------
# path ordering

def path_length(positions: np.ndarray, start: np.ndarray, order) -> float:
    pts = np.vstack([start[None], positions[list(order)]])
    return float(sum(shell_distance_matrix(pts[i:i + 1], pts[i + 1:i + 2])[0, 0] for i in range(len(pts) - 1)))


def _two_opt(tour: list[int], dist: np.ndarray) -> bool:
    n = len(tour) - 1
    improved = False
    for i in range(1, n):
        for j in range(i + 1, n + 1):
            a, b, c = tour[i - 1], tour[i], tour[j]
            before, after = dist[a, b], dist[a, c]
            if j < n:
                d = tour[j + 1]
                before += dist[c, d]
                after += dist[b, d]
            if after < before - 1e-12:
                tour[i:j + 1] = tour[i:j + 1][::-1]
                improved = True
    return improved


def _or_opt(tour: list[int], dist: np.ndarray, max_len: int = 3) -> bool:
    """Relocate one segment of up to `max_len` stops (either direction) if that shortens the path."""
    for length in range(1, max_len + 1):
        for i in range(1, len(tour) - length + 1):
            j = i + length - 1
            seg = tour[i:j + 1]
            p = tour[i - 1]
            q = tour[j + 1] if j + 1 < len(tour) else None
            removed = dist[p, seg[0]] + (dist[seg[-1], q] - dist[p, q] if q is not None else 0.0)
            rest = tour[:i] + tour[j + 1:]
            for k in range(len(rest)):
                if k == i - 1:
                    continue
                a = rest[k]
                b = rest[k + 1] if k + 1 < len(rest) else None
                for part in (seg, seg[::-1]):
                    added = dist[a, part[0]] + (dist[part[-1], b] - dist[a, b] if b is not None else 0.0)
                    if added < removed - 1e-12:
                        tour[:] = rest[:k + 1] + part + rest[k + 1:]
                        return True
    return False


def tsp_order(positions: np.ndarray, start: np.ndarray) -> list[int]:
    """Open path from a fixed start: nearest neighbour, then 2-opt and segment relocation until
    neither improves."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    if n <= 1:
        return list(range(n))
    pts = np.vstack([np.asarray(start, np.float64)[None], pos])
    dist = shell_distance_matrix(pts)
    tour = [0]
    left = set(range(1, n + 1))
    while left:
        cur = tour[-1]
        nxt = min(left, key=lambda j: (dist[cur, j], j))
        tour.append(nxt)
        left.remove(nxt)
    while _two_opt(tour, dist) or _or_opt(tour, dist):
        pass
    return [k - 1 for k in tour[1:]]


# ---------------------------------------------------------------------------
# selection rules

def plan_random_tsp(feasible, k: int, seed: int, start: ViewPose, candidates: ViewSet) -> list[int]:
    pool = np.asarray(sorted(feasible), dtype=np.int64)
    if k > len(pool):
        warnings.warn(f"budget {k} exceeds the {len(pool)} feasible views; clamping", stacklevel=2)
        k = len(pool)
    if k <= 0:
        return []
    rng = np.random.default_rng(seed)
    pick = rng.choice(pool, size=k, replace=False)
    order = tsp_order(candidates.positions()[pick], start.position)
    return [int(pick[i]) for i in order]


def rank_infogain(grid: OccupancyGrid, candidates: ViewSet, options, current: ViewPose, lam: float,
                  intrinsics: CameraIntrinsics = PLANNER_INTRINSICS) -> list[int]:
    """Options ranked by gain * exp(-lam * shell distance), best first, lowest index on ties."""
    options = sorted(options)
    if not options:
        raise NoValidView("no unvisited feasible candidate")
    dist = shell_distance_matrix(np.asarray(current.position)[None], candidates.positions()[options])[0]
    util = []
    for i, d in zip(options, dist):
        if math.isinf(lam):
            util.append(-d)
            continue
        gain = information_gain(grid, view_pose(candidates.directions[i], candidates.radius), intrinsics)
        util.append(float(gain) if lam == 0 else gain * math.exp(-lam * d))
    return [options[i] for i in sorted(range(len(options)), key=lambda i: (-util[i], options[i]))]


def next_view_infogain(grid: OccupancyGrid, candidates: ViewSet, options, current: ViewPose, lam: float,
                       intrinsics: CameraIntrinsics = PLANNER_INTRINSICS) -> int:
    return rank_infogain(grid, candidates, options, current, lam, intrinsics)[0]


def rank_oracle(row_bits, covered: int, options) -> list[int]:
    """Options ranked by additional ground-truth coverage, best first, lowest index on ties."""
    options = sorted(options)
    if not options:
        raise NoValidView("no unvisited feasible candidate")
    gains = [(row_bits[i] & ~covered).bit_count() for i in options]
    return [options[i] for i in sorted(range(len(options)), key=lambda i: (-gains[i], options[i]))]


def next_view_oracle(row_bits, covered: int, options) -> int:
    return rank_oracle(row_bits, covered, options)[0]


def greedy_max_coverage(row_bits: dict, k: int) -> list[int]:
    covered = 0
    chosen = []
    keys = sorted(row_bits)
    while len(chosen) < k:
        best, best_gain = -1, 0
        for i in keys:
            if i in chosen:
                continue
            g = (row_bits[i] & ~covered).bit_count()
            if g > best_gain:
                best, best_gain = i, g
        if best < 0:
            break
        chosen.append(best)
        covered |= row_bits[best]
    return chosen


def farthest_fill(directions: np.ndarray, chosen: list[int], anchors: list[int], options, k: int) -> list[int]:
    """Extend `chosen` to k views, each time adding the option farthest (max-min angle) from all picks."""
    chosen = list(chosen)
    pool = [i for i in sorted(options) if i not in chosen]
    while len(chosen) < k and pool:
        ref = chosen + [a for a in anchors if a not in chosen]
        if ref:
            cos = np.clip(directions[pool] @ directions[ref].T, -1.0, 1.0)
            score = np.arccos(cos).min(axis=1)
            pick = pool[int(np.argmax(score))]
        else:
            pick = pool[0]
        chosen.append(pick)
        pool.remove(pick)
    return chosen


def plan_set_cover(row_bits: dict, start: ViewPose, candidates: ViewSet) -> list[int]:
    """Greedy cover of the union of the given rows, TSP-ordered."""
    keys = sorted(row_bits)
    target = 0
    for i in keys:
        target |= row_bits[i]
    if target == 0:
        raise InfeasibleCover("nothing left to cover from the feasible views")
    picks = [keys[j] for j in greedy_cover([row_bits[i] for i in keys], target)]
    order = tsp_order(candidates.positions()[picks], start.position)
    return [picks[i] for i in order]


def plan_max_coverage(row_bits: dict, k: int, start: ViewPose, candidates: ViewSet, anchors=()) -> list[int]:
    """Greedy max coverage up to k views, farthest-point fill once nothing is left to cover, TSP-ordered."""
    if k < 1:
        raise ValueError("K must be >= 1")
    picks = greedy_max_coverage(row_bits, k)
    picks = farthest_fill(candidates.directions, picks, list(anchors), row_bits.keys(), k)
    order = tsp_order(candidates.positions()[picks], start.position)
    return [picks[i] for i in order]


def adapt_feasibility(policy: str, error: Exception | None) -> str:
    """Recovery for a rejected or missing proposal: 'retry' the next-ranked view or 'terminate'."""
    if policy not in POLICIES:
        raise ValueError(f"unknown feasibility policy {policy!r}")
    if error is None or isinstance(error, NoValidView):
        return "terminate"
    if isinstance(error, (InfeasibleView, DuplicateView)):
        return "retry" if policy == "next-best" else "terminate"
    raise error


# ---------------------------------------------------------------------------
# planner-side view of an episode

class Handle:
    """What a planner may see: candidates, feasibility queries, and its own map built from depth images."""

    candidates: ViewSet
    feasible_indices: list

    def __init__(self, track_grid: bool = False, cells: int = 64):
        self.visited: list[int] = []
        self.images: list[DepthImage] = []
        self.cloud = ObservedCloud.empty()
        self.grid = OccupancyGrid.with_cells(cells) if track_grid else None
        self.status = "running"
        self.reason = None

    def _ingest(self, view: int, img: DepthImage):
        self.visited.append(view)
        self.images.append(img)
        self.cloud = fuse(self.cloud, depth_to_points(img))
        if self.grid is not None:
            update_occupancy(self.grid, img)

    @property
    def current_pose(self) -> ViewPose:
        return self.images[-1].pose

    @property
    def running(self) -> bool:
        return self.status == "running"

    def unvisited_feasible(self) -> list[int]:
        seen = set(self.visited)
        return [i for i in self.feasible_indices if i not in seen]


class LocalHandle(Handle):
    def __init__(self, state: EpisodeState, track_grid: bool = False):
        super().__init__(track_grid, state.config.occupancy_cells)
        self.state = state
        self.candidates = state.candidates
        self.feasible_indices = state.feasible_indices
        self._ingest(state.visited[0], state.last_image)

    def is_feasible(self, index: int) -> bool:
        from .episode import check_feasible
        return check_feasible(self.state, index)

    def observe(self, index: int, planner_time: float):
        _, rec = execute_step(self.state, index, planner_time)
        self._ingest(index, self.state.last_image)
        self.status, self.reason = self.state.status, self.state.reason
        return rec

    def stop(self, reason: str):
        stop_episode(self.state, reason)
        self.status, self.reason = self.state.status, self.state.reason

    def report(self) -> MetricsReport:
        return finalize(self.state)

    @property
    def records(self):
        return list(self.state.records)


# ---------------------------------------------------------------------------
# planners

@dataclass
class PlannerSpec:
    name: str
    kind: str
    lam: float = 0.25
    k: int | None = None
    policy: str = "next-best"
    source: str = "oracle"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PLANNERS:
            raise ValueError(f"unknown planner kind {self.kind!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown feasibility policy {self.policy!r}")
        if self.source not in ("oracle", "estimated"):
            raise ValueError(f"unknown coverage source {self.source!r}")


class Planner:
    mode = "iterative"
    needs_grid = False
    needs_oracle = False

    def __init__(self, spec: PlannerSpec):
        self.spec = spec
        self.oracle: CoverageMatrix | None = None
        self._bits = None

    def begin(self, handle: Handle, budget: int, oracle: CoverageMatrix | None = None):
        self.budget = budget
        self.oracle = oracle
        if oracle is not None:
            self._bits = oracle.bitsets()
        elif self.needs_oracle:
            raise ValueError(f"planner {self.spec.name!r} needs ground-truth coverage rows")

    def options(self, handle: Handle) -> list[int]:
        return handle.unvisited_feasible()

    def rank(self, handle: Handle) -> list[int]:
        raise NotImplementedError

    def plan(self, handle: Handle) -> list[int]:
        raise NotImplementedError

    def _source_rows(self, handle: Handle, options) -> dict:
        if self.spec.source == "oracle":
            if self._bits is None:
                raise ValueError("oracle coverage source needs ground-truth coverage rows")
            covered = 0
            for v in handle.visited:
                covered |= self._bits[v]
            return {i: self._bits[i] & ~covered for i in options}
        poses = [view_pose(handle.candidates.directions[i], handle.candidates.radius) for i in options]
        rows = frontier_rows(handle.grid, poses, PLANNER_INTRINSICS)
        out = {}
        for i, row in zip(options, rows):
            bits = np.zeros(handle.grid.n ** 3, dtype=bool)
            bits[row] = True
            out[i] = int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")
        return out


class InfoGainPlanner(Planner):
    needs_grid = True

    def rank(self, handle):
        return rank_infogain(handle.grid, handle.candidates, self.options(handle), handle.current_pose,
                             self.spec.lam)


class OracleGreedyPlanner(Planner):
    needs_oracle = True

    def rank(self, handle):
        covered = 0
        for v in handle.visited:
            covered |= self._bits[v]
        return rank_oracle(self._bits, covered, self.options(handle))


class RandomTSPPlanner(Planner):
    mode = "budgeted-plan"

    def plan(self, handle):
        k = self.spec.k or self.budget
        return plan_random_tsp(self.options(handle), min(k, self.budget), self.spec.seed, handle.current_pose,
                               handle.candidates)


class SetCoverPlanner(Planner):
    mode = "set-cover-plan"

    @property
    def needs_grid(self):
        return self.spec.source == "estimated"

    def plan(self, handle):
        return plan_set_cover(self._source_rows(handle, self.options(handle)), handle.current_pose,
                              handle.candidates)


class MaxCoveragePlanner(Planner):
    mode = "budgeted-plan"

    @property
    def needs_grid(self):
        return self.spec.source == "estimated"

    def plan(self, handle):
        k = min(self.spec.k or self.budget, self.budget, len(self.options(handle)))
        if k < 1:
            return []
        return plan_max_coverage(self._source_rows(handle, self.options(handle)), k, handle.current_pose,
                                 handle.candidates, anchors=handle.visited)


PLANNERS = {
    "rse": InfoGainPlanner,
    "oracle": OracleGreedyPlanner,
    "random_tsp": RandomTSPPlanner,
    "scp": SetCoverPlanner,
    "mcp": MaxCoveragePlanner,
}


def make_planner(spec: PlannerSpec) -> Planner:
    planner = PLANNERS[spec.kind](spec)
    if spec.kind == "oracle" or (spec.kind in ("scp", "mcp") and spec.source == "oracle"):
        planner.needs_oracle = True
    return planner


# ---------------------------------------------------------------------------
# runner

class Clock:
    """Planner time source; 'off' reports zero so traces are reproducible byte for byte."""

    def __init__(self, mode: str = "wall"):
        if mode not in ("wall", "off"):
            raise ValueError("timing must be 'wall' or 'off'")
        self.mode = mode

    def measure(self, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        return out, (time.perf_counter() - t0 if self.mode == "wall" else 0.0)


def _try(handle: Handle, view: int, seconds: float):
    try:
        handle.observe(view, seconds)
        return None
    except (InfeasibleView, DuplicateView) as exc:
        return exc


def drive(handle: Handle, planner: Planner, budget: int, clock: Clock, oracle: CoverageMatrix | None = None):
    """Run a planner against an episode handle until the episode terminates."""
    planner.begin(handle, budget, oracle)
    if planner.mode == "iterative":
        while handle.running:
            try:
                ranking, seconds = clock.measure(planner.rank, handle)
            except NoValidView:
                handle.stop("no-valid-view")
                break
            if not ranking:
                handle.stop("no-valid-view")
                break
            for pos, view in enumerate(ranking):
                err = _try(handle, view, seconds if pos == 0 else 0.0)
                if err is None:
                    break
                if adapt_feasibility(planner.spec.policy, err) == "terminate":
                    handle.stop("no-valid-view")
                    break
            else:
                handle.stop("no-valid-view")
        return
    try:
        plan, seconds = clock.measure(planner.plan, handle)
    except InfeasibleCover:
        plan, seconds = [], 0.0
    if not plan:
        handle.stop("no-valid-view" if not handle.unvisited_feasible() else "native-stop")
        return
    first = True
    for view in plan:
        if not handle.running:
            return
        err = _try(handle, view, seconds if first else 0.0)
        if err is None:
            first = False
            continue
        if adapt_feasibility(planner.spec.policy, err) == "terminate":
            handle.stop("no-valid-view")
            return
    if handle.running:
        handle.stop("native-stop")


def episode_config_for(planner: Planner, config: ProtocolConfig) -> ProtocolConfig:
    """Map stabilization only governs iterative planners without a native stop."""
    from dataclasses import replace
    if config.budget.mode == "automatic" and planner.mode != "iterative":
        return replace(config, map_stabilization=False)
    return config


_ORACLES: dict = {}


def oracle_matrix(assets, config: ProtocolConfig, r: float = 0.02) -> CoverageMatrix:
    """Ground-truth coverage rows for every candidate view, row i = candidate i (memoized)."""
    intr = config.intrinsics
    key = (assets.fingerprint, r, config.candidates, config.candidate_seed, config.radius,
           intr.width, intr.height, intr.fov_deg, intr.far)
    if key not in _ORACLES:
        cache = CoverageCache.for_object(assets, r, intr, config.radius)
        _ORACLES[key] = build_coverage_matrix(cache, config.candidate_set())
    return _ORACLES[key]


def run_local(assets, spec: PlannerSpec, config: ProtocolConfig, sc_ref: float | None = None,
              oracle: CoverageMatrix | None = None, timing: str = "wall"):
    """In-process episode; returns (records, report)."""
    planner = make_planner(spec)
    if oracle is None and planner.needs_oracle:
        oracle = oracle_matrix(assets, config)
    cfg = episode_config_for(planner, config)
    state = start_episode(assets.object_id, assets, cfg, sc_ref)
    handle = LocalHandle(state, planner.needs_grid)
    drive(handle, planner, cfg.budget.limit, Clock(timing), oracle)
    return handle.records, handle.report()


__all__ = ["Clock", "EpisodeDone", "Handle", "LocalHandle", "NoValidView", "PlannerSpec", "adapt_feasibility",
           "drive", "make_planner", "next_view_infogain", "next_view_oracle", "plan_max_coverage",
           "plan_random_tsp", "plan_set_cover", "run_local", "tsp_order"]
