"""Grid-world search episodes: kinematics, oracle detection and the search loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyResults, NoCandidates, Unreachable, ValidationError
from .generator import GeneratorConfig, generate_scene
from .graph import D_THRE, attach_target, build_csg, target_query_for, update_csg
from .knowledge import KnowledgeProvider, TargetQuery, get_provider
from .model import ModelParams, forward, load_default_params
from .planner import (PlannerConfig, astar_distance, distance_field, partition_regions, project_likelihood,
                      rank_candidates)
from .scene import DEFAULT_RESOLUTION, OccupancyGrid, Scene, SceneObject, rasterize_occupancy

MOVE_AHEAD = "MoveAhead"
ROTATE_LEFT = "RotateLeft"
ROTATE_RIGHT = "RotateRight"
ACTIONS = (MOVE_AHEAD, ROTATE_LEFT, ROTATE_RIGHT)
SINGLE_ROOMS = ("kitchen", "living room", "bedroom", "bathroom")

# heading in degrees -> cell offset; 0 points along +x, headings grow counter-clockwise
_DIRS = {0: (1, 0), 45: (1, 1), 90: (0, 1), 135: (-1, 1), 180: (-1, 0), 225: (-1, -1), 270: (0, -1),
         315: (1, -1)}


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: int = 0

    def __post_init__(self):
        if self.heading % 45 != 0 or not 0 <= self.heading < 360:
            raise ValidationError(f"heading must be a multiple of 45 in [0, 360), got {self.heading}")

    def cell(self, grid: OccupancyGrid) -> tuple[int, int]:
        return grid.cell_of(self.x, self.y)

    @classmethod
    def at_cell(cls, grid: OccupancyGrid, cell, heading: int = 0) -> "RobotState":
        if not grid.is_free(cell):
            raise ValidationError(f"robot cell {tuple(cell)} is not free")
        x, y = grid.center_of(cell)
        return cls(x, y, heading)


@dataclass(frozen=True)
class DetectorConfig:
    fov: float = 90.0
    range: float = 3.0
    success_radius: float = 1.0
    dropout: float = 0.0

    def __post_init__(self):
        if not 0 < self.fov <= 360:
            raise ValueError(f"fov must lie in (0, 360], got {self.fov}")
        if not self.range > 0:
            raise ValueError(f"range must be > 0, got {self.range}")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def _diag_ok(grid: OccupancyGrid, cell, d) -> bool:
    return grid.is_free((cell[0] + d[0], cell[1])) and grid.is_free((cell[0], cell[1] + d[1]))


def step(state: RobotState, action: str, grid: OccupancyGrid) -> RobotState:
    """Apply one primitive action. Blocked moves leave the state unchanged."""
    if action == ROTATE_LEFT:
        return RobotState(state.x, state.y, (state.heading + 45) % 360)
    if action == ROTATE_RIGHT:
        return RobotState(state.x, state.y, (state.heading - 45) % 360)
    if action != MOVE_AHEAD:
        raise ValueError(f"unknown action {action!r}")
    cell = state.cell(grid)
    d = _DIRS[state.heading]
    nxt = (cell[0] + d[0], cell[1] + d[1])
    if not grid.is_free(nxt) or (d[0] and d[1] and not _diag_ok(grid, cell, d)):
        return state
    x, y = grid.center_of(nxt)
    return RobotState(x, y, state.heading)


def ray_cells(grid: OccupancyGrid, p0, p1) -> list[tuple[int, int]]:
    """Cells crossed by the segment p0 -> p1 (grid traversal), endpoints included."""
    res = grid.resolution
    x0, y0 = (p0[0] - grid.origin[0]) / res, (p0[1] - grid.origin[1]) / res
    x1, y1 = (p1[0] - grid.origin[0]) / res, (p1[1] - grid.origin[1]) / res
    ix, iy = grid.cell_of(*p0)
    ex, ey = grid.cell_of(*p1)
    dx, dy = x1 - x0, y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    tdx = abs(1.0 / dx) if dx else math.inf
    tdy = abs(1.0 / dy) if dy else math.inf
    tx = ((ix + (sx > 0)) - x0) / dx if dx else math.inf
    ty = ((iy + (sy > 0)) - y0) / dy if dy else math.inf
    cells = [(ix, iy)]
    for _ in range(grid.width + grid.height + 2):
        if (ix, iy) == (ex, ey):
            break
        if abs(tx - ty) < 1e-12:
            ix += sx
            iy += sy
            tx += tdx
            ty += tdy
        elif tx < ty:
            ix += sx
            tx += tdx
        else:
            iy += sy
            ty += tdy
        cells.append((ix, iy))
    return cells


def line_of_sight(grid: OccupancyGrid, p_from, p_to) -> bool:
    """True if the ray reaches ``p_to`` without crossing blocked cells.

    The blocked run at the far end of the ray is the object's own support
    (the furniture it stands on, or the object itself) and is ignored.
    """
    cells = ray_cells(grid, p_from, p_to)[1:]
    k = len(cells)
    while k > 0 and not grid.is_free(cells[k - 1]):
        k -= 1
    return all(grid.is_free(c) for c in cells[:k])


def _bearing_ok(state: RobotState, x: float, y: float, fov: float) -> bool:
    dx, dy = x - state.x, y - state.y
    if dx == 0 and dy == 0:
        return True
    diff = (math.degrees(math.atan2(dy, dx)) - state.heading + 180.0) % 360.0 - 180.0
    return abs(diff) <= fov / 2.0 + 1e-9


def detect(state: RobotState, scene: Scene, cfg: DetectorConfig | None = None,
           grid: OccupancyGrid | None = None, rng: np.random.Generator | None = None) -> list[SceneObject]:
    """Objects in range (exclusive), inside the field of view and in line of sight."""
    cfg = cfg or DetectorConfig()
    grid = grid if grid is not None else rasterize_occupancy(scene, DEFAULT_RESOLUTION)
    out = []
    for obj in scene.objects:
        x, y = obj.pose.x, obj.pose.y
        if math.hypot(x - state.x, y - state.y) >= cfg.range:
            continue
        if not _bearing_ok(state, x, y, cfg.fov) or not line_of_sight(grid, (state.x, state.y), (x, y)):
            continue
        if cfg.dropout > 0 and rng is not None and rng.uniform() < cfg.dropout:
            continue
        out.append(obj)
    return out


def success_cells(grid: OccupancyGrid, target: SceneObject, cfg: DetectorConfig) -> list[tuple[int, int]]:
    """Free cells from which the target can be seen within the success radius."""
    reach = min(cfg.success_radius, math.nextafter(cfg.range, 0.0))
    out = []
    for cell in grid.free_cells():
        cx, cy = grid.center_of(cell)
        if math.hypot(cx - target.pose.x, cy - target.pose.y) <= reach \
                and line_of_sight(grid, (cx, cy), (target.pose.x, target.pose.y)):
            out.append(cell)
    return out


def shortest_success_length(grid: OccupancyGrid, start_cell, target: SceneObject, cfg: DetectorConfig) -> float:
    cells = success_cells(grid, target, cfg)
    if not cells:
        return math.inf
    dist = distance_field(grid, start_cell)
    return float(min(dist[c[1], c[0]] for c in cells))


# -- episodes --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EpisodeConfig:
    scene: Scene
    target_id: str
    start: RobotState
    max_steps: int = 250
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    query: TargetQuery | None = None
    d_thre: float = D_THRE
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class EpisodeResult:
    success: bool
    actions_taken: int
    path_length: float
    shortest_length: float
    termination: str  # success | budget | planning_failed
    scene: str = ""
    target_id: str = ""
    trace: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"scene": self.scene, "target": self.target_id, "success": self.success,
                "actions_taken": self.actions_taken, "path_length": round(self.path_length, 6),
                "shortest_length": round(self.shortest_length, 6), "termination": self.termination}


class _Stop(Exception):
    pass


class _Seen(Exception):
    """The target was spotted beyond the success radius."""


class _Episode:
    def __init__(self, cfg: EpisodeConfig, policy: str, params: ModelParams | None,
                 provider: KnowledgeProvider | None):
        self.cfg = cfg
        self.policy = policy
        self.params = params
        self.provider = provider
        self.scene = cfg.scene
        self.grid = rasterize_occupancy(cfg.scene, cfg.resolution)
        self.target = cfg.scene.get(cfg.target_id)
        self.rng = np.random.default_rng(cfg.seed)
        self.det_rng = np.random.default_rng([cfg.seed, 1])
        self.state = cfg.start
        if not self.grid.is_free(self.state.cell(self.grid)):
            raise ValidationError("start pose is not on a free cell")
        self.actions = 0
        self.path_length = 0.0
        self.trace: list[dict] = []
        self.events: list[dict] = []
        self.success = False
        self.approaching = False
        self.spotted = False
        self.pending: dict[str, SceneObject] = {}
        self.visited: set[int] = set()

    # perception ----------------------------------------------------------

    def observe(self) -> list[SceneObject]:
        dets = detect(self.state, self.scene, self.cfg.detector, self.grid, self.det_rng)
        for obj in dets:
            if obj.id == self.target.id:
                d = math.hypot(obj.pose.x - self.state.x, obj.pose.y - self.state.y)
                if d <= self.cfg.detector.success_radius:
                    self.success = True
                else:
                    self.spotted = True
            else:
                self.pending[obj.id] = obj
        return dets

    def act(self, action: str) -> None:
        if self.actions >= self.cfg.max_steps:
            raise _Stop
        before = self.state
        self.state = step(self.state, action, self.grid)
        self.actions += 1
        if action == MOVE_AHEAD and (self.state.x, self.state.y) != (before.x, before.y):
            self.path_length += math.hypot(self.state.x - before.x, self.state.y - before.y)
        dets = self.observe()
        rec = {"step": self.actions, "action": action,
               "pose": [round(self.state.x, 4), round(self.state.y, 4), self.state.heading],
               "detections": sorted(o.id for o in dets)}
        if self.events:
            rec["planner_event"] = self.events[0] if len(self.events) == 1 else list(self.events)
            self.events = []
        self.trace.append(rec)
        if self.success:
            raise _Stop
        if self.spotted and not self.approaching:
            raise _Seen

    # motion --------------------------------------------------------------

    def face(self, heading: int) -> None:
        diff = (heading - self.state.heading) % 360
        if diff <= 180:
            for _ in range(diff // 45):
                self.act(ROTATE_LEFT)
        else:
            for _ in range((360 - diff) // 45):
                self.act(ROTATE_RIGHT)

    def follow(self, path: Sequence[tuple[int, int]]) -> None:
        for a, b in zip(path, path[1:]):
            d = (b[0] - a[0], b[1] - a[1])
            heading = next(h for h, v in _DIRS.items() if v == d)
            self.face(heading)
            self.act(MOVE_AHEAD)

    def scan(self) -> None:
        for _ in range(7):  # with the arrival view, covers all 8 headings
            self.act(ROTATE_LEFT)

    def go(self, cell) -> None:
        _, path = astar_distance(self.grid, self.state.cell(self.grid), cell)
        self.follow(path)

    # planning ------------------------------------------------------------

    def link_probabilities(self, g) -> list[tuple[tuple[float, float], float]]:
        pred = forward(g, self.params)
        by_id = {n.node_id: n for n in g.nodes}
        return [(by_id[node].pose.xy, float(p)) for (_, node), p in zip(pred.pairs, pred.p)]

    def next_goal(self, g):
        here = (self.state.x, self.state.y)
        if self.policy == "random":
            dist = distance_field(self.grid, self.state.cell(self.grid))
            iy, ix = np.nonzero(np.isfinite(dist))
            k = int(self.rng.integers(len(ix)))
            cell = (int(ix[k]), int(iy[k]))
            self.events.append({"event": "random_goal", "cell": list(cell)})
            return cell
        regions = partition_regions(project_likelihood(self.link_probabilities(g), self.grid, self.cfg.planner),
                                    self.cfg.planner)
        try:
            cands = rank_candidates(regions, here, self.grid, self.cfg.planner, exclude=self.visited)
            best = cands[0]
            self.visited.add(best.region)
            self.events.append({"event": "plan", "region": best.region, "weight": round(best.weight, 6),
                                "cost": round(best.cost, 6), "candidates": len(cands),
                                "center": [round(best.center[0], 4), round(best.center[1], 4)]})
            return best.center_cell
        except NoCandidates:
            pass
        # nothing correlated left: explore the nearest unvisited region
        dist = distance_field(self.grid, self.state.cell(self.grid))
        pool = [(dist[r.center_cell[1], r.center_cell[0]], r.index, r) for r in regions
                if r.index not in self.visited and r.center_cell is not None
                and np.isfinite(dist[r.center_cell[1], r.center_cell[0]])]
        if not pool:
            return None
        _, _, reg = min(pool, key=lambda t: (t[0], t[1]))
        self.visited.add(reg.index)
        self.events.append({"event": "explore", "region": reg.index,
                            "center": [round(reg.center[0], 4), round(reg.center[1], 4)]})
        return reg.center_cell

    def approach(self) -> None:
        """Walk to the closest cell that sees the target within the success radius."""
        self.approaching = True
        try:
            cells = success_cells(self.grid, self.target, self.cfg.detector)
            dist = distance_field(self.grid, self.state.cell(self.grid))
            reachable = [(dist[c[1], c[0]], c[1], c[0]) for c in cells if np.isfinite(dist[c[1], c[0]])]
            if not reachable:
                return
            _, iy, ix = min(reachable)
            self.events.append({"event": "approach", "cell": [ix, iy]})
            self.go((ix, iy))
            bearing = math.degrees(math.atan2(self.target.pose.y - self.state.y, self.target.pose.x - self.state.x))
            self.face(int(round(bearing / 45.0)) % 8 * 45)
            self.scan()
        finally:
            self.approaching = False
            self.spotted = False

    # main loop -----------------------------------------------------------

    def run(self) -> EpisodeResult:
        start_cell = self.state.cell(self.grid)
        shortest = shortest_success_length(self.grid, start_cell, self.target, self.cfg.detector)
        if not math.isfinite(shortest):
            raise Unreachable(f"target {self.target.id!r} cannot be reached from the start pose")
        termination = "budget"
        g = None
        if self.policy == "csgos":
            prov = self.provider if self.provider is not None else get_provider()
            q = self.cfg.query or target_query_for(self.target)
            g = attach_target(build_csg(self.scene, self.cfg.d_thre, prov), q, prov, target_id=self.target.id)
        self.observe()
        try:
            if self.success:
                raise _Stop
            while True:
                if self.spotted:
                    self.approach()
                    continue
                if g is not None and self.pending:
                    g = update_csg(g, list(self.pending.values()), self.provider, self.cfg.d_thre,
                                   self.scene.receptacles)
                    self.pending = {}
                goal = self.next_goal(g)
                if goal is None:
                    termination = "planning_failed"
                    break
                try:
                    self.go(goal)
                    self.scan()
                except _Seen:
                    continue
        except _Stop:
            pass
        if self.success:
            termination = "success"
        return EpisodeResult(self.success, self.actions, self.path_length, shortest, termination,
                             self.scene.name, self.target.id, self.trace)


def run_episode(cfg: EpisodeConfig, model=None, provider=None, policy: str = "csgos") -> EpisodeResult:
    """Run one search episode.

    ``policy`` is "csgos" (link prediction + ranked regions) or "random"
    (random reachable goal cells with the same action model). ``model`` is
    ModelParams or a fitted CSGTLClassifier; None loads the bundled checkpoint.
    """
    if policy not in ("csgos", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    params = None
    if policy == "csgos":
        params = getattr(model, "params_", model)
        if params is None:
            params = load_default_params()
    if provider is not None and not isinstance(provider, KnowledgeProvider):
        provider = get_provider(provider)
    return _Episode(cfg, policy, params, provider).run()


def trace_jsonl(trace: Sequence[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in trace)


def metrics(results: Sequence[EpisodeResult]) -> dict:
    """Success rate and success weighted by path length, overall and per scene."""
    results = list(results)
    if not results:
        raise EmptyResults("no episode results")

    def spl_term(r: EpisodeResult) -> float:
        if not r.success:
            return 0.0
        denom = max(r.path_length, r.shortest_length)
        return 1.0 if denom == 0 else r.shortest_length / denom

    def summarise(rs):
        return {"episodes": len(rs), "SR": sum(r.success for r in rs) / len(rs),
                "SPL": sum(spl_term(r) for r in rs) / len(rs)}

    out = summarise(results)
    per_scene: dict[str, list] = {}
    for r in results:
        per_scene.setdefault(r.scene, []).append(r)
    out["per_scene"] = {k: summarise(v) for k, v in per_scene.items()}
    return out


# -- episode sets ----------------------------------------------------------

def sample_start(scene: Scene, grid: OccupancyGrid, target: SceneObject, detector: DetectorConfig,
                 rng: np.random.Generator, min_distance: float = 2.0) -> RobotState:
    """Random free start cell that can reach the target and is not already beside it."""
    goals = success_cells(grid, target, detector)
    if not goals:
        raise Unreachable(f"no cell sees {target.id!r} within the success radius")
    dist = distance_field(grid, goals[0])
    cells = []
    for cell in grid.free_cells():
        cx, cy = grid.center_of(cell)
        if np.isfinite(dist[cell[1], cell[0]]) and math.hypot(cx - target.pose.x, cy - target.pose.y) >= min_distance:
            cells.append(cell)
    if not cells:
        cells = [c for c in grid.free_cells() if np.isfinite(dist[c[1], c[0]])]
    cell = cells[int(rng.integers(len(cells)))]
    return RobotState.at_cell(grid, cell, int(rng.integers(8)) * 45)


def make_episodes(n: int, seed: int = 0, gen_cfg: GeneratorConfig | None = None,
                  room_kinds: Sequence[str] = SINGLE_ROOMS, max_steps: int = 250,
                  planner: PlannerConfig | None = None, detector: DetectorConfig | None = None) -> list[EpisodeConfig]:
    """``n`` seeded episodes on freshly generated scenes, one random movable target each."""
    gen_cfg = gen_cfg or GeneratorConfig()
    planner = planner or PlannerConfig()
    detector = detector or DetectorConfig()
    rng = np.random.default_rng(seed)
    out = []
    i = 0
    while len(out) < n:
        kind = room_kinds[int(rng.integers(len(room_kinds)))]
        scene, _ = generate_scene(gen_cfg, seed + i, room_kind=kind)
        i += 1
        movables = scene.movable
        if not movables:
            continue
        target = movables[int(rng.integers(len(movables)))]
        grid = rasterize_occupancy(scene, DEFAULT_RESOLUTION)
        try:
            start = sample_start(scene, grid, target, detector, rng)
        except Unreachable:
            continue
        out.append(EpisodeConfig(scene, target.id, start, max_steps, planner, detector, seed=seed + i))
    return out

