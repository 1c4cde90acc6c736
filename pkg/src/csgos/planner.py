"""Likelihood field, region partition, A* distances and candidate ranking."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GridMismatch, NoCandidates, Unreachable
from .io_utils import pgm_text
from .scene import OccupancyGrid
from .validation import check_weights

SQRT2 = math.sqrt(2.0)

# (w, alpha, beta) per scenario, from the published hyperparameter table
PRESETS = {
    "single-room": {"w": 0.05, "alpha": 0.4, "beta": 0.6},
    "multi-room": {"w": 0.05, "alpha": 0.6, "beta": 0.4},
    "real-world": {"w": 0.1, "alpha": 0.5, "beta": 0.5},
}


@dataclass(frozen=True)
class PlannerConfig:
    r: float = 1.0
    w: float = 0.05
    alpha: float = 0.4
    beta: float = 0.6
    link_threshold: float = 0.5

    def __post_init__(self):
        if not self.r > 0 or not math.isfinite(self.r):
            raise ValueError(f"r must be > 0, got {self.r}")
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        check_weights(self.alpha, self.beta)
        if not 0 < self.link_threshold < 1:
            raise ValueError("link_threshold must lie in (0, 1)")

    @classmethod
    def preset(cls, name: str, **overrides) -> "PlannerConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class LikelihoodMap:
    """Per-cell likelihood ``values[iy, ix]`` on the cells of ``grid``."""

    grid: OccupancyGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise GridMismatch(f"map shape {v.shape} does not match grid {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def scaled(self) -> np.ndarray:
        """Values mapped to 0..255 by round(v * 255)."""
        return np.rint(self.values * 255.0).astype(int)

    def to_pgm(self) -> str:
        return pgm_text(self.scaled()[::-1])

    def to_csv(self) -> str:
        xs, ys = self.grid.cell_centers()
        lines = ["x,y,value"]
        for iy in range(self.grid.height):
            for ix in range(self.grid.width):
                lines.append(f"{xs[iy, ix]:.4f},{ys[iy, ix]:.4f},{self.values[iy, ix]:.6f}")
        return "\n".join(lines) + "\n"


def project_likelihood(correlated: Iterable[tuple[Sequence[float], float]], grid: OccupancyGrid,
                       cfg: PlannerConfig | None = None) -> LikelihoodMap:
    """Spread each correlated object's likelihood over a disc of radius ``r``.

    Only objects with ``h`` above the link threshold count towards ``K``.
    The ``w*K`` award is given to cells inside at least one disc; cells
    outside every disc stay at zero.
    """
    cfg = cfg or PlannerConfig()
    items = []
    for loc, h in correlated:
        h = float(h)
        if not 0.0 <= h <= 1.0 or math.isnan(h):
            raise ValueError(f"likelihood must lie in [0, 1], got {h}")
        x, y = float(loc[0]), float(loc[1])
        ox, oy = grid.origin
        if not (ox <= x <= ox + grid.width * grid.resolution and oy <= y <= oy + grid.height * grid.resolution):
            raise GridMismatch(f"location ({x}, {y}) lies outside the grid")
        if h > cfg.link_threshold:
            items.append((x, y, h))
    values = np.zeros(grid.shape)
    if not items:
        return LikelihoodMap(grid, values)
    xs, ys = grid.cell_centers()
    total = np.zeros(grid.shape)
    covered = np.zeros(grid.shape, dtype=bool)
    for x, y, h in items:
        d = np.hypot(xs - x, ys - y)
        inside = d < cfg.r
        total += np.where(inside, h * (cfg.r - d), 0.0)
        covered |= inside
    k = len(items)
    values = np.where(covered, np.minimum(1.0, total / k + cfg.w * k), 0.0)
    return LikelihoodMap(grid, values)


@dataclass(frozen=True)
class Region:
    index: int
    ix: tuple[int, int]  # half-open cell range
    iy: tuple[int, int]
    weight: float
    center: tuple[float, float] | None  # meters, snapped to a free cell
    center_cell: tuple[int, int] | None

    def contains(self, cell) -> bool:
        return self.ix[0] <= cell[0] < self.ix[1] and self.iy[0] <= cell[1] < self.iy[1]


def region_side_cells(grid: OccupancyGrid, cfg: PlannerConfig) -> int:
    side = 2.0 * cfg.r / grid.resolution
    if side < 1.0 - 1e-9:
        raise ValueError(f"region side 2r = {2 * cfg.r} m is smaller than one cell")
    return max(1, int(round(side)))


def partition_regions(m: LikelihoodMap, cfg: PlannerConfig | None = None) -> list[Region]:
    """Disjoint square tiles of side 2r anchored at the grid origin, row-major."""
    cfg = cfg or PlannerConfig()
    grid = m.grid
    s = region_side_cells(grid, cfg)
    out = []
    for y0 in range(0, grid.height, s):
        for x0 in range(0, grid.width, s):
            x1, y1 = min(x0 + s, grid.width), min(y0 + s, grid.height)
            weight = float(m.values[y0:y1, x0:x1].sum())
            # geometric center of the (possibly partial) tile, in cell units
            cx, cy = (x0 + x1) / 2.0 - 0.5, (y0 + y1) / 2.0 - 0.5
            inside = [(ix, iy) for iy in range(y0, y1) for ix in range(x0, x1)]
            cell = _nearest_cell(grid, (cx, cy), inside)
            if cell is None:
                cell = _nearest_cell(grid, (cx, cy), None)
            center = grid.center_of(cell) if cell is not None else None
            out.append(Region(len(out), (x0, x1), (y0, y1), weight, center, cell))
    return out


def _nearest_cell(grid: OccupancyGrid, target: tuple[float, float], cells):
    best, best_key = None, None
    pool = cells if cells is not None else grid.free_cells()
    for c in pool:
        if not grid.is_free(c):
            continue
        key = ((c[0] - target[0]) ** 2 + (c[1] - target[1]) ** 2, c[1], c[0])
        if best_key is None or key < best_key:
            best, best_key = c, key
    return best


# -- shortest paths --------------------------------------------------------

_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


def neighbors(grid: OccupancyGrid, cell) -> Iterable[tuple[tuple[int, int], float]]:
    """8-connected free neighbours with step lengths in meters.

    A diagonal step needs both orthogonal cells it passes between to be free,
    so paths never cut a blocked corner.
    """
    ix, iy = cell
    res = grid.resolution
    for dx, dy in _MOVES:
        nxt = (ix + dx, iy + dy)
        if not grid.is_free(nxt):
            continue
        if dx and dy:
            if not (grid.is_free((ix + dx, iy)) and grid.is_free((ix, iy + dy))):
                continue
            yield nxt, res * SQRT2
        else:
            yield nxt, res


def octile(a, b, res: float) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return res * (max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy))


def _check_free(grid: OccupancyGrid, cell, name: str) -> tuple[int, int]:
    cell = (int(cell[0]), int(cell[1]))
    if not grid.is_free(cell):
        raise ValueError(f"{name} cell {cell} is not a free cell")
    return cell


def astar_distance(grid: OccupancyGrid, a, b) -> tuple[float, list[tuple[int, int]]]:
    """Shortest 8-connected path length (meters) and the cell path from ``a`` to ``b``."""
    a = _check_free(grid, a, "start")
    b = _check_free(grid, b, "goal")
    if a == b:
        return 0.0, [a]
    res = grid.resolution
    g_best = {a: 0.0}
    parent = {a: None}
    tie = 0
    heap = [(octile(a, b, res), tie, a)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == b:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return g_best[cur], path[::-1]
        closed.add(cur)
        for nxt, step in neighbors(grid, cur):
            g = g_best[cur] + step
            if g < g_best.get(nxt, math.inf) - 1e-12:
                g_best[nxt] = g
                parent[nxt] = cur
                tie += 1
                heapq.heappush(heap, (g + octile(nxt, b, res), tie, nxt))
    raise Unreachable(f"no path from {a} to {b}")


def distance_field(grid: OccupancyGrid, source) -> np.ndarray:
    """Shortest-path distance from ``source`` to every cell (inf if unreachable)."""
    source = _check_free(grid, source, "source")
    dist = np.full(grid.shape, np.inf)
    dist[source[1], source[0]] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, cur = heapq.heappop(heap)
        if d > dist[cur[1], cur[0]]:
            continue
        for nxt, step in neighbors(grid, cur):
            nd = d + step
            if nd < dist[nxt[1], nxt[0]] - 1e-12:
                dist[nxt[1], nxt[0]] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


# -- ranking ---------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    region: int
    weight: float
    center: tuple[float, float]
    center_cell: tuple[int, int]
    distance: float
    cost: float


CandidateList = list  # of Candidate, ascending cost


def rank_candidates(regions: Sequence[Region], p_robot: Sequence[float], grid: OccupancyGrid,
                    cfg: PlannerConfig | None = None, exclude: Iterable[int] = ()) -> CandidateList:
    """Order regions with positive weight by the weighted cost of likelihood and distance.

    ``p_robot`` is in meters and must fall on a free cell. Regions listed in
    ``exclude`` (already visited) and unreachable regions are skipped.
    """
    cfg = cfg or PlannerConfig()
    robot = _check_free(grid, grid.cell_of(*p_robot), "robot")
    skip = set(exclude)
    pool = []
    for reg in regions:
        if reg.weight <= 0 or reg.index in skip or reg.center_cell is None:
            continue
        try:
            d, _ = astar_distance(grid, robot, reg.center_cell)
        except Unreachable:
            continue
        pool.append((reg, d))
    if not pool:
        raise NoCandidates("no reachable region with positive likelihood")
    if len(pool) == 1:
        reg, d = pool[0]
        return [Candidate(reg.index, reg.weight, reg.center, reg.center_cell, d, 0.0)]
    w_max = max(reg.weight for reg, _ in pool)
    d_max = max(d for _, d in pool)
    out = []
    for reg, d in pool:
        c = cfg.alpha * (1.0 - reg.weight / w_max) + cfg.beta * (d / d_max if d_max > 0 else 0.0)
        out.append(Candidate(reg.index, reg.weight, reg.center, reg.center_cell, d, min(1.0, max(0.0, c))))
    out.sort(key=lambda c: (c.cost, -c.weight, c.region))
    return out


# -- plot helpers ----------------------------------------------------------

PATH_LEVEL = 251
RANK_LEVELS = (254, 253, 252)  # top-1, top-2, top-3 candidate centers


def overlay_pgm(m: LikelihoodMap, candidates: Sequence[Candidate] = (),
                path: Sequence[tuple[int, int]] = ()) -> str:
    """Heatmap squeezed into 0..250 with the path and the top-3 centers marked.

    Path cells are 251; the first three candidate centers are 254, 253, 252
    in rank order, drawn over the path.
    """
    img = np.rint(m.values * 250.0).astype(int)
    for ix, iy in path:
        img[iy, ix] = PATH_LEVEL
    for level, cand in zip(RANK_LEVELS, candidates):
        ix, iy = cand.center_cell
        img[iy, ix] = level
    return pgm_text(img[::-1])


def candidates_csv(candidates: Sequence[Candidate]) -> str:
    lines = ["rank,region,x,y,weight,distance,cost"]
    for k, c in enumerate(candidates, 1):
        lines.append(f"{k},{c.region},{c.center[0]:.4f},{c.center[1]:.4f},{c.weight:.6f},"
                     f"{c.distance:.6f},{c.cost:.6f}")
    return "\n".join(lines) + "\n"
