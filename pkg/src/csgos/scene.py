"""Scene representation, JSON ingestion and occupancy-grid rasterization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ParseError, ResolutionError, ValidationError
from .io_utils import atomic_write_text, pgm_text

SCHEMA = "csg-scene/1"
STATIONARY = "stationary"
MOVABLE = "movable"
MOBILITIES = (STATIONARY, MOVABLE)
RECEPTACLE_KINDS = ("on", "inside")
DEFAULT_RESOLUTION = 0.25


@dataclass(frozen=True)
class Pose2H:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValidationError(f"non-finite pose {self}")
        if self.z < 0:
            raise ValidationError(f"negative height in {self}")

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def dist3(self, other: "Pose2H") -> float:
        return math.sqrt((self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2)

    def dist2(self, other: "Pose2H") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class SceneObject:
    id: str
    category: str
    mobility: str
    pose: Pose2H
    footprint_radius: float

    def __post_init__(self):
        if not self.id:
            raise ValidationError("object id must be non-empty")
        if not self.category:
            raise ValidationError(f"object {self.id!r} has an empty category")
        if self.mobility not in MOBILITIES:
            raise ValidationError(f"object {self.id!r}: mobility must be one of {MOBILITIES}")
        if not (self.footprint_radius > 0 and math.isfinite(self.footprint_radius)):
            raise ValidationError(f"object {self.id!r}: footprint_radius must be > 0")

    @property
    def stationary(self) -> bool:
        return self.mobility == STATIONARY


@dataclass(frozen=True)
class ReceptacleRelation:
    holder: str
    held: str
    kind: str = "on"

    def __post_init__(self):
        if self.holder == self.held:
            raise ValidationError(f"receptacle relation on {self.holder!r} refers to itself")
        if self.kind not in RECEPTACLE_KINDS:
            raise ValidationError(f"receptacle kind must be one of {RECEPTACLE_KINDS}")


@dataclass(frozen=True)
class Extent:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValidationError(f"degenerate extent {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


@dataclass(frozen=True)
class Wall:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x0 != self.x1 and self.y0 != self.y1:
            raise ValidationError(f"wall {self} is not axis-aligned")


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    receptacles: tuple[ReceptacleRelation, ...]
    extent: Extent
    walls: tuple[Wall, ...] = ()
    resolution_hint: float = DEFAULT_RESOLUTION
    name: str = ""
    room: str = ""

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "receptacles", tuple(self.receptacles))
        object.__setattr__(self, "walls", tuple(self.walls))
        validate_scene(self)

    def get(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    @property
    def stationary(self) -> list[SceneObject]:
        return [o for o in self.objects if o.stationary]

    @property
    def movable(self) -> list[SceneObject]:
        return [o for o in self.objects if not o.stationary]

    def receptacle_pairs(self) -> set[frozenset]:
        return {frozenset((r.holder, r.held)) for r in self.receptacles}


def validate_scene(scene: Scene) -> None:
    if not scene.objects:
        raise ValidationError("scene must contain at least one object")
    ids = [o.id for o in scene.objects]
    seen = set()
    for oid in ids:
        if oid in seen:
            raise ValidationError(f"duplicate object id {oid!r}")
        seen.add(oid)
    if not any(o.stationary for o in scene.objects):
        raise ValidationError("scene needs at least one stationary object")
    for o in scene.objects:
        if not scene.extent.contains(o.pose.x, o.pose.y):
            raise ValidationError(f"object {o.id!r} pose lies outside the scene extent")
    for r in scene.receptacles:
        for oid in (r.holder, r.held):
            if oid not in seen:
                raise ValidationError(f"receptacle relation references unknown id {oid!r}")
    if not scene.resolution_hint > 0:
        raise ValidationError("resolution_hint must be > 0")


# -- JSON ------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    e = scene.extent
    doc = {
        "schema": SCHEMA,
        "name": scene.name,
        "room": scene.room,
        "extent": {"xmin": e.xmin, "ymin": e.ymin, "xmax": e.xmax, "ymax": e.ymax},
        "resolution_hint": scene.resolution_hint,
        "walls": [{"x0": w.x0, "y0": w.y0, "x1": w.x1, "y1": w.y1} for w in scene.walls],
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "mobility": o.mobility,
                "pose": {"x": o.pose.x, "y": o.pose.y, "z": o.pose.z},
                "footprint_radius": o.footprint_radius,
            }
            for o in scene.objects
        ],
        "receptacles": [{"holder": r.holder, "held": r.held, "kind": r.kind} for r in scene.receptacles],
    }
    return doc


def scene_from_dict(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise ParseError("scene document must be a JSON object")
    if doc.get("schema") != SCHEMA:
        raise ParseError(f"missing or unsupported schema (expected {SCHEMA!r})")
    try:
        ext = doc["extent"]
        extent = Extent(float(ext["xmin"]), float(ext["ymin"]), float(ext["xmax"]), float(ext["ymax"]))
        walls = [Wall(float(w["x0"]), float(w["y0"]), float(w["x1"]), float(w["y1"])) for w in doc.get("walls", [])]
        objects = []
        for o in doc["objects"]:
            p = o["pose"]
            objects.append(SceneObject(
                id=str(o["id"]),
                category=str(o["category"]),
                mobility=str(o["mobility"]),
                pose=Pose2H(float(p["x"]), float(p["y"]), float(p.get("z", 0.0))),
                footprint_radius=float(o["footprint_radius"]),
            ))
        receptacles = [
            ReceptacleRelation(str(r["holder"]), str(r["held"]), str(r.get("kind", "on")))
            for r in doc.get("receptacles", [])
        ]
        resolution = float(doc.get("resolution_hint", DEFAULT_RESOLUTION))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scene document: {exc!r}") from exc
    return Scene(objects, receptacles, extent, walls, resolution,
                 name=str(doc.get("name", "")), room=str(doc.get("room", "")))


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scene_from_dict(doc)


def save_scene(scene: Scene, path) -> None:
    atomic_write_text(path, json.dumps(scene_to_dict(scene), indent=2) + "\n")


# -- occupancy -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Blocked/free cells; ``blocked[iy, ix]`` with (0, 0) at the origin corner."""

    resolution: float
    origin: tuple[float, float]
    blocked: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.blocked, dtype=bool)
        arr.setflags(write=False)
        object.__setattr__(self, "blocked", arr)

    @property
    def width(self) -> int:
        return self.blocked.shape[1]

    @property
    def height(self) -> int:
        return self.blocked.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocked.shape

    def in_bounds(self, cell) -> bool:
        ix, iy = cell
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and not self.blocked[cell[1], cell[0]]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        return (min(max(ix, 0), self.width - 1), min(max(iy, 0), self.height - 1))

    def center_of(self, cell) -> tuple[float, float]:
        return (self.origin[0] + (cell[0] + 0.5) * self.resolution,
                self.origin[1] + (cell[1] + 0.5) * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid of cell-center coordinates, each shaped like ``blocked``."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def free_cells(self) -> list[tuple[int, int]]:
        iy, ix = np.nonzero(~self.blocked)
        return [(int(a), int(b)) for a, b in zip(ix, iy)]

    def nearest_free(self, cell, candidates: Iterable | None = None):
        """Closest free cell to ``cell`` (Euclidean in cells, ties by (iy, ix))."""
        if candidates is None:
            mask = ~self.blocked
        else:
            mask = np.zeros(self.shape, dtype=bool)
            for c in candidates:
                if self.is_free(c):
                    mask[c[1], c[0]] = True
        iy, ix = np.nonzero(mask)
        if len(ix) == 0:
            return None
        d2 = (ix - cell[0]) ** 2 + (iy - cell[1]) ** 2
        k = int(np.argmin(d2))
        return (int(ix[k]), int(iy[k]))

    def with_blocked(self, extra: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin, self.blocked | extra)

    def __eq__(self, other):
        return (isinstance(other, OccupancyGrid) and self.resolution == other.resolution
                and self.origin == other.origin and np.array_equal(self.blocked, other.blocked))

    def to_pgm(self) -> str:
        img = np.where(self.blocked, 0, 255)[::-1]
        return pgm_text(img)


def _wall_mask(wall: Wall, shape, origin, res) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)

    def span(lo, hi, o, n):
        a = int(math.floor((lo - o) / res))
        t = (hi - o) / res
        b = int(math.floor(t))
        # a segment ending exactly on a cell boundary does not enter the next cell
        if hi > lo and math.isclose(t, round(t)) and b > a:
            b -= 1
        return min(max(a, 0), n - 1), min(max(b, 0), n - 1)

    x_lo, x_hi = sorted((wall.x0, wall.x1))
    y_lo, y_hi = sorted((wall.y0, wall.y1))
    ax, bx = span(x_lo, x_hi, origin[0], w)
    ay, by = span(y_lo, y_hi, origin[1], h)
    mask[ay:by + 1, ax:bx + 1] = True
    return mask


def rasterize_occupancy(scene: Scene, resolution: float = DEFAULT_RESOLUTION,
                        include: Iterable[SceneObject] | None = None) -> OccupancyGrid:
    """Block cells whose centers fall inside a stationary disc or that a wall touches.

    ``include`` overrides which objects are rasterized (defaults to the
    scene's stationary objects).
    """
    ext = scene.extent
    if not (resolution > 0 and resolution <= min(ext.width, ext.height) / 4 + 1e-12):
        raise ResolutionError(f"resolution {resolution} outside (0, {min(ext.width, ext.height) / 4}]")
    w = int(math.ceil(ext.width / resolution - 1e-9))
    h = int(math.ceil(ext.height / resolution - 1e-9))
    origin = (ext.xmin, ext.ymin)
    blocked = np.zeros((h, w), dtype=bool)
    xs = ext.xmin + (np.arange(w) + 0.5) * resolution
    ys = ext.ymin + (np.arange(h) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    objs = scene.stationary if include is None else list(include)
    for o in objs:
        blocked |= (gx - o.pose.x) ** 2 + (gy - o.pose.y) ** 2 <= o.footprint_radius ** 2
    for wall in scene.walls:
        blocked |= _wall_mask(wall, (h, w), origin, resolution)
    return OccupancyGrid(resolution, origin, blocked)
