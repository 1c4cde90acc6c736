"""Procedural household scenes with known placement priors.

Rooms are filled with furniture clusters (a primary item plus satellites
such as chairs around a table) by rejection sampling. Each movable object
then picks an anchor category from its prior, renormalised over the
categories present, and sits "on" the anchor or "near" it (uniform in a
0.8 m disc, on a free cell).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementExhausted
from .graph import D_THRE, build_csg, graph_for_target
from .io_utils import atomic_write_text
from .scene import (DEFAULT_RESOLUTION, MOVABLE, STATIONARY, Extent, Pose2H, ReceptacleRelation, Scene,
                    SceneObject, Wall, load_scene, save_scene, scene_to_dict)
from .validation import LinkSample

GEN_SCHEMA = "csg-gen/1"
MANIFEST_SCHEMA = "csg-manifest/1"
MAX_TRIES = 1000
NEAR_RADIUS = 0.8
WALL_MARGIN = 0.3
CLEARANCE = 0.4


@dataclass(frozen=True)
class Furniture:
    category: str
    radius: float
    height: float


@dataclass(frozen=True)
class Satellite:
    category: str
    count: tuple[int, int]
    gap: tuple[float, float]


@dataclass(frozen=True)
class Cluster:
    category: str
    count: tuple[int, int]
    satellites: tuple[Satellite, ...] = ()


@dataclass(frozen=True)
class RoomTemplate:
    name: str
    size_x: tuple[float, float]
    size_y: tuple[float, float]
    clusters: tuple[Cluster, ...]


@dataclass(frozen=True)
class MovableSpec:
    category: str
    radius: float
    anchors: dict  # stationary category -> prior
    p_on: float = 0.8


def _furniture():
    rows = [
        ("table", 0.55, 0.75), ("chair", 0.25, 0.45), ("sofa", 0.6, 0.4), ("coffee table", 0.35, 0.4),
        ("tv stand", 0.4, 0.5), ("desk", 0.45, 0.75), ("bed", 0.8, 0.5), ("nightstand", 0.25, 0.55),
        ("counter", 0.5, 0.9), ("sink", 0.3, 0.85), ("fridge", 0.4, 0.9), ("shelf", 0.35, 1.0),
    ]
    return tuple(Furniture(*r) for r in rows)


def _rooms():
    # Satellite gaps are tight enough that a satellite always lies within
    # d_thre of an item resting on its primary; free-standing items are
    # pushed away by the clearance instead.
    S = Satellite
    C = Cluster
    return (
        RoomTemplate("kitchen", (4.5, 6.5), (4.0, 6.0), (
            C("counter", (1, 1), (S("sink", (0, 1), (0.0, 0.05)),)),
            C("fridge", (1, 1)),
            C("table", (1, 1), (S("chair", (2, 4), (0.0, 0.08)),)),
            C("chair", (0, 1)),
            C("shelf", (0, 1)),
        )),
        RoomTemplate("living room", (5.0, 7.0), (4.0, 6.0), (
            C("sofa", (1, 1), (S("coffee table", (1, 1), (0.05, 0.15)), S("tv stand", (1, 1), (1.1, 1.6)))),
            C("chair", (0, 2)),
            C("shelf", (0, 1)),
            C("desk", (0, 1), (S("chair", (1, 1), (0.0, 0.1)),)),
            C("table", (0, 1), (S("chair", (1, 2), (0.0, 0.08)),)),
        )),
        RoomTemplate("bedroom", (4.0, 6.0), (4.0, 5.5), (
            C("bed", (1, 1), (S("nightstand", (1, 1), (0.0, 0.1)),)),
            C("desk", (0, 1), (S("chair", (1, 1), (0.0, 0.1)),)),
            C("shelf", (0, 1)),
            C("chair", (0, 1)),
        )),
        RoomTemplate("bathroom", (2.5, 3.5), (2.5, 3.5), (
            C("sink", (1, 1)),
            C("shelf", (0, 1)),
        )),
    )


def _movables():
    # Each movable has one dominant anchor; the rest of the mass is a
    # plausible fallback used when the dominant furniture is absent.
    M = MovableSpec
    return (
        M("bowl", 0.08, {"table": 0.85, "counter": 0.15}),
        M("coffee cup", 0.05, {"table": 0.45, "desk": 0.45, "coffee table": 0.1}),
        M("mouse", 0.05, {"desk": 1.0}),
        M("marker", 0.03, {"desk": 0.9, "shelf": 0.1}),
        M("remote control", 0.06, {"coffee table": 0.9, "sofa": 0.1}),
        M("book", 0.1, {"shelf": 0.85, "nightstand": 0.15}),
        M("laptop", 0.15, {"desk": 0.9, "table": 0.1}),
        M("toothbrush", 0.03, {"sink": 1.0}),
        M("phone", 0.05, {"nightstand": 0.9, "desk": 0.1}),
        M("keys", 0.05, {"table": 0.8, "counter": 0.15, "nightstand": 0.05}),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 7
    furniture: tuple[Furniture, ...] = field(default_factory=_furniture)
    rooms: tuple[RoomTemplate, ...] = field(default_factory=_rooms)
    movables: tuple[MovableSpec, ...] = field(default_factory=_movables)
    room_weights: dict = field(default_factory=lambda: {
        "kitchen": 0.25, "living room": 0.25, "bedroom": 0.25, "bathroom": 0.1, "multi": 0.15})
    movables_per_scene: tuple[int, int] = (2, 4)
    near_radius: float = NEAR_RADIUS
    d_thre: float = D_THRE
    heldout_categories: tuple[str, ...] = ()

    def __post_init__(self):
        cats = {f.category for f in self.furniture}
        for m in self.movables:
            total = sum(m.anchors.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"anchor priors for {m.category!r} sum to {total}, not 1")
            if not any(p > 0 for p in m.anchors.values()):
                raise ValueError(f"{m.category!r} has no anchor with positive prior")
            unknown = set(m.anchors) - cats
            if unknown:
                raise ValueError(f"{m.category!r} anchors unknown furniture {sorted(unknown)}")
            if not 0 <= m.p_on <= 1:
                raise ValueError(f"p_on for {m.category!r} must be in [0, 1]")
        for r in self.rooms:
            for c in r.clusters:
                if c.category not in cats or any(s.category not in cats for s in c.satellites):
                    raise ValueError(f"room {r.name!r} uses unknown furniture")
        names = {r.name for r in self.rooms} | {"multi"}
        if set(self.room_weights) - names:
            raise ValueError(f"room_weights name unknown rooms {sorted(set(self.room_weights) - names)}")
        lo, hi = self.movables_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("movables_per_scene must satisfy 1 <= lo <= hi")

    def furniture_spec(self, category: str) -> Furniture:
        for f in self.furniture:
            if f.category == category:
                return f
        raise KeyError(category)

    def movable_spec(self, category: str) -> MovableSpec:
        for m in self.movables:
            if m.category == category:
                return m
        raise KeyError(category)

    def room(self, name: str) -> RoomTemplate:
        for r in self.rooms:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = GEN_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        if d.get("schema") != GEN_SCHEMA:
            raise ValueError(f"generator config needs schema {GEN_SCHEMA!r}")
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "furniture" in d:
            kw["furniture"] = tuple(Furniture(f["category"], float(f["radius"]), float(f["height"]))
                                    for f in d["furniture"])
        if "rooms" in d:
            kw["rooms"] = tuple(
                RoomTemplate(r["name"], tuple(r["size_x"]), tuple(r["size_y"]), tuple(
                    Cluster(c["category"], tuple(c["count"]), tuple(
                        Satellite(s["category"], tuple(s["count"]), tuple(s["gap"])) for s in c.get("satellites", ())))
                    for c in r["clusters"]))
                for r in d["rooms"])
        if "movables" in d:
            kw["movables"] = tuple(MovableSpec(m["category"], float(m["radius"]), dict(m["anchors"]),
                                               float(m.get("p_on", 0.8))) for m in d["movables"])
        for key in ("room_weights",):
            if key in d:
                kw[key] = dict(d[key])
        if "movables_per_scene" in d:
            kw["movables_per_scene"] = tuple(d["movables_per_scene"])
        for key in ("near_radius", "d_thre"):
            if key in d:
                kw[key] = float(d[key])
        if "heldout_categories" in d:
            kw["heldout_categories"] = tuple(d["heldout_categories"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Placement:
    anchor: str
    relation: str  # "on" | "near"
    offset: tuple[float, float]


PlacementRecord = dict  # movable id -> Placement


# -- layout ----------------------------------------------------------------

@dataclass
class _Layout:
    extent: Extent
    walls: list
    rooms: list  # (name, Extent)
    items: list  # (id, Furniture, x, y, room name)

    def free_at(self, x: float, y: float, res: float = DEFAULT_RESOLUTION) -> bool:
        cx = self.extent.xmin + (math.floor((x - self.extent.xmin) / res) + 0.5) * res
        cy = self.extent.ymin + (math.floor((y - self.extent.ymin) / res) + 0.5) * res
        for _, f, fx, fy, _ in self.items:
            if (cx - fx) ** 2 + (cy - fy) ** 2 <= f.radius ** 2:
                return False
        for w in self.walls:
            if w.x0 == w.x1 and abs(x - w.x0) < res and min(w.y0, w.y1) <= y <= max(w.y0, w.y1):
                return False
            if w.y0 == w.y1 and abs(y - w.y0) < res and min(w.x0, w.x1) <= x <= max(w.x0, w.x1):
                return False
        return True


def _fits(layout: _Layout, f: Furniture, x, y, room: Extent, clearance=CLEARANCE) -> bool:
    m = f.radius + WALL_MARGIN
    if not (room.xmin + m <= x <= room.xmax - m and room.ymin + m <= y <= room.ymax - m):
        return False
    for _, g, gx, gy, _ in layout.items:
        if math.hypot(x - gx, y - gy) < f.radius + g.radius + clearance - 1e-9:
            return False
    return True


def _place_room(cfg: GeneratorConfig, layout: _Layout, template: RoomTemplate, room: Extent, rng,
                counters: dict) -> None:
    def new_id(cat):
        counters[cat] = counters.get(cat, 0) + 1
        return f"{cat.replace(' ', '_')}_{counters[cat]}"

    for cluster in template.clusters:
        n = int(rng.integers(cluster.count[0], cluster.count[1] + 1))
        spec = cfg.furniture_spec(cluster.category)
        for slot in range(n):
            for _try in range(MAX_TRIES):
                x = rng.uniform(room.xmin, room.xmax)
                y = rng.uniform(room.ymin, room.ymax)
                if _fits(layout, spec, x, y, room):
                    break
            else:
                if slot < cluster.count[0]:
                    raise PlacementExhausted(f"could not place {cluster.category} in {template.name}")
                break  # optional items are dropped when the room is full
            pid = new_id(cluster.category)
            layout.items.append((pid, spec, x, y, template.name))
            for sat in cluster.satellites:
                sspec = cfg.furniture_spec(sat.category)
                k = int(rng.integers(sat.count[0], sat.count[1] + 1))
                for sslot in range(k):
                    for _try in range(MAX_TRIES):
                        theta = rng.uniform(0, 2 * math.pi)
                        dist = spec.radius + sspec.radius + rng.uniform(*sat.gap)
                        sx, sy = x + dist * math.cos(theta), y + dist * math.sin(theta)
                        if _fits(layout, sspec, sx, sy, room, clearance=min(sat.gap[0], 0.05)):
                            break
                    else:
                        if sslot < sat.count[0]:
                            raise PlacementExhausted(f"could not place {sat.category} near {cluster.category}")
                        break
                    layout.items.append((new_id(sat.category), sspec, sx, sy, template.name))


def _room_size(template: RoomTemplate, rng) -> tuple[float, float]:
    # sizes on a 0.25 m lattice keep the occupancy grid aligned with the extent
    w = round(rng.uniform(*template.size_x) * 4) / 4
    h = round(rng.uniform(*template.size_y) * 4) / 4
    return w, h


LAYOUT_ATTEMPTS = 20


def sample_layout(cfg: GeneratorConfig, rng, room_kind: str | None = None) -> _Layout:
    """Draw a furniture layout, redrawing from the same stream if a room overflows."""
    for attempt in range(LAYOUT_ATTEMPTS):
        try:
            return _sample_layout_once(cfg, rng, room_kind)
        except PlacementExhausted:
            if attempt == LAYOUT_ATTEMPTS - 1:
                raise
    raise AssertionError("unreachable")


def _sample_layout_once(cfg: GeneratorConfig, rng, room_kind: str | None) -> _Layout:
    kinds = list(cfg.room_weights)
    if room_kind is None:
        probs = np.array([cfg.room_weights[k] for k in kinds], dtype=float)
        room_kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    counters: dict = {}
    if room_kind == "multi":
        singles = [r.name for r in cfg.rooms if r.name != "bathroom"] or [r.name for r in cfg.rooms]
        a, b = rng.choice(len(singles), size=2, replace=len(singles) < 2)
        ta, tb = cfg.room(singles[int(a)]), cfg.room(singles[int(b)])
        wa, ha = _room_size(ta, rng)
        wb, hb = _room_size(tb, rng)
        h = max(ha, hb)
        extent = Extent(0.0, 0.0, wa + wb, h)
        door_lo = round(rng.uniform(0.5, h - 1.5) * 4) / 4
        walls = [Wall(wa, 0.0, wa, door_lo), Wall(wa, door_lo + 1.0, wa, h)]
        rooms = [(ta.name, Extent(0.0, 0.0, wa, h)), (tb.name, Extent(wa, 0.0, wa + wb, h))]
        layout = _Layout(extent, walls, rooms, [])
        _place_room(cfg, layout, ta, rooms[0][1], rng, counters)
        _place_room(cfg, layout, tb, rooms[1][1], rng, counters)
        return layout
    template = cfg.room(room_kind)
    w, h = _room_size(template, rng)
    extent = Extent(0.0, 0.0, w, h)
    layout = _Layout(extent, [], [(template.name, extent)], [])
    _place_room(cfg, layout, template, extent, rng, counters)
    return layout


def anchor_weights(spec: MovableSpec, present: dict[str, list]) -> dict[str, float]:
    """Prior over anchor objects: category prior renormalised over present
    categories, split evenly among objects of that category."""
    cats = {c: p for c, p in spec.anchors.items() if p > 0 and present.get(c)}
    total = sum(cats.values())
    out = {}
    for c, p in cats.items():
        for oid in present[c]:
            out[oid] = p / total / len(present[c])
    return out


def eligible_movables(cfg: GeneratorConfig, layout: _Layout) -> list[MovableSpec]:
    present = {f.category for _, f, *_ in layout.items}
    return [m for m in cfg.movables if any(p > 0 and c in present for c, p in m.anchors.items())]


def sample_near_offset(layout: _Layout, x, y, radius: float, rng) -> tuple[float, float] | None:
    ext = layout.extent
    for _ in range(MAX_TRIES):
        r = radius * math.sqrt(rng.uniform())
        th = rng.uniform(0, 2 * math.pi)
        dx, dy = r * math.cos(th), r * math.sin(th)
        px, py = x + dx, y + dy
        if ext.xmin + 0.1 <= px <= ext.xmax - 0.1 and ext.ymin + 0.1 <= py <= ext.ymax - 0.1 \
                and layout.free_at(px, py):
            return dx, dy
    return None


def generate_scene(cfg: GeneratorConfig | None = None, seed: int | None = None,
                   room_kind: str | None = None) -> tuple[Scene, PlacementRecord]:
    cfg = cfg or GeneratorConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    layout = sample_layout(cfg, rng, room_kind)
    objects = [SceneObject(oid, f.category, STATIONARY, Pose2H(x, y, f.height), f.radius)
               for oid, f, x, y, _ in layout.items]
    by_id = {oid: (f, x, y, room) for oid, f, x, y, room in layout.items}
    present: dict[str, list] = {}
    for oid, f, *_ in layout.items:
        present.setdefault(f.category, []).append(oid)
    eligible = eligible_movables(cfg, layout)
    lo, hi = cfg.movables_per_scene
    k = min(int(rng.integers(lo, hi + 1)), len(eligible))
    chosen = [eligible[int(i)] for i in sorted(rng.choice(len(eligible), size=k, replace=False))] if k else []
    receptacles = []
    record: PlacementRecord = {}
    for spec in chosen:
        weights = anchor_weights(spec, present)
        ids = list(weights)
        anchor = ids[int(rng.choice(len(ids), p=np.array([weights[i] for i in ids])))]
        f, ax, ay, _ = by_id[anchor]
        relation = "on" if rng.uniform() < spec.p_on else "near"
        offset = (0.0, 0.0)
        if relation == "near":
            off = sample_near_offset(layout, ax, ay, cfg.near_radius, rng)
            if off is None:
                relation = "on"
            else:
                offset = off
        mid = spec.category.replace(" ", "_") + "_1"
        objects.append(SceneObject(mid, spec.category, MOVABLE,
                                   Pose2H(ax + offset[0], ay + offset[1], f.height), spec.radius))
        if relation == "on":
            receptacles.append(ReceptacleRelation(anchor, mid, "on"))
        record[mid] = Placement(anchor, relation, offset)
    room_name = "+".join(name for name, _ in layout.rooms)
    scene = Scene(objects, receptacles, layout.extent, layout.walls, DEFAULT_RESOLUTION,
                  name=f"gen-{seed}", room=room_name)
    return scene, record


# -- corpora ---------------------------------------------------------------

def generate_corpus(cfg: GeneratorConfig | None, n: int, split: float, out_dir, jobs: int = 1) -> dict:
    """Write ``n`` scenes plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    cfg = cfg or GeneratorConfig()
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0 < split < 1:
        raise ValueError("split must lie in (0, 1)")
    out_dir = Path(out_dir)
    seeds = [cfg.seed + i for i in range(n)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda s: generate_scene(cfg, s), seeds))
    else:
        results = [generate_scene(cfg, s) for s in seeds]
    order = np.random.default_rng(cfg.seed).permutation(n)
    n_train = int(round(n * split))
    n_train = min(max(n_train, 1), n - 1)
    train_set = set(int(i) for i in order[:n_train])
    entries = []
    for i, ((scene, record), seed) in enumerate(zip(results, seeds)):
        rel = f"scenes/scene_{i:04d}.json"
        save_scene(scene, out_dir / rel)
        entries.append({
            "path": rel, "seed": seed, "split": "train" if i in train_set else "test", "room": scene.room,
            "placements": {k: {"anchor": v.anchor, "relation": v.relation, "offset": list(v.offset)}
                           for k, v in record.items()},
        })
    manifest = {"schema": MANIFEST_SCHEMA, "n": n, "split": split, "generator": cfg.to_dict(),
                "heldout_categories": list(cfg.heldout_categories), "scenes": entries}
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: not a {MANIFEST_SCHEMA} manifest")
    return manifest, path.parent


def scene_samples(scene: Scene, provider=None, d_thre: float = D_THRE, scene_id: str = "",
                  include=None, exclude=()) -> list[LinkSample]:
    """One link sample per movable object in ``scene``."""
    base = build_csg(scene, d_thre, provider)
    out = []
    for obj in scene.movable:
        if obj.category in exclude or (include is not None and obj.category not in include):
            continue
        g, labels = graph_for_target(scene, obj.id, d_thre, provider, base=base)
        out.append(LinkSample(g, labels, scene_id or scene.name, {"category": obj.category}))
    return out


def load_corpus(manifest_path, split: str | None = "train", provider=None, d_thre: float = D_THRE,
                include=None, exclude=()) -> list[LinkSample]:
    manifest, root = load_manifest(manifest_path)
    samples = []
    for entry in manifest["scenes"]:
        if split is not None and entry["split"] != split:
            continue
        scene = load_scene(root / entry["path"])
        samples.extend(scene_samples(scene, provider, d_thre, entry["path"], include, exclude))
    return samples


def corpus_in_memory(cfg: GeneratorConfig | None, n: int, split: float = 0.8, provider=None,
                     d_thre: float = D_THRE) -> tuple[list, list]:
    """(train scenes, test scenes) generated like :func:`generate_corpus`, without touching disk."""
    cfg = cfg or GeneratorConfig()
    scenes = [generate_scene(cfg, cfg.seed + i)[0] for i in range(n)]
    order = np.random.default_rng(cfg.seed).permutation(n)
    n_train = min(max(int(round(n * split)), 1), n - 1)
    train_idx = set(int(i) for i in order[:n_train])
    train = [scenes[i] for i in range(n) if i in train_idx]
    test = [scenes[i] for i in range(n) if i not in train_idx]
    return train, test


# -- oracle ----------------------------------------------------------------

def _links_for_pose(layout: _Layout, pose: tuple[float, float, float], anchor: str | None,
                    d_thre: float) -> list[str]:
    x, y, z = pose
    out = []
    for oid, f, fx, fy, _ in layout.items:
        if oid == anchor or math.sqrt((x - fx) ** 2 + (y - fy) ** 2 + (z - f.height) ** 2) < d_thre:
            out.append(oid)
    if not out:
        best = min(layout.items, key=lambda it: (math.sqrt((x - it[2]) ** 2 + (y - it[3]) ** 2
                                                           + (z - it[1].height) ** 2)))
        out.append(best[0])
    return out


def oracle_cooccurrence(cfg: GeneratorConfig | None = None, n_layouts: int = 2000, offsets_per_anchor: int = 25,
                        seed: int = 12345) -> dict[tuple[str, str], float]:
    """Link rate for every (movable category, stationary category) pair.

    Anchor choices are enumerated exactly with their prior weights; room
    layouts and "near" offsets are Monte Carlo samples. The estimand matches
    the statistical baseline: expected linked pairs over expected pairs.
    """
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)
    num: dict = {}
    den: dict = {}
    lo, hi = cfg.movables_per_scene
    for _ in range(n_layouts):
        layout = sample_layout(cfg, rng)
        present: dict[str, list] = {}
        cat_of = {}
        for oid, f, *_ in layout.items:
            present.setdefault(f.category, []).append(oid)
            cat_of[oid] = f.category
        eligible = eligible_movables(cfg, layout)
        if not eligible:
            continue
        ks = np.arange(lo, hi + 1)
        incl = float(np.mean(np.minimum(ks, len(eligible)))) / len(eligible)
        pos = {oid: (x, y, f.height) for oid, f, x, y, _ in layout.items}
        for spec in eligible:
            weights = anchor_weights(spec, present)
            linked = {c: 0.0 for c in present}
            for anchor, w in weights.items():
                ax, ay, az = pos[anchor]
                for c_oid in _links_for_pose(layout, (ax, ay, az), anchor, cfg.d_thre):
                    linked[cat_of[c_oid]] += w * spec.p_on
                near_w = w * (1 - spec.p_on)
                got = 0
                hits = {c: 0 for c in present}
                fallback_on = 0
                for _s in range(offsets_per_anchor):
                    off = sample_near_offset(layout, ax, ay, cfg.near_radius, rng)
                    if off is None:
                        fallback_on += 1
                        continue
                    got += 1
                    for c_oid in _links_for_pose(layout, (ax + off[0], ay + off[1], az), None, cfg.d_thre):
                        hits[cat_of[c_oid]] += 1
                for c in present:
                    linked[c] += near_w * hits[c] / offsets_per_anchor
                if fallback_on:
                    for c_oid in _links_for_pose(layout, (ax, ay, az), anchor, cfg.d_thre):
                        linked[cat_of[c_oid]] += near_w * fallback_on / offsets_per_anchor
            for c, ids in present.items():
                key = (spec.category, c)
                num[key] = num.get(key, 0.0) + incl * linked[c]
                den[key] = den.get(key, 0.0) + incl * len(ids)
    return {k: num[k] / den[k] for k in den if den[k] > 0}


def scene_as_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=2) + "\n"
