"""Commonsense scene graph construction, target attachment and link labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UnknownTarget
from .knowledge import KnowledgeProvider, TargetQuery, get_provider
from .scene import Pose2H, ReceptacleRelation, Scene, SceneObject

D_THRE = 1.0


@dataclass(frozen=True, eq=False)
class Node:
    node_id: str
    category: str
    mobility: str
    pose: Pose2H | None
    feature: np.ndarray = field(repr=False)
    is_target: bool = False


@dataclass(frozen=True, eq=False)
class Edge:
    i: int
    j: int
    feature: np.ndarray = field(repr=False)
    candidate: bool = False


@dataclass(frozen=True, eq=False)
class CSG:
    """Undirected scene graph.

    Structural edges are stored once with ``i < j``. Candidate edges link a
    target node to every other node and never take part in message passing.
    """

    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...] = ()
    candidate_edges: tuple[Edge, ...] = ()

    @property
    def adjacency(self) -> list[set[int]]:
        adj = [set() for _ in self.nodes]
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        return adj

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((len(self.nodes), len(self.nodes)), dtype=bool)
        for e in self.edges:
            a[e.i, e.j] = a[e.j, e.i] = True
        return a

    def edge_set(self) -> set[frozenset]:
        return {frozenset((self.nodes[e.i].node_id, self.nodes[e.j].node_id)) for e in self.edges}

    def index(self, node_id: str) -> int:
        for k, n in enumerate(self.nodes):
            if n.node_id == node_id:
                return k
        raise KeyError(node_id)

    @property
    def target_indices(self) -> list[int]:
        return [k for k, n in enumerate(self.nodes) if n.is_target]

    @property
    def non_target_indices(self) -> list[int]:
        return [k for k, n in enumerate(self.nodes) if not n.is_target]

    def to_dot(self) -> str:
        lines = ["graph csg {"]
        for k, n in enumerate(self.nodes):
            shape = "doublecircle" if n.is_target else ("box" if n.mobility == "stationary" else "ellipse")
            lines.append(f'  n{k} [label="{n.category}\\n{n.node_id}", shape={shape}];')
        for e in self.edges:
            lines.append(f"  n{e.i} -- n{e.j};")
        for e in self.candidate_edges:
            lines.append(f"  n{e.i} -- n{e.j} [style=dashed];")
        lines.append("}")
        return "\n".join(lines) + "\n"


LinkLabels = dict  # (target_id, node_id) -> 0/1


def edge_rule_links(poses: Sequence[Pose2H], ids: Sequence[str], subject: Pose2H, subject_id: str,
              receptacle_pairs: set, d_thre: float) -> list[int]:
    """Indices of ``poses`` that the edge rule links to ``subject``.

    Close (3-D distance below threshold) or receptacle partners win; if there
    are none, the single nearest item is used, ties to the lowest index.
    """
    linked = [k for k, (p, oid) in enumerate(zip(poses, ids))
              if oid != subject_id and (subject.dist3(p) < d_thre
                                        or frozenset((subject_id, oid)) in receptacle_pairs)]
    if linked:
        return linked
    best, best_d = None, np.inf
    for k, (p, oid) in enumerate(zip(poses, ids)):
        if oid == subject_id:
            continue
        d = subject.dist3(p)
        if d < best_d:
            best, best_d = k, d
    return [] if best is None else [best]


def _provider(provider) -> KnowledgeProvider:
    if provider is None:
        return get_provider()
    if isinstance(provider, KnowledgeProvider):
        return provider
    return get_provider(provider)


def _make_node(obj: SceneObject, prov: KnowledgeProvider) -> Node:
    return Node(obj.id, obj.category, obj.mobility, obj.pose, prov.node_feature(obj.category))


def build_csg(scene: Scene, d_thre: float = D_THRE, provider=None) -> CSG:
    if not d_thre > 0:
        raise ValueError("d_thre must be > 0")
    prov = _provider(provider)
    objs = scene.stationary
    nodes = tuple(_make_node(o, prov) for o in objs)
    recept = scene.receptacle_pairs()
    poses = [o.pose for o in objs]
    ids = [o.id for o in objs]
    pairs = set()
    for i, o in enumerate(objs):
        for j in edge_rule_links(poses, ids, o.pose, o.id, recept, d_thre):
            pairs.add((min(i, j), max(i, j)))
    edges = tuple(Edge(i, j, prov.edge_feature(objs[i].category, objs[j].category)) for i, j in sorted(pairs))
    return CSG(nodes, edges)


def attach_target(g: CSG, q: TargetQuery, provider=None, target_id: str | None = None) -> CSG:
    if not g.nodes:
        raise ValueError("cannot attach a target to an empty graph")
    prov = _provider(provider)
    existing = {n.node_id for n in g.nodes}
    if target_id is None:
        target_id = f"target:{q.category}"
        k = 1
        while target_id in existing:
            k += 1
            target_id = f"target:{q.category}#{k}"
    elif target_id in existing:
        raise ValueError(f"node id {target_id!r} already in graph")
    feature = prov.node_feature(q.category, q.hint)
    t = len(g.nodes)
    node = Node(target_id, q.category, "movable", None, feature, is_target=True)
    cands = tuple(Edge(i, t, prov.edge_feature(q.category, n.category), candidate=True)
                  for i, n in enumerate(g.nodes) if not n.is_target)
    return CSG(g.nodes + (node,), g.edges, g.candidate_edges + cands)


def update_csg(g: CSG, detections: Iterable[SceneObject], provider=None, d_thre: float = D_THRE,
               receptacles: Iterable[ReceptacleRelation] = ()) -> CSG:
    """Add newly detected objects as nodes, wired by the edge rule.

    Existing edges are never removed; already-present ids are ignored.
    """
    prov = _provider(provider)
    present = {n.node_id for n in g.nodes}
    new = []
    for obj in detections:
        if obj.id not in present:
            present.add(obj.id)
            new.append(obj)
    if not new:
        return g
    recept = {frozenset((r.holder, r.held)) for r in receptacles}
    nodes = list(g.nodes)
    edges = list(g.edges)
    cands = list(g.candidate_edges)
    for obj in new:
        base = [k for k, n in enumerate(nodes) if not n.is_target]
        poses = [nodes[k].pose for k in base]
        ids = [nodes[k].node_id for k in base]
        idx = len(nodes)
        nodes.append(_make_node(obj, prov))
        for j in edge_rule_links(poses, ids, obj.pose, obj.id, recept, d_thre):
            k = base[j]
            edges.append(Edge(k, idx, prov.edge_feature(nodes[k].category, obj.category)))
        for t, n in enumerate(nodes[:-1]):
            if n.is_target:
                cands.append(Edge(idx, t, prov.edge_feature(n.category, obj.category), candidate=True))
    return CSG(tuple(nodes), tuple(edges), tuple(cands))


def ground_truth_links(scene: Scene, target_id: str, d_thre: float = D_THRE) -> LinkLabels:
    try:
        target = scene.get(target_id)
    except KeyError:
        raise UnknownTarget(f"no object {target_id!r} in scene") from None
    if target.stationary:
        raise UnknownTarget(f"{target_id!r} is stationary, not a movable target")
    objs = scene.stationary
    linked = set(edge_rule_links([o.pose for o in objs], [o.id for o in objs], target.pose, target.id,
                           scene.receptacle_pairs(), d_thre))
    return {(target_id, o.id): int(k in linked) for k, o in enumerate(objs)}


def target_query_for(obj: SceneObject) -> TargetQuery:
    return TargetQuery(raw_text=obj.category, category=obj.category)


def graph_for_target(scene: Scene, target_id: str, d_thre: float = D_THRE, provider=None,
                     base: CSG | None = None) -> tuple[CSG, LinkLabels]:
    """Stationary CSG with ``target_id`` attached, plus its ground-truth labels."""
    g = base if base is not None else build_csg(scene, d_thre, provider)
    obj = scene.get(target_id)
    g = attach_target(g, target_query_for(obj), provider, target_id=target_id)
    return g, ground_truth_links(scene, target_id, d_thre)

