import numpy as np
import pytest

from csgos.generator import GeneratorConfig, generate_scene
from csgos.graph import attach_target, build_csg, ground_truth_links, update_csg
from csgos.knowledge import TargetQuery
from csgos.scene import ReceptacleRelation, Wall

from conftest import obj, room
from oracles import brute_force_labels, brute_force_links


def test_close_pair_linked():
    g = build_csg(room([obj("a", "table", 1, 1), obj("b", "chair", 1.5, 1)]))
    assert g.edge_set() == {frozenset(("a", "b"))}


def test_receptacle_pair_linked_at_distance():
    s = room([obj("a", "table", 1, 1), obj("b", "shelf", 4, 1), obj("c", "lamp", 4, 5)],
             receptacles=[ReceptacleRelation("a", "b")])
    assert frozenset(("a", "b")) in build_csg(s).edge_set()


def test_isolated_item_gets_one_edge_to_nearest():
    s = room([obj("a", "table", 1, 1), obj("b", "chair", 1.5, 1), obj("far", "lamp", 5.5, 5.5)])
    g = build_csg(s)
    far = [e for e in g.edge_set() if "far" in e]
    assert far == [frozenset(("far", "b"))]


def test_nearest_tie_goes_to_lowest_index():
    s = room([obj("a", "table", 1, 3), obj("b", "chair", 5, 3), obj("mid", "lamp", 3, 3)])
    # "mid" is 2 m from both ends and picks index 0; "b" falls back to "mid"
    assert build_csg(s).edge_set() == {frozenset(("a", "mid")), frozenset(("b", "mid"))}
    lone = room([obj("a", "table", 1, 3), obj("b", "chair", 5, 3), obj("cup", "cup", 3, 3, mobility="movable")])
    assert ground_truth_links(lone, "cup") == {("cup", "a"): 1, ("cup", "b"): 0}


def test_d_thre_validated():
    with pytest.raises(ValueError):
        build_csg(room([obj("a", "table", 1, 1)]), d_thre=0)


def test_golden_edges_and_labels(kitchen):
    g = build_csg(kitchen)
    assert g.edge_set() == brute_force_links(kitchen, 1.0)
    expect = {frozenset(p) for p in [("chair_1", "table_1"), ("chair_2", "fridge_1"), ("chair_2", "shelf_1"),
                                      ("chair_2", "table_1"), ("counter_1", "sink_1")]}
    assert g.edge_set() == expect
    for m in kitchen.movable:
        assert ground_truth_links(kitchen, m.id) == brute_force_labels(kitchen, m.id, 1.0)
    bowl = ground_truth_links(kitchen, "bowl_1")
    assert {k[1] for k, v in bowl.items() if v} == {"table_1", "chair_1", "chair_2"}


def test_generated_scenes_match_oracle():
    cfg = GeneratorConfig()
    for seed in range(25):
        s, _ = generate_scene(cfg, seed)
        assert build_csg(s).edge_set() == brute_force_links(s, 1.0)


def test_graph_deterministic(kitchen):
    a, b = build_csg(kitchen), build_csg(kitchen)
    assert [n.node_id for n in a.nodes] == [o.id for o in kitchen.stationary]
    assert [(e.i, e.j) for e in a.edges] == [(e.i, e.j) for e in b.edges]
    assert all(np.array_equal(x.feature, y.feature) for x, y in zip(a.nodes, b.nodes))


def test_attach_counts(kitchen):
    g = build_csg(kitchen)
    t = attach_target(g, TargetQuery("cup", "cup"))
    assert len(t.nodes) == len(g.nodes) + 1
    assert len(t.candidate_edges) == len(g.nodes)
    assert t.edges == g.edges
    assert t.nodes[-1].is_target and t.nodes[-1].pose is None


def test_attach_twice_no_target_target_edge(kitchen):
    g = build_csg(kitchen)
    t = attach_target(attach_target(g, TargetQuery("cup", "cup")), TargetQuery("keys", "keys"))
    targets = set(t.target_indices)
    assert len(targets) == 2
    for e in t.candidate_edges + t.edges:
        assert not ({e.i, e.j} <= targets)
    assert len(t.candidate_edges) == 2 * len(g.nodes)


def test_attach_uses_hint(kitchen):
    t = attach_target(build_csg(kitchen), TargetQuery("cup in living room", "cup", "living room"))
    plain = attach_target(build_csg(kitchen), TargetQuery("cup", "cup"))
    assert not np.array_equal(t.nodes[-1].feature, plain.nodes[-1].feature)


def test_attach_rejects_duplicate_id(kitchen):
    g = build_csg(kitchen)
    with pytest.raises(ValueError):
        attach_target(g, TargetQuery("x", "cup"), target_id="table_1")


def test_update_identity_and_idempotence(kitchen):
    g = build_csg(kitchen)
    assert update_csg(g, []) is g
    assert update_csg(g, [kitchen.get("table_1")]) is g


def test_update_adds_edge_to_close_desk():
    g = build_csg(room([obj("desk", "desk", 2, 2, z=0.75), obj("bed", "bed", 5, 5)]))
    laptop = obj("laptop", "laptop", 2.3, 2, z=0.75, mobility="movable", r=0.15)
    g2 = update_csg(g, [laptop])
    assert frozenset(("laptop", "desk")) in g2.edge_set()
    assert g.edge_set() <= g2.edge_set()


def test_update_wires_new_nodes_to_targets(kitchen):
    g = attach_target(build_csg(kitchen), TargetQuery("cup", "cup"))
    g2 = update_csg(g, [kitchen.get("laptop_1")], receptacles=kitchen.receptacles)
    assert len(g2.candidate_edges) == len(g.candidate_edges) + 1


def test_labels_receptacle_and_far():
    s = room([obj("table", "table", 1, 1), obj("lamp", "lamp", 3, 1),
              obj("cup", "cup", 1, 1, mobility="movable", r=0.05)],
             receptacles=[ReceptacleRelation("table", "cup")])
    labels = ground_truth_links(s, "cup")
    assert labels == {("cup", "table"): 1, ("cup", "lamp"): 0}


def test_walls_do_not_affect_edges():
    objs = [obj("a", "table", 1, 1), obj("b", "chair", 1.6, 1)]
    assert build_csg(room(objs, walls=[Wall(1.3, 0, 1.3, 2)])).edge_set() == build_csg(room(objs)).edge_set()


def test_dot_export(kitchen):
    dot = attach_target(build_csg(kitchen), TargetQuery("cup", "cup")).to_dot()
    assert dot.startswith("graph csg {") and "doublecircle" in dot and "dashed" in dot
