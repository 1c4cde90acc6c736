import json
import math

import numpy as np
import pytest

from csgos import cli
from csgos.errors import EmptyResults, ValidationError
from csgos.scene import Wall, rasterize_occupancy
from csgos.sim import (MOVE_AHEAD, ROTATE_LEFT, ROTATE_RIGHT, DetectorConfig, EpisodeConfig, EpisodeResult,
                       RobotState, detect, line_of_sight, make_episodes, metrics, run_episode, sample_start,
                       shortest_success_length, step, success_cells, trace_jsonl)

from conftest import FIXTURES, SCENES, obj, room


def cup(x, y):
    return obj("cup_1", "cup", x, y, z=0.8, mobility="movable", r=0.05)


def shelf():
    # scenes need one stationary object; park it out of the way
    return obj("shelf_1", "shelf", 5.6, 0.4, r=0.2)


@pytest.fixture
def open_room():
    sc = room([obj("table_1", "table", 4.0, 3.0), cup(2.0, 3.0)])
    return sc, rasterize_occupancy(sc)


# kinematics ---------------------------------------------------------------

def test_move_ahead_east(open_room):
    _, g = open_room
    s = RobotState.at_cell(g, (8, 12), 0)
    n = step(s, MOVE_AHEAD, g)
    assert n.x == pytest.approx(s.x + 0.25, abs=1e-12) and n.y == s.y and n.heading == 0


def test_diagonal_move_is_one_cell_each_axis(open_room):
    _, g = open_room
    s = RobotState.at_cell(g, (8, 8), 45)
    n = step(s, MOVE_AHEAD, g)
    assert (n.x - s.x, n.y - s.y) == pytest.approx((0.25, 0.25), abs=1e-12)


def test_eight_left_turns_return_heading(open_room):
    _, g = open_room
    s = RobotState.at_cell(g, (8, 8), 135)
    for _ in range(8):
        s = step(s, ROTATE_LEFT, g)
    assert s.heading == 135
    assert step(s, ROTATE_RIGHT, g).heading == 90


def test_blocked_move_keeps_state():
    sc = room([obj("table_1", "table", 2.0, 2.0, r=0.5)])
    g = rasterize_occupancy(sc)
    s = RobotState.at_cell(g, g.cell_of(1.3, 2.0), 0)
    # march east until the table stops us
    for _ in range(10):
        s2 = step(s, MOVE_AHEAD, g)
        if s2 == s:
            break
        s = s2
    assert s2 == s
    assert not g.is_free((s.cell(g)[0] + 1, s.cell(g)[1]))


def test_no_corner_cutting():
    # a post on cell (11, 9) blocks the diagonal (10, 9) -> (11, 10)
    sc = room([shelf(), obj("post_1", "lamp", 11.5 * 0.25, 9.5 * 0.25, r=0.1)])
    g = rasterize_occupancy(sc)
    assert not g.is_free((11, 9)) and g.is_free((11, 10)) and g.is_free((10, 10))
    s = RobotState.at_cell(g, (10, 9), 45)
    assert step(s, MOVE_AHEAD, g) == s
    assert step(RobotState.at_cell(g, (10, 10), 0), MOVE_AHEAD, g).cell(g) == (11, 10)


def test_bad_heading_and_action(open_room):
    _, g = open_room
    with pytest.raises(ValidationError):
        RobotState(1.0, 1.0, 30)
    with pytest.raises(ValueError):
        step(RobotState(1.0, 1.0, 0), "Jump", g)


# detection ----------------------------------------------------------------

def test_object_ahead_detected(open_room):
    sc, g = open_room
    s = RobotState(1.5, 3.0, 0)
    assert {o.id for o in detect(s, sc, grid=g)} == {"cup_1", "table_1"}


def test_object_behind_not_detected(open_room):
    sc, g = open_room
    ids = [o.id for o in detect(RobotState(2.5, 3.0, 0), sc, grid=g)]
    assert ids == ["table_1"]


def test_object_behind_wall_not_detected():
    sc = room([shelf(), cup(4.0, 3.0)], walls=[Wall(3.0, 0.0, 3.0, 6.0)])
    g = rasterize_occupancy(sc)
    s = RobotState(2.0, 3.0, 0)
    assert detect(s, sc, grid=g) == []
    assert not line_of_sight(g, (s.x, s.y), (4.0, 3.0))


def test_range_is_exclusive():
    cfg = DetectorConfig()
    sc = room([shelf(), cup(0.5 + cfg.range, 3.0), obj("x_1", "book", 0.5 + cfg.range - 1e-6, 3.5, mobility="movable", r=0.05)])
    g = rasterize_occupancy(sc)
    ids = [o.id for o in detect(RobotState(0.5, 3.0, 0), sc, cfg, g)]
    assert "cup_1" not in ids
    sc = room([shelf(), cup(0.5 + cfg.range - 1e-6, 3.0)])
    assert [o.id for o in detect(RobotState(0.5, 3.0, 0), sc, cfg, rasterize_occupancy(sc))] == ["cup_1"]


def test_fov_boundary():
    sc = room([shelf(), cup(3.0, 3.0 + 1.0)])  # 45 deg left of east from (2, 3)
    g = rasterize_occupancy(sc)
    assert detect(RobotState(2.0, 3.0, 0), sc, grid=g)
    assert not detect(RobotState(2.0, 3.0, 0), sc, DetectorConfig(fov=60), g)


def test_object_on_furniture_is_visible():
    table = obj("table_1", "table", 3.0, 3.0, r=0.4)
    sc = room([table, cup(3.0, 3.0)])
    g = rasterize_occupancy(sc)
    assert {o.id for o in detect(RobotState(1.5, 3.0, 0), sc, grid=g)} == {"cup_1", "table_1"}


def test_detector_config_validation():
    for bad in (dict(fov=0), dict(range=0), dict(success_radius=-1), dict(dropout=1.0)):
        with pytest.raises(ValueError):
            DetectorConfig(**bad)


# episodes -----------------------------------------------------------------

@pytest.mark.parametrize("heading", [0, 90, 180, 270])
def test_nearby_target_found_within_a_scan(open_room, heading):
    sc, g = open_room
    start = RobotState.at_cell(g, g.cell_of(2.6, 3.1), heading)
    r = run_episode(EpisodeConfig(sc, "cup_1", start, max_steps=50))
    assert r.success and r.termination == "success"
    assert r.actions_taken <= 8


def test_budget_exhausted():
    sc = room([obj("table_1", "table", 3.0, 3.0), cup(5.5, 5.5)], walls=[Wall(3.0, 4.5, 6.0, 4.5)])
    g = rasterize_occupancy(sc)
    start = RobotState.at_cell(g, g.cell_of(0.6, 0.6), 270)
    r = run_episode(EpisodeConfig(sc, "cup_1", start, max_steps=1))
    assert not r.success and r.termination == "budget" and r.actions_taken == 1


def test_start_on_blocked_cell_rejected(open_room):
    sc, _ = open_room
    with pytest.raises(ValidationError):
        run_episode(EpisodeConfig(sc, "cup_1", RobotState(4.0, 3.0, 0)))


def test_shortest_length_zero_inside_radius(open_room):
    sc, g = open_room
    target = sc.get("cup_1")
    cell = g.cell_of(2.6, 3.1)
    assert shortest_success_length(g, cell, target, DetectorConfig()) == 0.0
    assert cell in success_cells(g, target, DetectorConfig())


def test_path_never_shorter_than_shortest(kitchen):
    for ep in make_episodes(4, seed=11):
        r = run_episode(ep)
        if r.success:
            assert r.path_length >= r.shortest_length - 1e-9


def test_golden_trace(tmp_path):
    code = cli.main(["search", "--scene", str(SCENES / "kitchen_small.json"), "--target", "coffee_cup_1",
                     "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    got = (tmp_path / "traces" / "episode_0000.jsonl").read_bytes()
    assert got == (FIXTURES / "golden_trace_kitchen_small.jsonl").read_bytes()


def test_traces_reproducible(kitchen):
    g = rasterize_occupancy(kitchen)
    target = kitchen.get("coffee_cup_1")
    start = sample_start(kitchen, g, target, DetectorConfig(), np.random.default_rng(3))
    runs = [trace_jsonl(run_episode(EpisodeConfig(kitchen, target.id, start, seed=3)).trace) for _ in range(2)]
    assert runs[0] == runs[1]
    for line in runs[0].splitlines():
        rec = json.loads(line)
        assert set(rec) >= {"step", "action", "pose", "detections"}


def test_random_policy_runs(kitchen):
    ep = make_episodes(1, seed=2)[0]
    r = run_episode(ep, policy="random")
    assert r.termination in ("success", "budget", "planning_failed")
    with pytest.raises(ValueError):
        run_episode(ep, policy="greedy")


# metrics ------------------------------------------------------------------

def res(success, path, shortest, scene="a"):
    return EpisodeResult(success, 0, path, shortest, "success" if success else "budget", scene, "t")


def test_metrics_all_failures():
    m = metrics([res(False, 3.0, 1.0), res(False, 0.0, 2.0)])
    assert m["SR"] == 0.0 and m["SPL"] == 0.0


def test_metrics_exact_shortest():
    m = metrics([res(True, 4.0, 4.0)])
    assert m["SR"] == 1.0 and m["SPL"] == 1.0


def test_metrics_hand_example():
    m = metrics([res(True, 10.0, 5.0, "a"), res(False, 7.0, 3.0, "b")])
    assert m["SR"] == pytest.approx(0.5, abs=1e-12)
    assert m["SPL"] == pytest.approx(0.25, abs=1e-12)
    assert m["per_scene"]["a"]["SPL"] == pytest.approx(0.5, abs=1e-12)
    assert m["per_scene"]["b"] == {"episodes": 1, "SR": 0.0, "SPL": 0.0}


def test_metrics_zero_length_success():
    assert metrics([res(True, 0.0, 0.0)])["SPL"] == 1.0


def test_metrics_empty():
    with pytest.raises(EmptyResults):
        metrics([])


def test_spl_bounded_by_sr():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rs = [res(bool(rng.integers(2)), float(rng.uniform(0, 10)), float(rng.uniform(0, 10))) for _ in range(5)]
        m = metrics(rs)
        assert 0.0 <= m["SPL"] <= m["SR"] + 1e-12 <= 1.0 + 1e-12
        assert not math.isnan(m["SPL"])
