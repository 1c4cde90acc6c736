import json
import re

import numpy as np
import pytest

from csgos import cli
from csgos.planner import PATH_LEVEL, RANK_LEVELS

from conftest import DATA, SCENES, read_pgm_text

MINI = DATA / "mini_corpus"


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# generate -----------------------------------------------------------------

def test_generate_writes_scenes_and_manifest(tmp_path):
    assert run("generate", "--n", 12, "--seed", 7, "--out", tmp_path / "c") == 0
    scenes = sorted((tmp_path / "c" / "scenes").glob("*.json"))
    assert len(scenes) == 12
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["n"] == 12 and len(manifest["scenes"]) == 12
    assert [e["split"] for e in manifest["scenes"]].count("train") == 10


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--n", 6, "--seed", 3, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_generate_missing_out_is_usage_error(capsys):
    assert run("generate", "--n", 3) == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    assert run("generate", "--bogus") == 2


# train --------------------------------------------------------------------

def test_train_two_epochs_then_resume(tmp_path):
    ck = tmp_path / "m.csgt"
    assert run("train", "--corpus", MINI, "--out", ck, "--epochs", 2) == 0
    log = tmp_path / "m.csgt.log.jsonl"
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]

    ck2 = tmp_path / "m2.csgt"
    assert run("train", "--corpus", MINI, "--out", ck2, "--resume", ck, "--epochs", 1, "--log", log) == 0
    assert [json.loads(x)["epoch"] for x in log.read_text().splitlines()] == [1, 2, 3]
    side = json.loads((tmp_path / "m2.csgt.json").read_text())
    assert side["provenance"]["resumed_from"] == str(ck)


def test_train_corrupt_checkpoint_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.csgt"
    bad.write_bytes(b"not a checkpoint")
    assert run("train", "--corpus", MINI, "--out", tmp_path / "x.csgt", "--resume", bad) == 3
    assert "checkpoint" in capsys.readouterr().err.lower()
    assert not (tmp_path / "x.csgt").exists()


def test_train_bad_lr_exits_2(tmp_path):
    assert run("train", "--corpus", MINI, "--out", tmp_path / "x.csgt", "--lr", 0) == 2


def test_train_missing_corpus_exits_3(tmp_path):
    assert run("train", "--corpus", tmp_path / "nope", "--out", tmp_path / "x.csgt") == 3


# eval-link ----------------------------------------------------------------

def test_eval_link_report(tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}.json"
        assert run("eval-link", "--corpus", MINI, "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads(outs[0])
    assert {"csgtl_acc", "statistical_acc", "threshold", "n_samples", "split"} <= set(rep)
    assert rep["threshold"] == 0.5
    assert 0.0 <= rep["csgtl_acc"] <= 1.0 and 0.0 <= rep["statistical_acc"] <= 1.0


def test_eval_link_heldout_fields(tmp_path):
    out = tmp_path / "r.json"
    assert run("eval-link", "--corpus", MINI, "--heldout", "cup,book", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert any(k.startswith("heldout") for k in rep)


# search -------------------------------------------------------------------

def test_search_many_episodes(tmp_path):
    assert run("search", "--episodes", 30, "--max-steps", 60, "--seed", 4, "--out", tmp_path) == 0
    assert len(list((tmp_path / "traces").glob("episode_*.jsonl"))) == 30
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["episodes"] == 30 and len(m["results"]) == 30
    assert 0.0 <= m["SPL"] <= m["SR"] <= 1.0
    assert m["planner"]["alpha"] == 0.4 and m["planner"]["beta"] == 0.6


def test_search_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("search", "--episodes", 2, "--max-steps", 80, "--seed", 9, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_search_bad_weights_exit_2(tmp_path):
    assert run("search", "--alpha", 0.5, "--beta", 0.6, "--out", tmp_path) == 2
    assert not (tmp_path / "metrics.json").exists()


def test_search_unknown_target_exit_3(tmp_path):
    assert run("search", "--scene", SCENES / "kitchen_small.json", "--target", "unicorn_9",
               "--out", tmp_path) == 3


def test_search_text_query(tmp_path):
    assert run("search", "--scene", SCENES / "two_rooms.json", "--target", "laptop", "--max-steps", 60,
               "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "metrics.json").read_text())["results"][0]
    assert rec["target"] == "laptop_1"


# plot ---------------------------------------------------------------------

def test_plot_outputs(tmp_path):
    assert run("plot", "--scene", SCENES / "kitchen_small.json", "--target", "coffee_cup_1", "--out", tmp_path) == 0
    heat = read_pgm_text((tmp_path / "heatmap.pgm").read_text())
    rows = (tmp_path / "heatmap.csv").read_text().splitlines()[1:]
    h, w = heat.shape
    values = np.array([float(r.split(",")[2]) for r in rows]).reshape(h, w)
    # csv is bottom row first and rounded to 6 decimals; pgm is top row first.
    # exact round(v*255) is checked on in-memory maps in test_planner
    assert np.abs(heat[::-1] - values * 255).max() <= 0.5 + 255 * 5e-7

    cands = [r.split(",") for r in (tmp_path / "candidates.csv").read_text().splitlines()[1:]]
    overlay = read_pgm_text((tmp_path / "overlay.pgm").read_text())[::-1]
    assert len(cands) >= 1
    res = 0.25
    for level, c in zip(RANK_LEVELS, cands[:3]):
        ix, iy = int(float(c[2]) / res), int(float(c[3]) / res)
        assert overlay[iy, ix] == level
    assert (overlay == PATH_LEVEL).any()
    assert [int(c[0]) for c in cands] == list(range(1, len(cands) + 1))
    costs = [float(c[6]) for c in cands]
    assert costs == sorted(costs)


def test_plot_empty_map(tmp_path):
    # nothing clears a 0.99 link threshold, so the map stays empty
    def o(oid, cat, mob, x, y, z, r):
        return {"id": oid, "category": cat, "mobility": mob, "pose": {"x": x, "y": y, "z": z},
                "footprint_radius": r}

    scene = {"schema": "csg-scene/1", "name": "bare", "extent": {"xmin": 0, "ymin": 0, "xmax": 4, "ymax": 4},
             "walls": [], "objects": [o("fridge_1", "fridge", "stationary", 3.5, 3.5, 0.9, 0.3),
                                      o("toothbrush_1", "toothbrush", "movable", 0.5, 0.5, 0.1, 0.05)]}
    p = tmp_path / "bare.json"
    p.write_text(json.dumps(scene))
    assert run("plot", "--scene", p, "--target", "toothbrush_1", "--threshold", 0.99,
               "--out", tmp_path / "o") == 0
    heat = read_pgm_text((tmp_path / "o" / "heatmap.pgm").read_text())
    assert set(heat.ravel()) == {0}
    assert (tmp_path / "o" / "candidates.csv").read_text().splitlines() == ["rank,region,x,y,weight,distance,cost"]


# provenance ---------------------------------------------------------------

def help_text(capsys, *argv):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(list(argv) + ["--help"])
    return capsys.readouterr().out


def test_help_marks_paper_defaults(capsys):
    text = help_text(capsys, "search")
    for flag, val in (("--d-thre", "1.0"), ("--w", "0.05"), ("--alpha", "0.4"), ("--beta", "0.6"),
                      ("--threshold", "0.5"), ("--success-radius", "1.0")):
        line = re.search(rf"^  {re.escape(flag)} \S+\s+(.*?)(?=\n  -|\Z)", text, re.S | re.M).group(1)
        assert val in line and "[paper-default]" in line, flag
    train = help_text(capsys, "train")
    assert re.search(r"--batch BATCH\s+graphs per batch \(default 32\) \[paper-default\]", train)


def test_defaults_command(capsys):
    assert run("defaults") == 0
    d = json.loads(capsys.readouterr().out)
    assert d["d_thre"]["value"] == 1.0 and d["batch"]["value"] == 32
    assert d["scenarios"]["value"]["single-room"] == {"w": 0.05, "alpha": 0.4, "beta": 0.6}
    assert d["scenarios"]["value"]["multi-room"] == {"w": 0.05, "alpha": 0.6, "beta": 0.4}
